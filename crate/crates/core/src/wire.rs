//! Framed wire protocol shared by the volume service, the offload engine,
//! and the token scheduler.
//!
//! Every message is a frame: a little-endian `u32` length, one message-type
//! byte, then the payload. The length field covers the type byte plus the
//! payload, so a frame occupies `4 + 1 + payload` bytes on the wire. Link
//! byte counters advance by exactly that amount per frame in each direction.

use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a single frame payload; guards against allocating from a
/// corrupt or hostile length field.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

pub mod msg {
    pub const IO_READ: u8 = 1;
    pub const IO_WRITE: u8 = 2;
    pub const IO_READ_RESP: u8 = 3;
    pub const IO_WRITE_ACK: u8 = 4;
    pub const HELLO: u8 = 5;
    pub const HELLO_RESP: u8 = 6;
    pub const ERR: u8 = 7;
    pub const OK: u8 = 8;
    pub const OFFLOAD_SUBMIT: u8 = 10;
    pub const OFFLOAD_RESULT: u8 = 11;
    pub const TOKEN_GRANT: u8 = 12;
    pub const TOKEN_RETURN: u8 = 13;
    pub const TOKEN_ACQUIRE: u8 = 14;
    pub const CACHE_INVAL: u8 = 15;
}

/// Wire size of a frame carrying `payload_len` payload bytes.
pub fn frame_len(payload_len: usize) -> u64 {
    4 + 1 + payload_len as u64
}

/// Wire size of an IO_READ request frame: u64 addr + u32 count.
pub fn io_read_frame_len() -> u64 {
    frame_len(12)
}

/// Wire size of an IO_READ_RESP frame carrying `data_len` bytes.
pub fn io_read_resp_frame_len(data_len: usize) -> u64 {
    frame_len(data_len)
}

/// Wire size of an IO_WRITE request frame carrying `data_len` bytes.
pub fn io_write_frame_len(data_len: usize) -> u64 {
    frame_len(12 + data_len)
}

/// Wire size of an IO_WRITE_ACK frame (empty payload).
pub fn io_write_ack_frame_len() -> u64 {
    frame_len(0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

/// Encodes an IO_READ payload: `[u64 addr][u32 count]`.
pub fn encode_io_read(addr: u64, count: u32) -> Vec<u8> {
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(&addr.to_le_bytes());
    p.extend_from_slice(&count.to_le_bytes());
    p
}

pub fn decode_io_read(payload: &[u8]) -> io::Result<(u64, u32)> {
    if payload.len() != 12 {
        return Err(bad_payload("IO_READ", payload.len()));
    }
    let addr = u64::from_le_bytes(payload[0..8].try_into().unwrap());
    let count = u32::from_le_bytes(payload[8..12].try_into().unwrap());
    Ok((addr, count))
}

/// Encodes an IO_WRITE payload: `[u64 addr][u32 count][data]`.
pub fn encode_io_write(addr: u64, count: u32, data: &[u8]) -> Vec<u8> {
    let mut p = Vec::with_capacity(12 + data.len());
    p.extend_from_slice(&addr.to_le_bytes());
    p.extend_from_slice(&count.to_le_bytes());
    p.extend_from_slice(data);
    p
}

pub fn decode_io_write(payload: &[u8]) -> io::Result<(u64, u32, &[u8])> {
    if payload.len() < 12 {
        return Err(bad_payload("IO_WRITE", payload.len()));
    }
    let addr = u64::from_le_bytes(payload[0..8].try_into().unwrap());
    let count = u32::from_le_bytes(payload[8..12].try_into().unwrap());
    Ok((addr, count, &payload[12..]))
}

fn bad_payload(kind: &str, len: usize) -> io::Error {
    io::Error::new(
        io::ErrorKind::InvalidData,
        format!("malformed {} payload ({} bytes)", kind, len),
    )
}

/// Per-direction link byte/frame counters, shared between the two endpoints
/// of a connection (or between a metered local volume and its observer).
#[derive(Debug, Default)]
pub struct LinkStats {
    tx_bytes: AtomicU64,
    rx_bytes: AtomicU64,
    tx_frames: AtomicU64,
    rx_frames: AtomicU64,
}

impl LinkStats {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add_tx(&self, bytes: u64) {
        self.tx_bytes.fetch_add(bytes, Ordering::Relaxed);
        self.tx_frames.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_rx(&self, bytes: u64) {
        self.rx_bytes.fetch_add(bytes, Ordering::Relaxed);
        self.rx_frames.fetch_add(1, Ordering::Relaxed);
    }

    pub fn tx_bytes(&self) -> u64 {
        self.tx_bytes.load(Ordering::Relaxed)
    }

    pub fn rx_bytes(&self) -> u64 {
        self.rx_bytes.load(Ordering::Relaxed)
    }

    pub fn tx_frames(&self) -> u64 {
        self.tx_frames.load(Ordering::Relaxed)
    }

    pub fn rx_frames(&self) -> u64 {
        self.rx_frames.load(Ordering::Relaxed)
    }
}

/// Optional simulated link characteristics applied per frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinkProfile {
    /// Fixed one-way delay added to every frame.
    pub latency_us: u64,
    /// If set, each frame additionally waits `bytes / bandwidth` seconds.
    pub bandwidth_bytes_per_sec: Option<u64>,
}

impl LinkProfile {
    pub fn delay_for(&self, bytes: u64) -> Duration {
        let mut us = self.latency_us;
        if let Some(bw) = self.bandwidth_bytes_per_sec {
            if bw > 0 {
                us += bytes.saturating_mul(1_000_000) / bw;
            }
        }
        Duration::from_micros(us)
    }

    fn apply(&self, bytes: u64) {
        let d = self.delay_for(bytes);
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }
}

/// Byte-stream transport speaking the frame format, with per-direction
/// accounting and optional simulated pacing.
pub struct FramedStream<S> {
    inner: S,
    stats: Arc<LinkStats>,
    profile: LinkProfile,
}

impl<S> FramedStream<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            stats: LinkStats::new(),
            profile: LinkProfile::default(),
        }
    }

    pub fn with_stats(inner: S, stats: Arc<LinkStats>) -> Self {
        Self {
            inner,
            stats,
            profile: LinkProfile::default(),
        }
    }

    pub fn set_profile(&mut self, profile: LinkProfile) {
        self.profile = profile;
    }

    pub fn stats(&self) -> Arc<LinkStats> {
        Arc::clone(&self.stats)
    }

    pub fn get_ref(&self) -> &S {
        &self.inner
    }
}

impl<S: Write> FramedStream<S> {
    pub fn send(&mut self, msg_type: u8, payload: &[u8]) -> io::Result<()> {
        let len = 1 + payload.len();
        if len as u64 > MAX_FRAME_LEN as u64 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "frame payload too large",
            ));
        }
        let mut header = [0u8; 5];
        header[0..4].copy_from_slice(&(len as u32).to_le_bytes());
        header[4] = msg_type;
        self.inner.write_all(&header)?;
        self.inner.write_all(payload)?;
        self.inner.flush()?;
        let wire = frame_len(payload.len());
        self.stats.add_tx(wire);
        self.profile.apply(wire);
        Ok(())
    }
}

impl<S: Read> FramedStream<S> {
    pub fn recv(&mut self) -> io::Result<Frame> {
        let mut lenbuf = [0u8; 4];
        self.inner.read_exact(&mut lenbuf)?;
        let len = u32::from_le_bytes(lenbuf);
        if len == 0 || len > MAX_FRAME_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("invalid frame length {}", len),
            ));
        }
        let mut typebuf = [0u8; 1];
        self.inner.read_exact(&mut typebuf)?;
        let mut payload = vec![0u8; len as usize - 1];
        self.inner.read_exact(&mut payload)?;
        self.stats.add_rx(frame_len(payload.len()));
        Ok(Frame {
            msg_type: typebuf[0],
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frame_roundtrip_and_accounting() {
        let mut out = FramedStream::new(Cursor::new(Vec::new()));
        out.send(msg::IO_WRITE, &encode_io_write(7, 1, &[0xcc; 4096]))
            .unwrap();
        out.send(msg::IO_WRITE_ACK, &[]).unwrap();
        // One 4 KiB block write: 4 (len) + 1 (type) + 12 (addr/count) + 4096.
        assert_eq!(out.stats().tx_bytes(), 4113 + 5);
        assert_eq!(out.stats().tx_frames(), 2);

        let bytes = out.get_ref().get_ref().clone();
        let mut inp = FramedStream::new(Cursor::new(bytes));
        let f1 = inp.recv().unwrap();
        assert_eq!(f1.msg_type, msg::IO_WRITE);
        let (addr, count, data) = decode_io_write(&f1.payload).unwrap();
        assert_eq!((addr, count), (7, 1));
        assert_eq!(data, &[0xcc; 4096][..]);
        let f2 = inp.recv().unwrap();
        assert_eq!(f2.msg_type, msg::IO_WRITE_ACK);
        assert!(f2.payload.is_empty());
        assert_eq!(inp.stats().rx_bytes(), 4113 + 5);
    }

    #[test]
    fn io_read_payload_layout() {
        let p = encode_io_read(0x0102030405060708, 0x0a0b0c0d);
        assert_eq!(p.len(), 12);
        // Little-endian addr then count.
        assert_eq!(&p[0..8], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&p[8..12], &[0x0d, 0x0c, 0x0b, 0x0a]);
        assert_eq!(decode_io_read(&p).unwrap(), (0x0102030405060708, 0x0a0b0c0d));
    }

    #[test]
    fn frame_len_helpers() {
        assert_eq!(io_read_frame_len(), 17);
        assert_eq!(io_read_resp_frame_len(4096), 4101);
        assert_eq!(io_write_frame_len(4096), 4113);
        assert_eq!(io_write_ack_frame_len(), 5);
    }

    #[test]
    fn recv_rejects_zero_length() {
        let mut inp = FramedStream::new(Cursor::new(vec![0, 0, 0, 0, 1]));
        assert!(inp.recv().is_err());
    }
}
