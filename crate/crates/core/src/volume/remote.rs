//! TCP-backed volume client.
//!
//! Speaks the framed wire protocol to a volume service. One request is in
//! flight per connection; callers wanting parallelism open more connections.
//! Range and alignment are validated locally before anything is transmitted,
//! so rejected operations cost no link bytes on any backend.

use std::net::TcpStream;
use std::sync::{Arc, Mutex};

use super::{
    check_aligned, check_range, BlockAddr, BlockStore, IoCounters, IoCounts, VolumeError,
    VolumeGeometry,
};
use crate::wire::{self, msg, FramedStream, LinkProfile, LinkStats};

pub struct RemoteVolume {
    conn: Mutex<FramedStream<TcpStream>>,
    geom: VolumeGeometry,
    volume_id: u64,
    stats: Arc<LinkStats>,
    counters: IoCounters,
}

impl RemoteVolume {
    /// Connects to `addr` and negotiates access to the named volume.
    pub fn connect(addr: &str, volume_name: &str) -> Result<Self, VolumeError> {
        Self::connect_with(addr, volume_name, LinkProfile::default(), LinkStats::new())
    }

    pub fn connect_with(
        addr: &str,
        volume_name: &str,
        profile: LinkProfile,
        stats: Arc<LinkStats>,
    ) -> Result<Self, VolumeError> {
        let sock = TcpStream::connect(addr).map_err(|e| VolumeError::Connect(e.to_string()))?;
        sock.set_nodelay(true).ok();
        let mut conn = FramedStream::with_stats(sock, Arc::clone(&stats));
        conn.set_profile(profile);

        let mut hello = Vec::with_capacity(6 + volume_name.len());
        hello.extend_from_slice(&wire::PROTOCOL_VERSION.to_le_bytes());
        hello.extend_from_slice(&(volume_name.len() as u16).to_le_bytes());
        hello.extend_from_slice(volume_name.as_bytes());
        conn.send(msg::HELLO, &hello)?;

        let resp = conn.recv().map_err(map_io)?;
        match resp.msg_type {
            msg::HELLO_RESP => {
                let p = &resp.payload;
                if p.len() != 4 + 8 + 4 + 8 {
                    return Err(VolumeError::Remote("malformed HELLO_RESP".into()));
                }
                let theirs = u32::from_le_bytes(p[0..4].try_into().unwrap());
                if theirs != wire::PROTOCOL_VERSION {
                    return Err(VolumeError::VersionMismatch {
                        ours: wire::PROTOCOL_VERSION,
                        theirs,
                    });
                }
                let volume_id = u64::from_le_bytes(p[4..12].try_into().unwrap());
                let block_size = u32::from_le_bytes(p[12..16].try_into().unwrap());
                let block_count = u64::from_le_bytes(p[16..24].try_into().unwrap());
                let geom = VolumeGeometry::new(block_size, block_count)?;
                Ok(Self {
                    conn: Mutex::new(conn),
                    geom,
                    volume_id,
                    stats,
                    counters: IoCounters::default(),
                })
            }
            msg::ERR => Err(VolumeError::Remote(err_text(&resp.payload))),
            t => Err(VolumeError::Remote(format!(
                "unexpected handshake reply type {}",
                t
            ))),
        }
    }

    pub fn volume_id(&self) -> u64 {
        self.volume_id
    }

    pub fn stats(&self) -> Arc<LinkStats> {
        Arc::clone(&self.stats)
    }
}

pub(crate) fn err_text(payload: &[u8]) -> String {
    String::from_utf8_lossy(payload).into_owned()
}

fn map_io(e: std::io::Error) -> VolumeError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        VolumeError::TransportClosed
    } else {
        VolumeError::Io(e)
    }
}

impl BlockStore for RemoteVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.geom
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        check_range(&self.geom, addr, count)?;
        if count > u32::MAX as u64 {
            return Err(VolumeError::OutOfRange {
                start: addr.0,
                count,
                block_count: self.geom.block_count,
            });
        }
        let mut conn = self.conn.lock().unwrap();
        conn.send(msg::IO_READ, &wire::encode_io_read(addr.0, count as u32))?;
        let resp = conn.recv().map_err(map_io)?;
        drop(conn);
        match resp.msg_type {
            msg::IO_READ_RESP => {
                let want = count as usize * self.geom.block_size as usize;
                if resp.payload.len() != want {
                    return Err(VolumeError::Remote(format!(
                        "short read: got {} bytes, wanted {}",
                        resp.payload.len(),
                        want
                    )));
                }
                self.counters.record_read(count);
                Ok(resp.payload)
            }
            msg::ERR => Err(VolumeError::Remote(err_text(&resp.payload))),
            t => Err(VolumeError::Remote(format!("unexpected reply type {}", t))),
        }
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        let count = check_aligned(&self.geom, data)?;
        check_range(&self.geom, addr, count)?;
        let mut conn = self.conn.lock().unwrap();
        conn.send(
            msg::IO_WRITE,
            &wire::encode_io_write(addr.0, count as u32, data),
        )?;
        let resp = conn.recv().map_err(map_io)?;
        drop(conn);
        match resp.msg_type {
            msg::IO_WRITE_ACK => {
                self.counters.record_write(count);
                Ok(())
            }
            msg::ERR => Err(VolumeError::Remote(err_text(&resp.payload))),
            t => Err(VolumeError::Remote(format!("unexpected reply type {}", t))),
        }
    }

    fn io_counts(&self) -> IoCounts {
        self.counters.snapshot()
    }
}
