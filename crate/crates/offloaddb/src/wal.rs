//! Write-ahead log with record offset tracking.
//!
//! Records are framed as `[u32 len][u64 seq][u8 op][u16 klen][key]
//! [u32 vlen][value][u32 crc32]` and appended to a single growing file.
//! The byte offset of each record is returned at append time and kept in
//! the MemTable, so a flush can hand out an offset array instead of
//! re-sending the data.
//!
//! Appends buffer in memory; `sync` pads the buffer to a block boundary
//! with `0xFF` filler and writes it in one aligned pass. That keeps every
//! synced byte written exactly once — no block is ever read back and
//! rewritten for a partial tail. Replay skips filler by jumping to the
//! next block boundary whenever a length field is implausibly large.

use std::sync::Arc;

use offload_core::extentfs::{ExtentFs, FsError};
use offload_core::Ino;
use thiserror::Error;

use crate::codec::{put_bytes16, put_bytes32, put_u32, put_u64, Reader};

pub const OP_PUT: u8 = 1;
pub const OP_DELETE: u8 = 2;

/// Smallest legal payload: seq + op + empty key + empty value.
pub const MIN_WAL_PAYLOAD: u32 = 15;
/// Payloads above this are treated as padding/garbage, not records.
pub const MAX_WAL_PAYLOAD: u32 = 8 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WalError {
    #[error("wal corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalRecord {
    pub seq: u64,
    pub op: u8,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl WalRecord {
    pub fn put(seq: u64, key: &[u8], value: &[u8]) -> Self {
        Self {
            seq,
            op: OP_PUT,
            key: key.to_vec(),
            value: value.to_vec(),
        }
    }

    pub fn delete(seq: u64, key: &[u8]) -> Self {
        Self {
            seq,
            op: OP_DELETE,
            key: key.to_vec(),
            value: Vec::new(),
        }
    }

    /// Total on-disk frame size for the given key/value lengths.
    pub fn frame_len(klen: usize, vlen: usize) -> u64 {
        4 + 8 + 1 + 2 + klen as u64 + 4 + vlen as u64 + 4
    }

    pub fn encoded_len(&self) -> u64 {
        Self::frame_len(self.key.len(), self.value.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(15 + self.key.len() + self.value.len());
        put_u64(&mut payload, self.seq);
        payload.push(self.op);
        put_bytes16(&mut payload, &self.key);
        put_bytes32(&mut payload, &self.value);
        let mut out = Vec::with_capacity(payload.len() + 8);
        put_u32(&mut out, payload.len() as u32);
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc);
        out
    }

    /// Decodes one frame starting at `buf[0]`. Returns the record and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(WalRecord, u64), WalError> {
        let mut r = Reader::new(buf);
        let len = r.u32().map_err(WalError::Corrupt)?;
        if !(MIN_WAL_PAYLOAD..=MAX_WAL_PAYLOAD).contains(&len) {
            return Err(WalError::Corrupt(format!("bad record length {len}")));
        }
        let payload = r.take(len as usize).map_err(WalError::Corrupt)?;
        let stored_crc = r.u32().map_err(WalError::Corrupt)?;
        if crc32fast::hash(payload) != stored_crc {
            return Err(WalError::Corrupt("record crc mismatch".into()));
        }
        let mut p = Reader::new(payload);
        let seq = p.u64().map_err(WalError::Corrupt)?;
        let op = p.u8().map_err(WalError::Corrupt)?;
        if op != OP_PUT && op != OP_DELETE {
            return Err(WalError::Corrupt(format!("bad op {op}")));
        }
        let key = p.bytes16().map_err(WalError::Corrupt)?;
        let value = p.bytes32().map_err(WalError::Corrupt)?;
        p.done().map_err(WalError::Corrupt)?;
        Ok((WalRecord { seq, op, key, value }, 4 + len as u64 + 4))
    }
}

/// The append side of the log. `synced_len` bytes are durable in the
/// file system; `pending` holds buffered frames starting at that offset.
pub struct WalFile {
    fs: Arc<ExtentFs>,
    ino: Ino,
    block_size: u64,
    synced_len: u64,
    pending: Vec<u8>,
}

impl WalFile {
    /// Opens (or creates) the log file named `name`.
    pub fn open(fs: Arc<ExtentFs>, name: &str) -> Result<Self, WalError> {
        let ino = match fs.lookup(name) {
            Some(i) => i,
            None => fs.create_file(name)?,
        };
        let (size, _) = fs.stat(ino)?;
        let block_size = fs.geometry().block_size as u64;
        if size % block_size != 0 {
            return Err(WalError::Corrupt(format!(
                "log size {size} is not block aligned"
            )));
        }
        Ok(Self {
            fs,
            ino,
            block_size,
            synced_len: size,
            pending: Vec::new(),
        })
    }

    pub fn ino(&self) -> Ino {
        self.ino
    }

    /// Offset the next appended record will get.
    pub fn next_offset(&self) -> u64 {
        self.synced_len + self.pending.len() as u64
    }

    pub fn synced_len(&self) -> u64 {
        self.synced_len
    }

    pub fn pending_bytes(&self) -> u64 {
        self.pending.len() as u64
    }

    /// Buffers one record and returns its file offset.
    pub fn append(&mut self, rec: &WalRecord) -> u64 {
        let off = self.next_offset();
        self.pending.extend_from_slice(&rec.encode());
        off
    }

    /// Persists buffered records, padding to a block boundary so every
    /// byte is written exactly once. Returns the bytes written.
    pub fn sync(&mut self) -> Result<u64, WalError> {
        if self.pending.is_empty() {
            return Ok(0);
        }
        let bs = self.block_size as usize;
        let pad = (bs - self.pending.len() % bs) % bs;
        self.pending.resize(self.pending.len() + pad, 0xFF);
        let len = self.pending.len() as u64;
        self.fs.write(self.ino, self.synced_len, &self.pending)?;
        self.synced_len += len;
        self.pending.clear();
        Ok(len)
    }
}

/// Replays valid records from byte offset `from` to the synced end of the
/// log. Padding is skipped; a torn or zeroed tail ends the scan. Returns
/// `(offset, record)` pairs in file order plus the offset one past the
/// last valid frame.
pub fn replay(
    fs: &ExtentFs,
    ino: Ino,
    from: u64,
) -> Result<(Vec<(u64, WalRecord)>, u64), WalError> {
    let (size, _) = fs.stat(ino)?;
    let bs = fs.geometry().block_size as u64;
    if from >= size {
        return Ok((Vec::new(), from.min(size)));
    }
    let buf = fs.read(ino, from, (size - from) as usize)?;
    let mut out = Vec::new();
    let mut pos = 0u64;
    let total = buf.len() as u64;
    while pos + 4 <= total {
        let len = u32::from_le_bytes(buf[pos as usize..pos as usize + 4].try_into().unwrap());
        if len > MAX_WAL_PAYLOAD {
            // Padding filler: resume at the next block boundary.
            let file_off = from + pos;
            let next = (file_off / bs + 1) * bs;
            pos = next - from;
            continue;
        }
        if len < MIN_WAL_PAYLOAD {
            break; // zeroed or torn tail
        }
        let end = pos + 4 + len as u64 + 4;
        if end > total {
            break; // torn tail
        }
        match WalRecord::decode(&buf[pos as usize..end as usize]) {
            Ok((rec, consumed)) => {
                out.push((from + pos, rec));
                pos += consumed;
            }
            Err(_) => break, // crc failure at the tail
        }
    }
    Ok((out, from + pos))
}
