//! Sorted string table layout and access.
//!
//! A table is one file: data frames back to back, a trailing index of
//! `u32` frame-start offsets, and a footer with entry count, key bounds,
//! and a crc. Tables are small at desk scale, so the index has no restart
//! points and lookups binary-search it directly.
//!
//! Frame: `[u16 klen][key][u8 op][u64 seq][u32 vlen][value]`.
//! Footer: `[u16 sklen][skey][u16 lklen][lkey][u64 data_bytes]
//! [u32 entry_count][u32 max_frame][u64 min_seq][u64 max_seq][u32 crc]
//! [u32 footer_len][u64 magic]` — crc covers the index and the footer up
//! to the crc field.

use std::cmp::Ordering as CmpOrdering;
use std::sync::Arc;

use offload_core::extentfs::{ExtentFs, FsError};
use offload_core::Ino;
use thiserror::Error;

use crate::codec::{put_bytes16, put_u32, put_u64, Reader};
use crate::memtable::Op;
use crate::wal::{OP_DELETE, OP_PUT};

pub const SST_MAGIC: u64 = 0x4F46_4C53_5354_4231; // "OFLSSTB1"

#[derive(Debug, Error)]
pub enum SstError {
    #[error("sstable corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// Summary a builder reports and the MANIFEST records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SstInfo {
    pub entry_count: u32,
    pub data_bytes: u64,
    pub file_bytes: u64,
    pub max_frame: u32,
    pub min_seq: u64,
    pub max_seq: u64,
    pub smallest: Vec<u8>,
    pub largest: Vec<u8>,
}

/// What a reader needs to address one table.
#[derive(Debug, Clone, Copy)]
pub struct TableRef {
    pub ino: Ino,
    pub data_bytes: u64,
    pub entry_count: u32,
}

pub fn frame_len(klen: usize, vlen: usize) -> u64 {
    2 + klen as u64 + 1 + 8 + 4 + vlen as u64
}

pub fn footer_len(sklen: usize, lklen: usize) -> u64 {
    2 + sklen as u64 + 2 + lklen as u64 + 8 + 4 + 4 + 8 + 8 + 4 + 4 + 8
}

pub fn encode_frame(out: &mut Vec<u8>, key: &[u8], op: u8, seq: u64, value: &[u8]) {
    put_bytes16(out, key);
    out.push(op);
    put_u64(out, seq);
    put_u32(out, value.len() as u32);
    out.extend_from_slice(value);
}

/// Parses the frame at `buf[pos..]`; returns `(key, op, seq, value, next)`.
pub fn parse_frame(buf: &[u8], pos: usize) -> Result<(Vec<u8>, u8, u64, Vec<u8>, usize), SstError> {
    let mut r = Reader::new(&buf[pos..]);
    let key = r.bytes16().map_err(SstError::Corrupt)?;
    let op = r.u8().map_err(SstError::Corrupt)?;
    if op != OP_PUT && op != OP_DELETE {
        return Err(SstError::Corrupt(format!("bad frame op {op}")));
    }
    let seq = r.u64().map_err(SstError::Corrupt)?;
    let vlen = r.u32().map_err(SstError::Corrupt)? as usize;
    let value = r.take(vlen).map_err(SstError::Corrupt)?.to_vec();
    let consumed = 2 + key.len() + 1 + 8 + 4 + value.len();
    Ok((key, op, seq, value, pos + consumed))
}

/// Accumulates sorted frames up to a byte capacity, then renders the
/// file image. Capacity checks account for the index entry and the
/// final footer, so `finish` never exceeds `cap_bytes`.
pub struct SstBuilder {
    cap_bytes: u64,
    data: Vec<u8>,
    index: Vec<u32>,
    smallest: Vec<u8>,
    largest: Vec<u8>,
    min_seq: u64,
    max_seq: u64,
    max_frame: u32,
}

impl SstBuilder {
    pub fn new(cap_bytes: u64) -> Self {
        Self {
            cap_bytes,
            data: Vec::new(),
            index: Vec::new(),
            smallest: Vec::new(),
            largest: Vec::new(),
            min_seq: u64::MAX,
            max_seq: 0,
            max_frame: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn entry_count(&self) -> u32 {
        self.index.len() as u32
    }

    /// Whether one more `(key, value)` fits. The first entry always fits;
    /// callers size the capacity to hold at least one maximal frame.
    pub fn fits(&self, klen: usize, vlen: usize) -> bool {
        if self.is_empty() {
            return true;
        }
        let projected = self.data.len() as u64
            + frame_len(klen, vlen)
            + 4 * (self.index.len() as u64 + 1)
            + footer_len(self.smallest.len(), klen);
        projected <= self.cap_bytes
    }

    /// Appends a frame. Keys must arrive in strictly ascending order.
    pub fn add(&mut self, key: &[u8], op: u8, seq: u64, value: &[u8]) {
        debug_assert!(self.is_empty() || key > self.largest.as_slice());
        if self.is_empty() {
            self.smallest = key.to_vec();
        }
        self.largest = key.to_vec();
        self.index.push(self.data.len() as u32);
        encode_frame(&mut self.data, key, op, seq, value);
        self.min_seq = self.min_seq.min(seq);
        self.max_seq = self.max_seq.max(seq);
        self.max_frame = self.max_frame.max(frame_len(key.len(), value.len()) as u32);
    }

    /// Renders the complete file image plus its summary.
    pub fn finish(self) -> (Vec<u8>, SstInfo) {
        assert!(!self.is_empty(), "refusing to build an empty table");
        let data_bytes = self.data.len() as u64;
        let mut tail = Vec::with_capacity(self.index.len() * 4 + 64);
        for off in &self.index {
            put_u32(&mut tail, *off);
        }
        let footer_start = tail.len();
        put_bytes16(&mut tail, &self.smallest);
        put_bytes16(&mut tail, &self.largest);
        put_u64(&mut tail, data_bytes);
        put_u32(&mut tail, self.index.len() as u32);
        put_u32(&mut tail, self.max_frame);
        put_u64(&mut tail, self.min_seq);
        put_u64(&mut tail, self.max_seq);
        let crc = crc32fast::hash(&tail);
        put_u32(&mut tail, crc);
        let flen = (tail.len() - footer_start) as u32 + 4 + 8;
        put_u32(&mut tail, flen);
        put_u64(&mut tail, SST_MAGIC);
        debug_assert_eq!(flen as u64, footer_len(self.smallest.len(), self.largest.len()));

        let mut file = self.data;
        file.extend_from_slice(&tail);
        let info = SstInfo {
            entry_count: self.index.len() as u32,
            data_bytes,
            file_bytes: file.len() as u64,
            max_frame: self.max_frame,
            min_seq: self.min_seq,
            max_seq: self.max_seq,
            smallest: self.smallest,
            largest: self.largest,
        };
        (file, info)
    }
}

/// Parses and crc-checks the footer of a table file stored in `fs`.
pub fn read_info(fs: &ExtentFs, ino: Ino, file_bytes: u64) -> Result<SstInfo, SstError> {
    if file_bytes < 12 {
        return Err(SstError::Corrupt("file too small for a footer".into()));
    }
    let tail = fs.read(ino, file_bytes - 12, 12)?;
    let mut r = Reader::new(&tail);
    let flen = r.u32().map_err(SstError::Corrupt)? as u64;
    let magic = r.u64().map_err(SstError::Corrupt)?;
    if magic != SST_MAGIC {
        return Err(SstError::Corrupt("bad magic".into()));
    }
    if flen > file_bytes {
        return Err(SstError::Corrupt("footer length exceeds file".into()));
    }
    let footer = fs.read(ino, file_bytes - flen, (flen - 12) as usize)?;
    let crc_stored = u32::from_le_bytes(footer[footer.len() - 4..].try_into().unwrap());
    let mut r = Reader::new(&footer);
    let smallest = r.bytes16().map_err(SstError::Corrupt)?;
    let largest = r.bytes16().map_err(SstError::Corrupt)?;
    let data_bytes = r.u64().map_err(SstError::Corrupt)?;
    let entry_count = r.u32().map_err(SstError::Corrupt)?;
    let max_frame = r.u32().map_err(SstError::Corrupt)?;
    let min_seq = r.u64().map_err(SstError::Corrupt)?;
    let max_seq = r.u64().map_err(SstError::Corrupt)?;
    // The crc covers index + footer prefix.
    let covered = fs.read(
        ino,
        data_bytes,
        (file_bytes - data_bytes - 12 - 4) as usize,
    )?;
    if crc32fast::hash(&covered) != crc_stored {
        return Err(SstError::Corrupt("footer crc mismatch".into()));
    }
    Ok(SstInfo {
        entry_count,
        data_bytes,
        file_bytes,
        max_frame,
        min_seq,
        max_seq,
        smallest,
        largest,
    })
}

fn read_key_at(fs: &ExtentFs, ino: Ino, off: u64) -> Result<Vec<u8>, SstError> {
    let hdr = fs.read(ino, off, 2)?;
    let klen = u16::from_le_bytes(hdr.try_into().unwrap()) as usize;
    Ok(fs.read(ino, off + 2, klen)?)
}

/// Point lookup via index binary search. Returns the stored operation
/// (tombstones included) or `None` when the key is absent.
pub fn get(fs: &ExtentFs, t: TableRef, key: &[u8]) -> Result<Option<(u64, Op)>, SstError> {
    if t.entry_count == 0 {
        return Ok(None);
    }
    let index = fs.read(t.ino, t.data_bytes, t.entry_count as usize * 4)?;
    let slot = |i: usize| -> u64 {
        u32::from_le_bytes(index[i * 4..i * 4 + 4].try_into().unwrap()) as u64
    };
    let (mut lo, mut hi) = (0usize, t.entry_count as usize);
    while lo < hi {
        let mid = (lo + hi) / 2;
        let off = slot(mid);
        let probe = read_key_at(fs, t.ino, off)?;
        match probe.as_slice().cmp(key) {
            CmpOrdering::Less => lo = mid + 1,
            CmpOrdering::Greater => hi = mid,
            CmpOrdering::Equal => {
                let rest = fs.read(t.ino, off + 2 + probe.len() as u64, 13)?;
                let mut r = Reader::new(&rest);
                let op = r.u8().map_err(SstError::Corrupt)?;
                let seq = r.u64().map_err(SstError::Corrupt)?;
                let vlen = r.u32().map_err(SstError::Corrupt)? as usize;
                let op = match op {
                    OP_PUT => {
                        let value = fs.read(t.ino, off + 2 + probe.len() as u64 + 13, vlen)?;
                        Op::Put(value)
                    }
                    OP_DELETE => Op::Delete,
                    other => return Err(SstError::Corrupt(format!("bad op {other}"))),
                };
                return Ok(Some((seq, op)));
            }
        }
    }
    Ok(None)
}

/// All frames with `key >= start`, in key order. Reads the data region
/// once; intended for scans and oracle comparisons.
pub fn iter_from(
    fs: &ExtentFs,
    t: TableRef,
    start: &[u8],
) -> Result<Vec<(Vec<u8>, u64, Op)>, SstError> {
    if t.entry_count == 0 {
        return Ok(Vec::new());
    }
    let data = fs.read(t.ino, 0, t.data_bytes as usize)?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < data.len() {
        let (key, op, seq, value, next) = parse_frame(&data, pos)?;
        if key.as_slice() >= start {
            let op = if op == OP_PUT {
                Op::Put(value)
            } else {
                Op::Delete
            };
            out.push((key, seq, op));
        }
        pos = next;
    }
    Ok(out)
}

/// Full contents of the table.
pub fn load_all(fs: &ExtentFs, t: TableRef) -> Result<Vec<(Vec<u8>, u64, Op)>, SstError> {
    iter_from(fs, t, &[])
}

/// Convenience for tests and the flush fallback: write a finished image
/// into a fresh file.
pub fn write_image(fs: &Arc<ExtentFs>, name: &str, image: &[u8]) -> Result<Ino, SstError> {
    let ino = fs.create_file(name)?;
    fs.write(ino, 0, image)?;
    Ok(ino)
}

#[cfg(test)]
mod tests {
    use super::*;
    use offload_core::volume::MemVolume;
    use offload_core::VolumeGeometry;

    fn test_fs() -> Arc<ExtentFs> {
        let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 4096).unwrap()));
        Arc::new(ExtentFs::mkfs(vol).unwrap())
    }

    #[test]
    fn build_write_read_roundtrip() {
        let fs = test_fs();
        let mut b = SstBuilder::new(1 << 20);
        b.add(b"apple", OP_PUT, 3, b"red");
        b.add(b"banana", OP_DELETE, 5, b"");
        b.add(b"cherry", OP_PUT, 4, b"dark");
        let (image, info) = b.finish();
        assert_eq!(info.entry_count, 3);
        assert_eq!(info.smallest, b"apple");
        assert_eq!(info.largest, b"cherry");
        assert_eq!(info.min_seq, 3);
        assert_eq!(info.max_seq, 5);
        assert_eq!(info.file_bytes, image.len() as u64);

        let ino = write_image(&fs, "sst-1", &image).unwrap();
        let parsed = read_info(&fs, ino, info.file_bytes).unwrap();
        assert_eq!(parsed, info);

        let t = TableRef {
            ino,
            data_bytes: info.data_bytes,
            entry_count: info.entry_count,
        };
        assert_eq!(
            get(&fs, t, b"apple").unwrap(),
            Some((3, Op::Put(b"red".to_vec())))
        );
        assert_eq!(get(&fs, t, b"banana").unwrap(), Some((5, Op::Delete)));
        assert_eq!(get(&fs, t, b"durian").unwrap(), None);
        assert_eq!(get(&fs, t, b"aaaa").unwrap(), None);

        let all = load_all(&fs, t).unwrap();
        assert_eq!(all.len(), 3);
        let from = iter_from(&fs, t, b"b").unwrap();
        assert_eq!(from.len(), 2);
        assert_eq!(from[0].0, b"banana");
    }

    #[test]
    fn capacity_split_rule() {
        // Tiny capacity: after one entry the next no longer fits.
        let cap = frame_len(3, 10) + 4 + footer_len(3, 3) + frame_len(3, 10) / 2;
        let mut b = SstBuilder::new(cap);
        assert!(b.fits(3, 10));
        b.add(b"aaa", OP_PUT, 1, &[0u8; 10]);
        assert!(!b.fits(3, 10), "second frame must not fit");
        // But the first entry into an empty builder always fits.
        let b2 = SstBuilder::new(1);
        assert!(b2.fits(100, 100));
    }

    #[test]
    fn binary_search_over_many_keys() {
        let fs = test_fs();
        let mut b = SstBuilder::new(1 << 20);
        for i in 0..100u32 {
            let key = format!("key-{i:04}");
            let val = format!("val-{i}");
            b.add(key.as_bytes(), OP_PUT, i as u64 + 1, val.as_bytes());
        }
        let (image, info) = b.finish();
        let ino = write_image(&fs, "sst-2", &image).unwrap();
        let t = TableRef {
            ino,
            data_bytes: info.data_bytes,
            entry_count: info.entry_count,
        };
        for i in (0..100u32).step_by(7) {
            let key = format!("key-{i:04}");
            let (seq, op) = get(&fs, t, key.as_bytes()).unwrap().unwrap();
            assert_eq!(seq, i as u64 + 1);
            assert_eq!(op, Op::Put(format!("val-{i}").into_bytes()));
        }
        assert_eq!(get(&fs, t, b"key-0100").unwrap(), None);
        assert_eq!(get(&fs, t, b"zzz").unwrap(), None);
    }

    #[test]
    fn corrupt_footer_detected() {
        let fs = test_fs();
        let mut b = SstBuilder::new(1 << 20);
        b.add(b"k", OP_PUT, 1, b"v");
        let (image, info) = b.finish();
        let ino = write_image(&fs, "sst-3", &image).unwrap();
        // Flip a byte in the index region.
        let mut byte = fs.read(ino, info.data_bytes, 1).unwrap();
        byte[0] ^= 0x80;
        fs.write(ino, info.data_bytes, &byte).unwrap();
        assert!(read_info(&fs, ino, info.file_bytes).is_err());
    }
}
