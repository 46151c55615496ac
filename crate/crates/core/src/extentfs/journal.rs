//! Metadata journal: one append record per mutating operation.
//!
//! Records are framed `[u32 len][u8 op][payload][u32 crc32]` with the
//! payload starting with a `u64` sequence number; `len` covers the op byte
//! plus payload. The journal region is linear: when an append does not fit,
//! the caller folds all state into a checkpoint slot and the write position
//! resets to the region start. Replay accepts records while the checksum is
//! valid and sequence numbers continue the checkpointed chain; the first
//! break is the tail — stale records from an earlier generation cannot be
//! accepted because their sequence numbers predate the checkpoint.

use crate::volume::{BlockAddr, BlockRange, BlockStore};

use super::layout::{decode_extent, encode_extent, Extent, EXTENT_RECORD_SIZE};
use super::FsError;

pub const OP_CREATE: u8 = 1;
pub const OP_DELETE: u8 = 2;
pub const OP_ADD_EXTENTS: u8 = 3;
pub const OP_FREE_RANGE: u8 = 4;
pub const OP_RELEASE_TAIL: u8 = 5;
pub const OP_WRITE: u8 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalOp {
    Create {
        ino: u32,
        mtime: u64,
        name: String,
    },
    Delete {
        ino: u32,
    },
    AddExtents {
        ino: u32,
        mtime: u64,
        extents: Vec<Extent>,
    },
    FreeRange {
        ino: u32,
        phys: u64,
        len: u64,
        mtime: u64,
    },
    ReleaseTail {
        ino: u32,
        keep_blocks: u64,
        new_size: u64,
        mtime: u64,
    },
    /// Size/mtime commit, possibly with freshly allocated extents. Written
    /// after the data blocks it covers, so it doubles as the durability
    /// point for size-extending writes.
    Write {
        ino: u32,
        new_size: u64,
        mtime: u64,
        extents: Vec<Extent>,
    },
}

fn put_extents(buf: &mut Vec<u8>, extents: &[Extent]) {
    buf.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for e in extents {
        encode_extent(buf, e);
    }
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn get_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

/// Encodes a full record frame for `op` at sequence `seq`.
pub fn encode_record(seq: u64, op: &JournalOp) -> Vec<u8> {
    let mut payload = Vec::with_capacity(32);
    payload.extend_from_slice(&seq.to_le_bytes());
    let op_byte = match op {
        JournalOp::Create { ino, mtime, name } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            payload.extend_from_slice(&mtime.to_le_bytes());
            payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            OP_CREATE
        }
        JournalOp::Delete { ino } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            OP_DELETE
        }
        JournalOp::AddExtents {
            ino,
            mtime,
            extents,
        } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            payload.extend_from_slice(&mtime.to_le_bytes());
            put_extents(&mut payload, extents);
            OP_ADD_EXTENTS
        }
        JournalOp::FreeRange {
            ino,
            phys,
            len,
            mtime,
        } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            payload.extend_from_slice(&phys.to_le_bytes());
            payload.extend_from_slice(&(*len as u32).to_le_bytes());
            payload.extend_from_slice(&mtime.to_le_bytes());
            OP_FREE_RANGE
        }
        JournalOp::ReleaseTail {
            ino,
            keep_blocks,
            new_size,
            mtime,
        } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            payload.extend_from_slice(&keep_blocks.to_le_bytes());
            payload.extend_from_slice(&new_size.to_le_bytes());
            payload.extend_from_slice(&mtime.to_le_bytes());
            OP_RELEASE_TAIL
        }
        JournalOp::Write {
            ino,
            new_size,
            mtime,
            extents,
        } => {
            payload.extend_from_slice(&ino.to_le_bytes());
            payload.extend_from_slice(&new_size.to_le_bytes());
            payload.extend_from_slice(&mtime.to_le_bytes());
            put_extents(&mut payload, extents);
            OP_WRITE
        }
    };
    let mut frame = Vec::with_capacity(4 + 1 + payload.len() + 4);
    frame.extend_from_slice(&((1 + payload.len()) as u32).to_le_bytes());
    frame.push(op_byte);
    frame.extend_from_slice(&payload);
    let crc = crc32fast::hash(&frame[4..]);
    frame.extend_from_slice(&crc.to_le_bytes());
    frame
}

fn decode_body(op_byte: u8, p: &[u8]) -> Option<(u64, JournalOp)> {
    if p.len() < 8 {
        return None;
    }
    let seq = get_u64(p, 0);
    let b = &p[8..];
    let extents_at = |b: &[u8], off: usize| -> Option<Vec<Extent>> {
        if b.len() < off + 4 {
            return None;
        }
        let count = get_u32(b, off) as usize;
        if b.len() != off + 4 + count * EXTENT_RECORD_SIZE {
            return None;
        }
        Some(
            (0..count)
                .map(|i| decode_extent(&b[off + 4 + i * EXTENT_RECORD_SIZE..]))
                .collect(),
        )
    };
    let op = match op_byte {
        OP_CREATE => {
            if b.len() < 14 {
                return None;
            }
            let name_len = u16::from_le_bytes(b[12..14].try_into().unwrap()) as usize;
            if b.len() != 14 + name_len {
                return None;
            }
            JournalOp::Create {
                ino: get_u32(b, 0),
                mtime: get_u64(b, 4),
                name: String::from_utf8(b[14..].to_vec()).ok()?,
            }
        }
        OP_DELETE => {
            if b.len() != 4 {
                return None;
            }
            JournalOp::Delete { ino: get_u32(b, 0) }
        }
        OP_ADD_EXTENTS => JournalOp::AddExtents {
            ino: get_u32(b, 0),
            mtime: get_u64(b, 4),
            extents: extents_at(b, 12)?,
        },
        OP_FREE_RANGE => {
            if b.len() != 24 {
                return None;
            }
            JournalOp::FreeRange {
                ino: get_u32(b, 0),
                phys: get_u64(b, 4),
                len: get_u32(b, 12) as u64,
                mtime: get_u64(b, 16),
            }
        }
        OP_RELEASE_TAIL => {
            if b.len() != 28 {
                return None;
            }
            JournalOp::ReleaseTail {
                ino: get_u32(b, 0),
                keep_blocks: get_u64(b, 4),
                new_size: get_u64(b, 12),
                mtime: get_u64(b, 20),
            }
        }
        OP_WRITE => JournalOp::Write {
            ino: get_u32(b, 0),
            new_size: get_u64(b, 4),
            mtime: get_u64(b, 12),
            extents: extents_at(b, 20)?,
        },
        _ => return None,
    };
    Some((seq, op))
}

/// Parses the record frame at `buf[pos..]`. Returns the sequence number,
/// the op, and the total frame length, or `None` where the valid tail ends.
fn parse_frame(buf: &[u8], pos: usize) -> Option<(u64, JournalOp, usize)> {
    if pos + 4 > buf.len() {
        return None;
    }
    let len = get_u32(buf, pos) as usize;
    if len < 1 + 8 || pos + 4 + len + 4 > buf.len() {
        return None;
    }
    let body = &buf[pos + 4..pos + 4 + len];
    let stored_crc = get_u32(buf, pos + 4 + len);
    if crc32fast::hash(body) != stored_crc {
        return None;
    }
    let (seq, op) = decode_body(body[0], &body[1..])?;
    Some((seq, op, 4 + len + 4))
}

/// Scans the journal region and returns every record continuing the chain
/// after `checkpoint_seq`, in order.
pub fn replay(
    vol: &dyn BlockStore,
    region: BlockRange,
    checkpoint_seq: u64,
) -> Result<Vec<JournalOp>, FsError> {
    let buf = vol.read_blocks(BlockAddr(region.start), region.len)?;
    let mut ops = Vec::new();
    let mut pos = 0usize;
    let mut expected = checkpoint_seq + 1;
    while let Some((seq, op, consumed)) = parse_frame(&buf, pos) {
        if seq != expected {
            break;
        }
        ops.push(op);
        pos += consumed;
        expected += 1;
    }
    Ok(ops)
}

#[derive(Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended,
    /// The record does not fit; the caller must checkpoint (which absorbs
    /// the pending state change) and reset the writer.
    Full,
}

pub struct JournalWriter {
    region: BlockRange,
    bs: usize,
    pos: u64,
    tail_block: Vec<u8>,
    next_seq: u64,
}

impl JournalWriter {
    pub fn new(region: BlockRange, block_size: u32, next_seq: u64) -> Self {
        Self {
            region,
            bs: block_size as usize,
            pos: 0,
            tail_block: vec![0u8; block_size as usize],
            next_seq,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.region.len * self.bs as u64
    }

    pub fn used_bytes(&self) -> u64 {
        self.pos
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// True if a frame for `op` would not fit in the remaining region.
    pub fn would_fill(&self, op: &JournalOp) -> bool {
        let frame_len = encode_record(self.next_seq, op).len() as u64;
        self.pos + frame_len > self.capacity_bytes()
    }

    /// Appends one record, issuing a single volume write covering every
    /// block the frame touches.
    pub fn append(&mut self, vol: &dyn BlockStore, op: &JournalOp) -> Result<AppendOutcome, FsError> {
        let frame = encode_record(self.next_seq, op);
        if self.pos + frame.len() as u64 > self.capacity_bytes() {
            return Ok(AppendOutcome::Full);
        }
        let bs = self.bs as u64;
        let first_block = self.pos / bs;
        let off_in_block = (self.pos % bs) as usize;
        let end = self.pos + frame.len() as u64;
        let last_block = (end - 1) / bs;
        let nblocks = (last_block - first_block + 1) as usize;

        let mut image = vec![0u8; nblocks * self.bs];
        image[..self.bs].copy_from_slice(&self.tail_block);
        image[off_in_block..off_in_block + frame.len()].copy_from_slice(&frame);
        vol.write_blocks(BlockAddr(self.region.start + first_block), &image)?;

        self.tail_block
            .copy_from_slice(&image[(nblocks - 1) * self.bs..]);
        self.pos = end;
        self.next_seq += 1;
        Ok(AppendOutcome::Appended)
    }

    /// Resets after a checkpoint: the chain restarts at the region head and
    /// sequence numbers keep counting up.
    pub fn reset_after_checkpoint(&mut self) {
        self.pos = 0;
        self.tail_block.fill(0);
    }
}
