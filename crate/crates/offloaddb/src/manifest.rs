//! MANIFEST: the commit log of the table hierarchy.
//!
//! Every structural change — flush registering a WAL-backed L0 table,
//! compaction swapping victims for outputs, WAL release advancing — is one
//! framed edit (`[u32 len][payload][u32 crc32]`) appended to the MANIFEST
//! file. An edit is effective iff its frame is fully persisted with a
//! valid crc; a torn tail is ignored on replay, while corruption in front
//! of further valid edits is unrecoverable.

use std::sync::Arc;

use offload_core::extentfs::{ExtentFs, FsError};
use offload_core::Ino;
use thiserror::Error;

use crate::codec::{put_bytes16, put_u32, put_u64, Reader};

/// Edits larger than this are treated as garbage framing.
const MAX_EDIT_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest corrupt: {0}")]
    Corrupt(String),
    #[error("manifest unrecoverable: {0}")]
    Unrecoverable(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// How a level-0 table stores its data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum L0Backing {
    /// Ordinary table file.
    Materialized,
    /// The data still lives in the WAL: `offsets` are the record
    /// positions in ascending key order, all inside `[lo, hi)`.
    Wal {
        lo: u64,
        hi: u64,
        offsets: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SstMeta {
    pub id: u64,
    pub level: u8,
    /// Table file for materialized tables; the WAL file for WAL-backed.
    pub ino: Ino,
    pub file_bytes: u64,
    pub data_bytes: u64,
    pub entry_count: u32,
    pub max_frame: u32,
    pub min_seq: u64,
    pub max_seq: u64,
    pub smallest: Vec<u8>,
    pub largest: Vec<u8>,
    pub backing: L0Backing,
}

impl SstMeta {
    pub fn is_wal_backed(&self) -> bool {
        matches!(self.backing, L0Backing::Wal { .. })
    }

    /// Whether `key` falls inside this table's bounds.
    pub fn covers(&self, key: &[u8]) -> bool {
        self.smallest.as_slice() <= key && key <= self.largest.as_slice()
    }

    /// Whether the key ranges of two tables intersect.
    pub fn overlaps(&self, other: &SstMeta) -> bool {
        self.smallest <= other.largest && other.smallest <= self.largest
    }

    fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, self.id);
        out.push(self.level);
        put_u32(out, self.ino.0);
        let tag = match &self.backing {
            L0Backing::Materialized => 0u8,
            L0Backing::Wal { .. } => 1u8,
        };
        out.push(tag);
        put_u64(out, self.file_bytes);
        put_u64(out, self.data_bytes);
        put_u32(out, self.entry_count);
        put_u32(out, self.max_frame);
        put_u64(out, self.min_seq);
        put_u64(out, self.max_seq);
        put_bytes16(out, &self.smallest);
        put_bytes16(out, &self.largest);
        if let L0Backing::Wal { lo, hi, offsets } = &self.backing {
            put_u64(out, *lo);
            put_u64(out, *hi);
            put_u32(out, offsets.len() as u32);
            for off in offsets {
                put_u64(out, *off);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, String> {
        let id = r.u64()?;
        let level = r.u8()?;
        let ino = Ino(r.u32()?);
        let tag = r.u8()?;
        let file_bytes = r.u64()?;
        let data_bytes = r.u64()?;
        let entry_count = r.u32()?;
        let max_frame = r.u32()?;
        let min_seq = r.u64()?;
        let max_seq = r.u64()?;
        let smallest = r.bytes16()?;
        let largest = r.bytes16()?;
        let backing = match tag {
            0 => L0Backing::Materialized,
            1 => {
                let lo = r.u64()?;
                let hi = r.u64()?;
                let n = r.u32()? as usize;
                let mut offsets = Vec::with_capacity(n);
                for _ in 0..n {
                    offsets.push(r.u64()?);
                }
                L0Backing::Wal { lo, hi, offsets }
            }
            other => return Err(format!("bad backing tag {other}")),
        };
        Ok(SstMeta {
            id,
            level,
            ino,
            file_bytes,
            data_bytes,
            entry_count,
            max_frame,
            min_seq,
            max_seq,
            smallest,
            largest,
            backing,
        })
    }
}

/// One atomic change to the table hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestEdit {
    /// Consecutive from 1; replay rejects gaps.
    pub seq: u64,
    /// WAL bytes below this offset are dead: no live table or MemTable
    /// references them. Monotonically non-decreasing except for an
    /// explicit log reset back to zero.
    pub wal_released_up_to: u64,
    pub next_sst_id: u64,
    pub deleted: Vec<u64>,
    pub added: Vec<SstMeta>,
}

impl ManifestEdit {
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u64(&mut out, self.seq);
        put_u64(&mut out, self.wal_released_up_to);
        put_u64(&mut out, self.next_sst_id);
        put_u32(&mut out, self.deleted.len() as u32);
        for id in &self.deleted {
            put_u64(&mut out, *id);
        }
        put_u32(&mut out, self.added.len() as u32);
        for meta in &self.added {
            meta.encode(&mut out);
        }
        out
    }

    pub fn encode_frame(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(payload.len() + 8);
        put_u32(&mut out, payload.len() as u32);
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(payload);
        let seq = r.u64()?;
        let wal_released_up_to = r.u64()?;
        let next_sst_id = r.u64()?;
        let n_del = r.u32()? as usize;
        let mut deleted = Vec::with_capacity(n_del);
        for _ in 0..n_del {
            deleted.push(r.u64()?);
        }
        let n_add = r.u32()? as usize;
        let mut added = Vec::with_capacity(n_add);
        for _ in 0..n_add {
            added.push(SstMeta::decode(&mut r)?);
        }
        r.done()?;
        Ok(ManifestEdit {
            seq,
            wal_released_up_to,
            next_sst_id,
            deleted,
            added,
        })
    }
}

/// Replayed view of the hierarchy: one table list per level.
#[derive(Debug, Clone)]
pub struct VersionState {
    /// `levels[0]` sorted by id (flush order); deeper levels sorted by
    /// smallest key with pairwise-disjoint ranges.
    pub levels: Vec<Vec<SstMeta>>,
    pub wal_released_up_to: u64,
    pub next_sst_id: u64,
    pub last_edit_seq: u64,
}

impl VersionState {
    pub fn new(levels: usize) -> Self {
        Self {
            levels: vec![Vec::new(); levels],
            wal_released_up_to: 0,
            next_sst_id: 1,
            last_edit_seq: 0,
        }
    }

    pub fn live_tables(&self) -> impl Iterator<Item = &SstMeta> {
        self.levels.iter().flatten()
    }

    pub fn find(&self, id: u64) -> Option<&SstMeta> {
        self.live_tables().find(|m| m.id == id)
    }

    /// Applies one edit, keeping the level lists ordered and checking the
    /// structural invariants.
    pub fn apply(&mut self, edit: &ManifestEdit) -> Result<(), ManifestError> {
        if edit.seq != self.last_edit_seq + 1 {
            return Err(ManifestError::Unrecoverable(format!(
                "edit seq {} after {} (missing edits)",
                edit.seq, self.last_edit_seq
            )));
        }
        for id in &edit.deleted {
            let mut found = false;
            for level in &mut self.levels {
                if let Some(pos) = level.iter().position(|m| m.id == *id) {
                    level.remove(pos);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(ManifestError::Corrupt(format!(
                    "edit {} deletes unknown table {id}",
                    edit.seq
                )));
            }
        }
        for meta in &edit.added {
            let l = meta.level as usize;
            if l >= self.levels.len() {
                return Err(ManifestError::Corrupt(format!(
                    "table {} targets level {l}, beyond {}",
                    meta.id,
                    self.levels.len()
                )));
            }
            self.levels[l].push(meta.clone());
        }
        self.levels[0].sort_by_key(|m| m.id);
        for l in 1..self.levels.len() {
            self.levels[l].sort_by(|a, b| a.smallest.cmp(&b.smallest));
            for pair in self.levels[l].windows(2) {
                if pair[0].overlaps(&pair[1]) {
                    return Err(ManifestError::Corrupt(format!(
                        "tables {} and {} overlap in level {l}",
                        pair[0].id, pair[1].id
                    )));
                }
            }
        }
        self.wal_released_up_to = edit.wal_released_up_to;
        self.next_sst_id = edit.next_sst_id;
        self.last_edit_seq = edit.seq;
        Ok(())
    }
}

/// The MANIFEST file handle: replay on open, append to commit.
pub struct Manifest {
    fs: Arc<ExtentFs>,
    ino: Ino,
    applied_len: u64,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "MANIFEST";

    /// Opens or creates the MANIFEST and replays it into a fresh state
    /// with `levels` levels.
    pub fn open(fs: Arc<ExtentFs>, levels: usize) -> Result<(Self, VersionState), ManifestError> {
        let ino = match fs.lookup(Self::FILE_NAME) {
            Some(i) => i,
            None => fs.create_file(Self::FILE_NAME)?,
        };
        let (size, _) = fs.stat(ino)?;
        let buf = if size > 0 {
            fs.read(ino, 0, size as usize)?
        } else {
            Vec::new()
        };
        let mut state = VersionState::new(levels);
        let mut pos = 0usize;
        while pos + 4 <= buf.len() {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
            if len == 0 || len > MAX_EDIT_PAYLOAD {
                Self::reject_if_committed_prefix(&buf, pos, None)?;
                break;
            }
            let end = pos + 8 + len as usize;
            if end > buf.len() {
                break; // torn tail
            }
            let payload = &buf[pos + 4..pos + 4 + len as usize];
            let stored_crc =
                u32::from_le_bytes(buf[end - 4..end].try_into().unwrap());
            if crc32fast::hash(payload) != stored_crc {
                Self::reject_if_committed_prefix(&buf, pos, Some(end))?;
                break;
            }
            let edit = ManifestEdit::decode_payload(payload)
                .map_err(ManifestError::Unrecoverable)?;
            state.apply(&edit)?;
            pos = end;
        }
        Ok((
            Self {
                fs,
                ino,
                applied_len: pos as u64,
            },
            state,
        ))
    }

    /// A bad frame at `pos` is a torn tail only if nothing valid follows.
    /// When a later frame still parses, the damage sits inside the
    /// committed prefix and recovery must not silently drop it.
    fn reject_if_committed_prefix(
        buf: &[u8],
        pos: usize,
        next: Option<usize>,
    ) -> Result<(), ManifestError> {
        if let Some(next) = next {
            if next + 4 <= buf.len() {
                let len = u32::from_le_bytes(buf[next..next + 4].try_into().unwrap());
                let end = next + 8 + len as usize;
                if len > 0 && len <= MAX_EDIT_PAYLOAD && end <= buf.len() {
                    let payload = &buf[next + 4..next + 4 + len as usize];
                    let crc = u32::from_le_bytes(buf[end - 4..end].try_into().unwrap());
                    if crc32fast::hash(payload) == crc {
                        return Err(ManifestError::Unrecoverable(format!(
                            "crc failure at offset {pos} precedes a valid edit"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn ino(&self) -> Ino {
        self.ino
    }

    /// Byte length of the committed prefix.
    pub fn committed_len(&self) -> u64 {
        self.applied_len
    }

    /// Appends one edit frame; durable when this returns.
    pub fn append(&mut self, edit: &ManifestEdit) -> Result<u64, ManifestError> {
        let frame = edit.encode_frame();
        self.fs.write(self.ino, self.applied_len, &frame)?;
        self.applied_len += frame.len() as u64;
        Ok(frame.len() as u64)
    }
}
