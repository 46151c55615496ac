//! User-level extent file system over a block volume.
//!
//! The initiator is the only mutator of metadata: inode table, flat
//! directory, and free-space bitmap live in memory, every mutating call
//! appends one (occasionally a few) journal records, and the journal folds
//! into an A/B checkpoint slot when full. Offloaded tasks never touch
//! metadata; they get lease-scoped access to physical blocks and the
//! initiator applies the resulting size/space changes at lease completion.

pub mod alloc;
pub mod journal;
pub mod layout;
pub mod lease;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::volume::{BlockAddr, BlockRange, BlockStore, VolumeError, VolumeGeometry};

use alloc::Bitmap;
use journal::{AppendOutcome, JournalOp, JournalWriter};
use layout::{CkptHeader, InodeRecord, Layout};
use lease::LeaseTable;

pub use layout::{Extent, MkfsOptions};
pub use lease::{Lease, LeaseExtent, LeaseId, LeaseState};

/// Inode number; 1-based, slot 0 of the table is ino 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ino(pub u32);

impl fmt::Display for Ino {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ino {}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum FsError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("not an extentfs volume: {0}")]
    NotFormatted(String),
    #[error("metadata corrupt: {0}")]
    Corrupt(String),
    #[error("volume too small: {blocks} blocks, need at least {min}")]
    VolumeTooSmall { blocks: u64, min: u64 },
    #[error("name already exists: {0}")]
    DuplicateName(String),
    #[error("name too long: {0} bytes (max 255)")]
    NameTooLong(usize),
    #[error("inode or directory table full")]
    TableFull,
    #[error("no such file: {0}")]
    NoSuchFile(Ino),
    #[error("out of space: requested {requested} blocks, {free} free")]
    NoSpace { requested: u64, free: u64 },
    #[error("out of bounds: offset {offset} + len {len} exceeds size {size}")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("blocks held by active lease {lease:?} (block {block})")]
    LeaseConflict { lease: LeaseId, block: u64 },
    #[error("unknown lease {0}")]
    UnknownLease(u64),
    #[error("lease {0} is not active")]
    LeaseNotActive(u64),
    #[error("lease {lease} does not authorize [{start}, +{len})")]
    Unauthorized { lease: u64, start: u64, len: u64 },
    #[error("{ino} does not own blocks [{start}, +{len})")]
    UnownedExtent { ino: Ino, start: u64, len: u64 },
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// Receives eager notifications when blocks return to the free pool, so
/// caches keyed by physical address can drop dead entries.
pub trait BlockEventListener: Send + Sync {
    fn blocks_freed(&self, ranges: &[BlockRange]);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FileIoStats {
    pub bytes_read: u64,
    pub bytes_written: u64,
}

const MAX_EXTENTS_PER_RECORD: usize = 256;

#[derive(Debug, Clone)]
struct InodeState {
    name: String,
    size: u64,
    mtime: u64,
    /// Sorted by logical offset; logical offsets are block-aligned.
    extents: Vec<Extent>,
    io: FileIoStats,
}

impl InodeState {
    fn reserved_blocks(&self) -> u64 {
        self.extents.iter().map(|e| e.len).sum()
    }

    fn reservation_end(&self, bs: u64) -> u64 {
        self.extents
            .last()
            .map(|e| e.logical + e.len * bs)
            .unwrap_or(0)
    }
}

/// Inserts an extent keeping logical order, merging with neighbours that
/// are contiguous in both logical and physical space.
fn push_extent(extents: &mut Vec<Extent>, ext: Extent, bs: u64) {
    debug_assert_eq!(ext.logical % bs, 0);
    debug_assert!(ext.len >= 1);
    let idx = extents.partition_point(|e| e.logical < ext.logical);
    let merged_left = idx > 0 && {
        let prev = &mut extents[idx - 1];
        if prev.logical + prev.len * bs == ext.logical && prev.phys + prev.len == ext.phys {
            prev.len += ext.len;
            true
        } else {
            false
        }
    };
    if merged_left {
        // The grown extent may now abut its right neighbour.
        if idx < extents.len() {
            let (l, r) = (extents[idx - 1], extents[idx]);
            if l.logical + l.len * bs == r.logical && l.phys + l.len == r.phys {
                extents[idx - 1].len += r.len;
                extents.remove(idx);
            }
        }
        return;
    }
    let merged_right = idx < extents.len() && {
        let next = &mut extents[idx];
        if ext.logical + ext.len * bs == next.logical && ext.phys + ext.len == next.phys {
            next.logical = ext.logical;
            next.phys = ext.phys;
            next.len += ext.len;
            true
        } else {
            false
        }
    };
    if !merged_right {
        extents.insert(idx, ext);
    }
}

/// Removes physical range `[phys, phys+len)` from whichever extent contains
/// it, splitting the extent when the range is interior.
fn remove_phys_range(extents: &mut Vec<Extent>, phys: u64, len: u64, bs: u64) {
    let idx = extents
        .iter()
        .position(|e| e.phys <= phys && phys + len <= e.phys + e.len)
        .expect("freed range not owned by inode");
    let e = extents[idx];
    let left_len = phys - e.phys;
    let right_len = (e.phys + e.len) - (phys + len);
    let mut replacement = Vec::with_capacity(2);
    if left_len > 0 {
        replacement.push(Extent {
            logical: e.logical,
            phys: e.phys,
            len: left_len,
        });
    }
    if right_len > 0 {
        replacement.push(Extent {
            logical: e.logical + (left_len + len) * bs,
            phys: phys + len,
            len: right_len,
        });
    }
    extents.splice(idx..=idx, replacement);
}

/// Splits the extent list at `keep_blocks` (counted in logical order):
/// returns the trimmed list and the freed physical ranges.
fn compute_tail_free(extents: &[Extent], keep_blocks: u64) -> (Vec<Extent>, Vec<BlockRange>) {
    let mut kept = Vec::new();
    let mut freed = Vec::new();
    let mut acc = 0u64;
    for e in extents {
        if acc >= keep_blocks {
            freed.push(e.phys_range());
        } else if acc + e.len <= keep_blocks {
            kept.push(*e);
        } else {
            let keep_here = keep_blocks - acc;
            kept.push(Extent {
                logical: e.logical,
                phys: e.phys,
                len: keep_here,
            });
            freed.push(BlockRange::new(e.phys + keep_here, e.len - keep_here));
        }
        acc += e.len;
    }
    (kept, freed)
}

struct FsInner {
    layout: Layout,
    inodes: Vec<Option<InodeState>>,
    dir: HashMap<String, u32>,
    dir_bytes: usize,
    bitmap: Bitmap,
    journal: JournalWriter,
    epoch: u64,
    checkpoint_seq: u64,
    active_slot: u8,
    leases: LeaseTable,
    checkpoints_written: u64,
    replayed_records: u64,
}

pub struct ExtentFs {
    vol: Arc<dyn BlockStore>,
    inner: Mutex<FsInner>,
    listener: Mutex<Vec<Arc<dyn BlockEventListener>>>,
}

fn dir_entry_bytes(name: &str) -> usize {
    4 + 2 + name.len()
}

impl FsInner {
    fn bs(&self) -> u64 {
        self.layout.block_size()
    }

    fn inode(&self, ino: Ino) -> Result<&InodeState, FsError> {
        self.inodes
            .get(ino.0.wrapping_sub(1) as usize)
            .and_then(|s| s.as_ref())
            .ok_or(FsError::NoSuchFile(ino))
    }

    fn inode_mut(&mut self, ino: Ino) -> Result<&mut InodeState, FsError> {
        self.inodes
            .get_mut(ino.0.wrapping_sub(1) as usize)
            .and_then(|s| s.as_mut())
            .ok_or(FsError::NoSuchFile(ino))
    }

    /// Appends a journal record whose state effects have already been
    /// applied in memory. If the journal is full, folds everything into a
    /// checkpoint instead — the record's effects are then part of the
    /// snapshot and the record itself is never written.
    fn commit(&mut self, vol: &dyn BlockStore, op: JournalOp) -> Result<(), FsError> {
        match self.journal.append(vol, &op)? {
            AppendOutcome::Appended => Ok(()),
            AppendOutcome::Full => self.checkpoint(vol),
        }
    }

    /// Serializes all metadata into the inactive slot and flips the
    /// checkpoint header to it.
    fn checkpoint(&mut self, vol: &dyn BlockStore) -> Result<(), FsError> {
        let target = 1 - self.active_slot;
        let slot = self.layout.slots[target as usize];
        let bs = self.bs();

        let mut overflow = Vec::new();
        let mut table = Vec::with_capacity(self.layout.max_inodes as usize * 128);
        for idx in 0..self.layout.max_inodes {
            let rec = match &self.inodes[idx as usize] {
                Some(st) => InodeRecord {
                    ino: idx + 1,
                    live: true,
                    size: st.size,
                    mtime: st.mtime,
                    extents: st.extents.clone(),
                },
                None => InodeRecord {
                    ino: idx + 1,
                    live: false,
                    size: 0,
                    mtime: 0,
                    extents: Vec::new(),
                },
            };
            table.extend_from_slice(&layout::encode_inode_record(&rec, &mut overflow)?);
        }
        let bitmap_bytes = self.bitmap.to_bytes();
        let mut entries: Vec<(String, u32)> = self
            .dir
            .iter()
            .map(|(n, i)| (n.clone(), *i))
            .collect();
        entries.sort();
        let dir_bytes = layout::encode_dir(&entries);

        if overflow.len() > self.layout.overflow_capacity_bytes() {
            return Err(FsError::Corrupt("extent overflow heap exceeded".into()));
        }

        let write_region = |blob: &[u8], region: BlockRange| -> Result<(), FsError> {
            if blob.is_empty() {
                return Ok(());
            }
            let nblocks = (blob.len() as u64).div_ceil(bs);
            debug_assert!(nblocks <= region.len);
            let mut img = blob.to_vec();
            img.resize((nblocks * bs) as usize, 0);
            vol.write_blocks(BlockAddr(region.start), &img)?;
            Ok(())
        };
        write_region(&table, slot.inode_table)?;
        write_region(&bitmap_bytes, slot.bitmap)?;
        write_region(&dir_bytes, slot.dir)?;
        write_region(&overflow, slot.overflow)?;

        let header = CkptHeader {
            epoch: self.epoch + 1,
            checkpoint_seq: self.journal.next_seq() - 1,
            active_slot: target,
            inode_table_crc: crc32fast::hash(&table),
            bitmap_crc: crc32fast::hash(&bitmap_bytes),
            dir_crc: crc32fast::hash(&dir_bytes),
            overflow_crc: crc32fast::hash(&overflow),
            dir_len: dir_bytes.len() as u32,
            overflow_len: overflow.len() as u32,
        };
        let hdr_block = layout::encode_ckpt_header(&header, self.layout.geom.block_size);
        vol.write_blocks(BlockAddr(self.layout.ckpt_header_block), &hdr_block)?;

        self.epoch = header.epoch;
        self.checkpoint_seq = header.checkpoint_seq;
        self.active_slot = target;
        self.journal.reset_after_checkpoint();
        self.checkpoints_written += 1;
        Ok(())
    }

    /// Physical ranges backing the logical byte range `[from, to)`.
    fn phys_ranges(&self, ino: Ino, from: u64, to: u64) -> Result<Vec<BlockRange>, FsError> {
        let bs = self.bs();
        let st = self.inode(ino)?;
        let mut out = Vec::new();
        if from >= to {
            return Ok(out);
        }
        let first = from / bs;
        let last = (to - 1) / bs;
        for e in &st.extents {
            let e_first = e.logical / bs;
            let e_last = e_first + e.len - 1;
            if e_last < first || e_first > last {
                continue;
            }
            let lo = first.max(e_first);
            let hi = last.min(e_last);
            out.push(BlockRange::new(e.phys + (lo - e_first), hi - lo + 1));
        }
        Ok(out)
    }

    fn check_initiator_io(&self, ino: Ino, from: u64, to: u64) -> Result<(), FsError> {
        for r in self.phys_ranges(ino, from, to)? {
            if let Some(lease) = self.leases.write_set_overlaps(&r) {
                return Err(FsError::LeaseConflict {
                    lease,
                    block: r.start,
                });
            }
        }
        Ok(())
    }

    /// Maps one logical block to its physical block, if allocated.
    fn lookup_block(extents: &[Extent], lb: u64, bs: u64) -> Option<u64> {
        let idx = extents.partition_point(|e| e.logical / bs <= lb);
        if idx == 0 {
            return None;
        }
        let e = &extents[idx - 1];
        let e_first = e.logical / bs;
        (lb < e_first + e.len).then(|| e.phys + (lb - e_first))
    }

    /// Writes zeroes over the allocated portions of byte range `[from, to)`
    /// (used when extending size exposes preallocated blocks).
    fn zero_allocated(&self, vol: &dyn BlockStore, ino: Ino, from: u64, to: u64) -> Result<(), FsError> {
        if from >= to {
            return Ok(());
        }
        let bs = self.bs();
        let st = self.inode(ino)?;
        for lb in from / bs..=(to - 1) / bs {
            let Some(phys) = Self::lookup_block(&st.extents, lb, bs) else {
                continue;
            };
            let b0 = lb * bs;
            let zfrom = from.max(b0) - b0;
            let zto = to.min(b0 + bs) - b0;
            if zfrom == 0 && zto == bs as u64 {
                vol.write_blocks(BlockAddr(phys), &vec![0u8; bs as usize])?;
            } else {
                let mut img = vol.read_blocks(BlockAddr(phys), 1)?;
                img[zfrom as usize..zto as usize].fill(0);
                vol.write_blocks(BlockAddr(phys), &img)?;
            }
        }
        Ok(())
    }

    /// Applies one replayed journal record.
    fn apply_replay(&mut self, op: JournalOp) -> Result<(), FsError> {
        let bs = self.bs();
        match op {
            JournalOp::Create { ino, mtime, name } => {
                self.dir.insert(name.clone(), ino);
                self.dir_bytes += dir_entry_bytes(&name);
                self.inodes[(ino - 1) as usize] = Some(InodeState {
                    name,
                    size: 0,
                    mtime,
                    extents: Vec::new(),
                    io: FileIoStats::default(),
                });
            }
            JournalOp::Delete { ino } => {
                let st = self.inodes[(ino - 1) as usize]
                    .take()
                    .ok_or_else(|| FsError::Corrupt("replayed delete of dead inode".into()))?;
                for e in &st.extents {
                    self.bitmap.mark_free(e.phys_range());
                }
                self.dir.remove(&st.name);
                self.dir_bytes -= dir_entry_bytes(&st.name);
            }
            JournalOp::AddExtents {
                ino,
                mtime,
                extents,
            } => {
                for e in &extents {
                    self.bitmap.mark_allocated(e.phys_range());
                }
                let st = self.inode_mut(Ino(ino))?;
                for e in extents {
                    push_extent(&mut st.extents, e, bs);
                }
                st.mtime = mtime;
            }
            JournalOp::FreeRange {
                ino,
                phys,
                len,
                mtime,
            } => {
                self.bitmap.mark_free(BlockRange::new(phys, len));
                let st = self.inode_mut(Ino(ino))?;
                remove_phys_range(&mut st.extents, phys, len, bs);
                st.mtime = mtime;
            }
            JournalOp::ReleaseTail {
                ino,
                keep_blocks,
                new_size,
                mtime,
            } => {
                let st = self.inode_mut(Ino(ino))?;
                let (kept, freed) = compute_tail_free(&st.extents, keep_blocks);
                st.extents = kept;
                st.size = new_size;
                st.mtime = mtime;
                for r in freed {
                    self.bitmap.mark_free(r);
                }
            }
            JournalOp::Write {
                ino,
                new_size,
                mtime,
                extents,
            } => {
                for e in &extents {
                    self.bitmap.mark_allocated(e.phys_range());
                }
                let st = self.inode_mut(Ino(ino))?;
                for e in extents {
                    push_extent(&mut st.extents, e, bs);
                }
                st.size = new_size;
                st.mtime = mtime;
            }
        }
        Ok(())
    }
}

fn fresh_uuid() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let stack = &nanos as *const _ as u64;
    nanos ^ stack.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15
}

impl ExtentFs {
    /// Formats the volume and returns a mounted handle.
    pub fn mkfs(vol: Arc<dyn BlockStore>) -> Result<Self, FsError> {
        Self::mkfs_with(vol, MkfsOptions::default())
    }

    pub fn mkfs_with(vol: Arc<dyn BlockStore>, opts: MkfsOptions) -> Result<Self, FsError> {
        let geom = vol.geometry();
        let layout = layout::plan(geom, &opts, fresh_uuid())?;
        let bs = layout.block_size();

        // Invalidate any stale journal content from a previous life of the
        // volume before the superblock makes the fs mountable.
        let zeros = vec![0u8; (bs * layout.journal.len.min(256)) as usize];
        let mut b = layout.journal.start;
        while b < layout.journal.end() {
            let n = (layout.journal.end() - b).min(256);
            vol.write_blocks(BlockAddr(b), &zeros[..(n * bs) as usize])?;
            b += n;
        }

        let mut bitmap = Bitmap::new_all_free(geom.block_count);
        bitmap.mark_allocated(BlockRange::new(0, layout.data.start));

        let mut inner = FsInner {
            layout,
            inodes: vec![None; layout.max_inodes as usize],
            dir: HashMap::new(),
            dir_bytes: 4,
            bitmap,
            journal: JournalWriter::new(layout.journal, geom.block_size, 1),
            epoch: 0,
            checkpoint_seq: 0,
            active_slot: 1, // first checkpoint lands in slot 0
            leases: LeaseTable::default(),
            checkpoints_written: 0,
            replayed_records: 0,
        };
        inner.checkpoint(vol.as_ref())?;
        vol.write_blocks(BlockAddr(0), &layout::encode_superblock(&layout))?;

        Ok(Self {
            vol,
            inner: Mutex::new(inner),
            listener: Mutex::new(Vec::new()),
        })
    }

    /// Mounts an existing file system, replaying any journal tail left by
    /// a crash. A dirty mount immediately folds the replayed state into a
    /// fresh checkpoint.
    pub fn mount(vol: Arc<dyn BlockStore>) -> Result<Self, FsError> {
        let geom = vol.geometry();
        let sb = vol.read_blocks(BlockAddr(0), 1)?;
        let layout = layout::decode_superblock(&sb, geom)?;
        let hdr_blk = vol.read_blocks(BlockAddr(layout.ckpt_header_block), 1)?;
        let header = layout::decode_ckpt_header(&hdr_blk)?;
        let slot = layout.slots[header.active_slot as usize];
        let bs = layout.block_size();

        let read_blob = |region: BlockRange, len: usize, crc: u32, what: &str| -> Result<Vec<u8>, FsError> {
            if len == 0 {
                if crc != crc32fast::hash(&[]) && crc != 0 {
                    return Err(FsError::Corrupt(format!("{} checksum mismatch", what)));
                }
                return Ok(Vec::new());
            }
            let nblocks = (len as u64).div_ceil(bs);
            let mut buf = vol.read_blocks(BlockAddr(region.start), nblocks)?;
            buf.truncate(len);
            if crc32fast::hash(&buf) != crc {
                return Err(FsError::Corrupt(format!("{} checksum mismatch", what)));
            }
            Ok(buf)
        };

        let table = read_blob(
            slot.inode_table,
            layout.max_inodes as usize * layout::INODE_RECORD_SIZE,
            header.inode_table_crc,
            "inode table",
        )?;
        let bitmap_bytes = read_blob(
            slot.bitmap,
            geom.block_count.div_ceil(8) as usize,
            header.bitmap_crc,
            "bitmap",
        )?;
        let dir_blob = read_blob(slot.dir, header.dir_len as usize, header.dir_crc, "directory")?;
        let overflow = read_blob(
            slot.overflow,
            header.overflow_len as usize,
            header.overflow_crc,
            "extent overflow",
        )?;

        let mut inodes: Vec<Option<InodeState>> = Vec::with_capacity(layout.max_inodes as usize);
        for idx in 0..layout.max_inodes as usize {
            let rec = layout::decode_inode_record(
                &table[idx * layout::INODE_RECORD_SIZE..(idx + 1) * layout::INODE_RECORD_SIZE],
                &overflow,
            )?;
            inodes.push(rec.live.then(|| InodeState {
                name: String::new(),
                size: rec.size,
                mtime: rec.mtime,
                extents: rec.extents,
                io: FileIoStats::default(),
            }));
        }
        let mut dir = HashMap::new();
        let mut dir_bytes = 4usize;
        for (name, ino) in layout::decode_dir(&dir_blob)? {
            dir_bytes += dir_entry_bytes(&name);
            if let Some(st) = inodes
                .get_mut((ino - 1) as usize)
                .and_then(|s| s.as_mut())
            {
                st.name = name.clone();
            } else {
                return Err(FsError::Corrupt(format!(
                    "directory entry {} points at dead inode {}",
                    name, ino
                )));
            }
            dir.insert(name, ino);
        }

        let mut inner = FsInner {
            layout,
            inodes,
            dir,
            dir_bytes,
            bitmap: Bitmap::from_bytes(bitmap_bytes, geom.block_count),
            journal: JournalWriter::new(layout.journal, geom.block_size, header.checkpoint_seq + 1),
            epoch: header.epoch,
            checkpoint_seq: header.checkpoint_seq,
            active_slot: header.active_slot,
            leases: LeaseTable::default(),
            checkpoints_written: 0,
            replayed_records: 0,
        };

        let ops = journal::replay(vol.as_ref(), layout.journal, header.checkpoint_seq)?;
        let replayed = ops.len() as u64;
        for op in ops {
            inner.apply_replay(op)?;
        }
        if replayed > 0 {
            inner.journal = JournalWriter::new(
                layout.journal,
                geom.block_size,
                header.checkpoint_seq + replayed + 1,
            );
            inner.checkpoint(vol.as_ref())?;
        }
        inner.replayed_records = replayed;

        let fs = Self {
            vol,
            inner: Mutex::new(inner),
            listener: Mutex::new(Vec::new()),
        };
        fs.verify_space_accounting().map_err(FsError::Corrupt)?;
        Ok(fs)
    }

    pub fn geometry(&self) -> VolumeGeometry {
        self.inner.lock().unwrap().layout.geom
    }

    pub fn volume(&self) -> Arc<dyn BlockStore> {
        Arc::clone(&self.vol)
    }

    pub fn fs_uuid(&self) -> u64 {
        self.inner.lock().unwrap().layout.fs_uuid
    }

    pub fn data_region(&self) -> BlockRange {
        self.inner.lock().unwrap().layout.data
    }

    pub fn free_blocks(&self) -> u64 {
        self.inner.lock().unwrap().bitmap.free_blocks()
    }

    pub fn allocated_data_blocks(&self) -> u64 {
        let inner = self.inner.lock().unwrap();
        inner.bitmap.allocated_blocks() - inner.layout.data.start
    }

    /// Records replayed by the last mount (0 after a clean shutdown).
    pub fn replayed_records(&self) -> u64 {
        self.inner.lock().unwrap().replayed_records
    }

    pub fn checkpoints_written(&self) -> u64 {
        self.inner.lock().unwrap().checkpoints_written
    }

    pub fn add_block_listener(&self, l: Arc<dyn BlockEventListener>) {
        self.listener.lock().unwrap().push(l);
    }

    fn notify_freed(&self, ranges: &[BlockRange]) {
        if ranges.is_empty() {
            return;
        }
        let listeners = self.listener.lock().unwrap().clone();
        for l in listeners {
            l.blocks_freed(ranges);
        }
    }

    /// Folds all metadata into a checkpoint so a remount replays nothing.
    pub fn sync(&self) -> Result<(), FsError> {
        let mut inner = self.inner.lock().unwrap();
        inner.checkpoint(self.vol.as_ref())
    }

    pub fn create_file(&self, name: &str) -> Result<Ino, FsError> {
        if name.len() > layout::MAX_NAME_LEN {
            return Err(FsError::NameTooLong(name.len()));
        }
        if name.is_empty() {
            return Err(FsError::BadArgument("empty file name".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.dir.contains_key(name) {
            return Err(FsError::DuplicateName(name.to_string()));
        }
        let slot = inner
            .inodes
            .iter()
            .position(|s| s.is_none())
            .ok_or(FsError::TableFull)?;
        if inner.dir_bytes + dir_entry_bytes(name) > inner.layout.dir_capacity_bytes() {
            return Err(FsError::TableFull);
        }
        let ino = (slot + 1) as u32;
        inner.inodes[slot] = Some(InodeState {
            name: name.to_string(),
            size: 0,
            mtime: 1,
            extents: Vec::new(),
            io: FileIoStats::default(),
        });
        inner.dir.insert(name.to_string(), ino);
        inner.dir_bytes += dir_entry_bytes(name);
        inner.commit(
            self.vol.as_ref(),
            JournalOp::Create {
                ino,
                mtime: 1,
                name: name.to_string(),
            },
        )?;
        Ok(Ino(ino))
    }

    pub fn lookup(&self, name: &str) -> Option<Ino> {
        self.inner.lock().unwrap().dir.get(name).map(|i| Ino(*i))
    }

    pub fn list_files(&self) -> Vec<(String, Ino)> {
        let inner = self.inner.lock().unwrap();
        let mut v: Vec<(String, Ino)> = inner
            .dir
            .iter()
            .map(|(n, i)| (n.clone(), Ino(*i)))
            .collect();
        v.sort();
        v
    }

    pub fn stat(&self, ino: Ino) -> Result<(u64, u64), FsError> {
        let inner = self.inner.lock().unwrap();
        let st = inner.inode(ino)?;
        Ok((st.size, st.mtime))
    }

    pub fn file_extents(&self, ino: Ino) -> Result<Vec<Extent>, FsError> {
        let inner = self.inner.lock().unwrap();
        Ok(inner.inode(ino)?.extents.clone())
    }

    pub fn file_io(&self, ino: Ino) -> Result<FileIoStats, FsError> {
        let inner = self.inner.lock().unwrap();
        Ok(inner.inode(ino)?.io)
    }

    /// Current mtimes for a set of files, in the shape lease grants expect.
    pub fn current_hints(&self, inos: &[Ino]) -> Result<Vec<(Ino, u64)>, FsError> {
        let inner = self.inner.lock().unwrap();
        inos.iter()
            .map(|&i| inner.inode(i).map(|st| (i, st.mtime)))
            .collect()
    }

    /// Reserves space without making it readable: extents are appended
    /// after the current reservation, size is unchanged.
    pub fn preallocate(&self, ino: Ino, length: u64) -> Result<Vec<Extent>, FsError> {
        if length == 0 {
            return Ok(Vec::new());
        }
        let mut inner = self.inner.lock().unwrap();
        let bs = inner.bs();
        let want = length.div_ceil(bs);
        inner.inode(ino)?;
        let data = inner.layout.data;
        let free = inner.bitmap.free_blocks();
        let runs = inner
            .bitmap
            .allocate(want, data)
            .ok_or(FsError::NoSpace {
                requested: want,
                free,
            })?;

        let mut logical = inner.inode(ino)?.reservation_end(bs);
        let mut added = Vec::with_capacity(runs.len());
        for r in runs {
            added.push(Extent {
                logical,
                phys: r.start,
                len: r.len,
            });
            logical += r.len * bs;
        }
        {
            let st = inner.inode_mut(ino)?;
            for e in &added {
                push_extent(&mut st.extents, *e, bs);
            }
        }
        for chunk in added.chunks(MAX_EXTENTS_PER_RECORD) {
            let mtime = {
                let st = inner.inode_mut(ino)?;
                st.mtime += 1;
                st.mtime
            };
            inner.commit(
                self.vol.as_ref(),
                JournalOp::AddExtents {
                    ino: ino.0,
                    mtime,
                    extents: chunk.to_vec(),
                },
            )?;
        }
        Ok(added)
    }

    pub fn write(&self, ino: Ino, offset: u64, data: &[u8]) -> Result<(), FsError> {
        if data.is_empty() {
            return Ok(());
        }
        let mut inner = self.inner.lock().unwrap();
        let bs = inner.bs();
        let end = offset + data.len() as u64;
        let old_size = inner.inode(ino)?.size;

        // Conflict scan covers the gap that will be zeroed as well as the
        // written range itself.
        inner.check_initiator_io(ino, old_size.min(offset), end)?;

        // Allocate the uncovered logical blocks of the written range.
        let (first, last) = (offset / bs, (end - 1) / bs);
        let mut added: Vec<Extent> = Vec::new();
        {
            let mut run_start: Option<u64> = None;
            let mut gaps: Vec<(u64, u64)> = Vec::new(); // (logical block, count)
            let extents_snapshot = inner.inode(ino)?.extents.clone();
            for lb in first..=last {
                let covered = FsInner::lookup_block(&extents_snapshot, lb, bs).is_some();
                match (covered, run_start) {
                    (false, None) => run_start = Some(lb),
                    (true, Some(s)) => {
                        gaps.push((s, lb - s));
                        run_start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = run_start {
                gaps.push((s, last - s + 1));
            }
            let data_region = inner.layout.data;
            for (lb, count) in gaps {
                let free = inner.bitmap.free_blocks();
                let Some(runs) = inner.bitmap.allocate(count, data_region) else {
                    // Roll back anything taken for earlier gaps.
                    for e in &added {
                        inner.bitmap.mark_free(e.phys_range());
                    }
                    return Err(FsError::NoSpace {
                        requested: count,
                        free,
                    });
                };
                let mut logical = lb * bs;
                for r in runs {
                    added.push(Extent {
                        logical,
                        phys: r.start,
                        len: r.len,
                    });
                    logical += r.len * bs;
                }
            }
            let st = inner.inode_mut(ino)?;
            for e in &added {
                push_extent(&mut st.extents, *e, bs);
            }
        }

        // Zero the allocated part of the gap between old size and the new
        // write, so holes keep reading as zeroes after size extension.
        if offset > old_size {
            inner.zero_allocated(self.vol.as_ref(), ino, old_size, offset)?;
        }

        // Compose and write the data blocks, batching contiguous runs.
        {
            let st = inner.inode(ino)?;
            let mut pending: Vec<(u64, Vec<u8>)> = Vec::new(); // (phys, image)
            for lb in first..=last {
                let phys = FsInner::lookup_block(&st.extents, lb, bs)
                    .expect("written block must be mapped");
                let b0 = lb * bs;
                let dfrom = offset.max(b0);
                let dto = end.min(b0 + bs);
                let full = dfrom == b0 && dto == b0 + bs;
                let freshly_added = added.iter().any(|e| {
                    let ef = e.logical / bs;
                    lb >= ef && lb < ef + e.len
                });
                // Valid pre-existing bytes need read-modify-write.
                let mut img = if full || freshly_added || b0 >= old_size {
                    vec![0u8; bs as usize]
                } else {
                    self.vol.read_blocks(BlockAddr(phys), 1)?
                };
                // Bytes beyond the old size are not valid data; clear them
                // so later size extensions expose zeroes.
                if !full && !freshly_added && old_size > b0 && old_size < b0 + bs {
                    img[(old_size - b0) as usize..].fill(0);
                }
                img[(dfrom - b0) as usize..(dto - b0) as usize]
                    .copy_from_slice(&data[(dfrom - offset) as usize..(dto - offset) as usize]);
                match pending.last_mut() {
                    Some((p, buf)) if *p + (buf.len() as u64 / bs) == phys => buf.extend(img),
                    _ => pending.push((phys, img)),
                }
            }
            for (phys, img) in pending {
                self.vol.write_blocks(BlockAddr(phys), &img)?;
            }
        }

        // Commit: extents (chunked) and the size/mtime record last, after
        // the data is on the volume.
        let new_size = old_size.max(end);
        let mut chunks: Vec<&[Extent]> = added.chunks(MAX_EXTENTS_PER_RECORD).collect();
        let last_chunk: Vec<Extent> = chunks.pop().map(|c| c.to_vec()).unwrap_or_default();
        for chunk in chunks {
            let mtime = {
                let st = inner.inode_mut(ino)?;
                st.mtime += 1;
                st.mtime
            };
            inner.commit(
                self.vol.as_ref(),
                JournalOp::AddExtents {
                    ino: ino.0,
                    mtime,
                    extents: chunk.to_vec(),
                },
            )?;
        }
        let mtime = {
            let st = inner.inode_mut(ino)?;
            st.size = new_size;
            st.mtime += 1;
            st.io.bytes_written += data.len() as u64;
            st.mtime
        };
        inner.commit(
            self.vol.as_ref(),
            JournalOp::Write {
                ino: ino.0,
                new_size,
                mtime,
                extents: last_chunk,
            },
        )?;
        Ok(())
    }

    pub fn read(&self, ino: Ino, offset: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let mut inner = self.inner.lock().unwrap();
        let bs = inner.bs();
        let size = inner.inode(ino)?.size;
        let end = offset + len as u64;
        if end > size {
            return Err(FsError::OutOfBounds {
                offset,
                len: len as u64,
                size,
            });
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        inner.check_initiator_io(ino, offset, end)?;

        let mut out = vec![0u8; len];
        {
            let st = inner.inode(ino)?;
            // Batch physically contiguous runs of mapped blocks.
            let (first, last) = (offset / bs, (end - 1) / bs);
            let mut run: Option<(u64, u64, u64)> = None; // (lb0, phys0, count)
            let flush = |run: &mut Option<(u64, u64, u64)>,
                             out: &mut Vec<u8>|
             -> Result<(), FsError> {
                if let Some((lb0, phys0, count)) = run.take() {
                    let buf = self.vol.read_blocks(BlockAddr(phys0), count)?;
                    let span0 = lb0 * bs;
                    let cfrom = offset.max(span0);
                    let cto = end.min(span0 + count * bs);
                    out[(cfrom - offset) as usize..(cto - offset) as usize]
                        .copy_from_slice(&buf[(cfrom - span0) as usize..(cto - span0) as usize]);
                }
                Ok(())
            };
            for lb in first..=last {
                match (FsInner::lookup_block(&st.extents, lb, bs), &mut run) {
                    (Some(p), Some((_, phys0, count))) if *phys0 + *count == p => *count += 1,
                    (Some(p), r) => {
                        flush(r, &mut out)?;
                        *r = Some((lb, p, 1));
                    }
                    (None, r) => flush(r, &mut out)?, // hole: leave zeroes
                }
            }
            flush(&mut run, &mut out)?;
        }
        inner.inode_mut(ino)?.io.bytes_read += len as u64;
        Ok(out)
    }

    pub fn delete_file(&self, ino: Ino) -> Result<(), FsError> {
        let freed: Vec<BlockRange>;
        {
            let mut inner = self.inner.lock().unwrap();
            let extents = inner.inode(ino)?.extents.clone();
            for e in &extents {
                if let Some(lease) = inner.leases.any_set_overlaps(&e.phys_range()) {
                    return Err(FsError::LeaseConflict {
                        lease,
                        block: e.phys,
                    });
                }
            }
            let st = inner.inodes[(ino.0 - 1) as usize].take().unwrap();
            inner.dir.remove(&st.name);
            inner.dir_bytes -= dir_entry_bytes(&st.name);
            for e in &st.extents {
                inner.bitmap.mark_free(e.phys_range());
            }
            freed = st.extents.iter().map(|e| e.phys_range()).collect();
            inner.commit(self.vol.as_ref(), JournalOp::Delete { ino: ino.0 })?;
        }
        self.notify_freed(&freed);
        Ok(())
    }

    /// Trims the reservation to `keep` bytes, freeing everything past it.
    /// Returns the number of blocks freed.
    pub fn release_tail(&self, ino: Ino, keep: u64) -> Result<u64, FsError> {
        let freed: Vec<BlockRange>;
        {
            let mut inner = self.inner.lock().unwrap();
            let bs = inner.bs();
            let st = inner.inode(ino)?;
            let reserved = st.reserved_blocks();
            let keep_blocks = keep.div_ceil(bs);
            if keep_blocks > reserved {
                return Err(FsError::BadArgument(format!(
                    "keep {} bytes exceeds reservation of {} blocks",
                    keep, reserved
                )));
            }
            let (kept, freed_ranges) = compute_tail_free(&st.extents, keep_blocks);
            for r in &freed_ranges {
                if let Some(lease) = inner.leases.any_set_overlaps(r) {
                    return Err(FsError::LeaseConflict {
                        lease,
                        block: r.start,
                    });
                }
            }
            let new_size = inner.inode(ino)?.size.min(keep);
            let mtime = {
                let st = inner.inode_mut(ino)?;
                st.extents = kept;
                st.size = new_size;
                st.mtime += 1;
                st.mtime
            };
            for r in &freed_ranges {
                inner.bitmap.mark_free(*r);
            }
            inner.commit(
                self.vol.as_ref(),
                JournalOp::ReleaseTail {
                    ino: ino.0,
                    keep_blocks,
                    new_size,
                    mtime,
                },
            )?;
            freed = freed_ranges;
        }
        let count = freed.iter().map(|r| r.len).sum();
        self.notify_freed(&freed);
        Ok(count)
    }

    /// Grants an offload lease over sub-ranges of live files' extents.
    pub fn grant_lease(
        &self,
        read: &[(Ino, BlockRange)],
        write: &[(Ino, BlockRange)],
        mtime_hints: Vec<(Ino, u64)>,
    ) -> Result<Lease, FsError> {
        let mut inner = self.inner.lock().unwrap();
        let bs = inner.bs();

        let resolve = |inner: &FsInner, ino: Ino, range: &BlockRange| -> Result<LeaseExtent, FsError> {
            if range.len == 0 {
                return Err(FsError::BadArgument("empty lease extent".into()));
            }
            let st = inner.inode(ino)?;
            let owner = st
                .extents
                .iter()
                .find(|e| e.phys <= range.start && range.end() <= e.phys + e.len)
                .ok_or(FsError::UnownedExtent {
                    ino,
                    start: range.start,
                    len: range.len,
                })?;
            Ok(LeaseExtent {
                ino,
                logical: owner.logical + (range.start - owner.phys) * bs,
                range: *range,
            })
        };

        let read_set: Vec<LeaseExtent> = read
            .iter()
            .map(|(i, r)| resolve(&inner, *i, r))
            .collect::<Result<_, _>>()?;
        let write_set: Vec<LeaseExtent> = write
            .iter()
            .map(|(i, r)| resolve(&inner, *i, r))
            .collect::<Result<_, _>>()?;

        // New write blocks must not collide with anything: not an active
        // lease's sets, not this lease's own read set, not each other.
        for (i, w) in write_set.iter().enumerate() {
            if let Some(l) = inner.leases.any_set_overlaps(&w.range) {
                return Err(FsError::LeaseConflict {
                    lease: l,
                    block: w.range.start,
                });
            }
            for other in &write_set[i + 1..] {
                if w.range.overlaps(&other.range) {
                    return Err(FsError::BadArgument(
                        "write extents overlap within the lease".into(),
                    ));
                }
            }
            for r in &read_set {
                if w.range.overlaps(&r.range) {
                    return Err(FsError::BadArgument(
                        "read and write sets overlap within the lease".into(),
                    ));
                }
            }
        }
        // New read blocks may share with other read sets, but not with an
        // active writer.
        for r in &read_set {
            if let Some(l) = inner.leases.write_set_overlaps(&r.range) {
                return Err(FsError::LeaseConflict {
                    lease: l,
                    block: r.range.start,
                });
            }
        }

        let id = inner.leases.next_id();
        let lease = Lease::new(id, read_set, write_set, mtime_hints);
        inner.leases.insert(lease.clone());
        Ok(lease)
    }

    pub fn lease(&self, id: LeaseId) -> Option<Lease> {
        self.inner.lock().unwrap().leases.get(id).cloned()
    }

    pub fn active_lease_count(&self) -> usize {
        self.inner.lock().unwrap().leases.active_count()
    }

    /// Completes a lease: per write extent, `bytes_written[i]` bytes from
    /// its start are now valid data; unused tail blocks are freed and file
    /// sizes extended. Returns the freed ranges.
    pub fn complete_lease(
        &self,
        id: LeaseId,
        bytes_written: &[u64],
    ) -> Result<Vec<BlockRange>, FsError> {
        let mut all_freed: Vec<BlockRange> = Vec::new();
        {
            let mut inner = self.inner.lock().unwrap();
            let bs = inner.bs();
            let lease = inner
                .leases
                .get(id)
                .ok_or(FsError::UnknownLease(id.0))?
                .clone();
            if !lease.is_active() {
                return Err(FsError::LeaseNotActive(id.0));
            }
            if bytes_written.len() != lease.write_set.len() {
                return Err(FsError::BadArgument(format!(
                    "bytes_written has {} entries for {} write extents",
                    bytes_written.len(),
                    lease.write_set.len()
                )));
            }
            for (ext, &bw) in lease.write_set.iter().zip(bytes_written) {
                if bw > ext.range.len * bs {
                    return Err(FsError::BadArgument(format!(
                        "bytes_written {} exceeds extent of {} blocks",
                        bw, ext.range.len
                    )));
                }
            }
            inner.leases.get_mut(id).unwrap().state = LeaseState::Completed;

            // Free unused tails.
            for (ext, &bw) in lease.write_set.iter().zip(bytes_written) {
                let keep = bw.div_ceil(bs);
                if keep == ext.range.len {
                    continue;
                }
                let free = BlockRange::new(ext.range.start + keep, ext.range.len - keep);
                inner.bitmap.mark_free(free);
                let mtime = {
                    let st = inner.inode_mut(ext.ino)?;
                    remove_phys_range(&mut st.extents, free.start, free.len, bs);
                    st.mtime += 1;
                    st.mtime
                };
                inner.commit(
                    self.vol.as_ref(),
                    JournalOp::FreeRange {
                        ino: ext.ino.0,
                        phys: free.start,
                        len: free.len,
                        mtime,
                    },
                )?;
                all_freed.push(free);
            }

            // Extend sizes; one commit record per touched file, after the
            // task's data writes (which happened before completion).
            let mut touched: Vec<Ino> = Vec::new();
            for ext in &lease.write_set {
                if !touched.contains(&ext.ino) {
                    touched.push(ext.ino);
                }
            }
            for ino in touched {
                let mut new_size = inner.inode(ino)?.size;
                for (ext, &bw) in lease.write_set.iter().zip(bytes_written) {
                    if ext.ino == ino && bw > 0 {
                        new_size = new_size.max(ext.logical + bw);
                    }
                }
                let old_size = inner.inode(ino)?.size;
                if new_size > old_size {
                    // Gap between old size and the written region must read
                    // as zeroes if it lands on preallocated blocks.
                    let first_logical = lease
                        .write_set
                        .iter()
                        .zip(bytes_written)
                        .filter(|(e, &bw)| e.ino == ino && bw > 0)
                        .map(|(e, _)| e.logical)
                        .min()
                        .unwrap_or(old_size);
                    if first_logical > old_size {
                        inner.zero_allocated(self.vol.as_ref(), ino, old_size, first_logical)?;
                    }
                }
                let mtime = {
                    let st = inner.inode_mut(ino)?;
                    st.size = new_size;
                    st.mtime += 1;
                    st.mtime
                };
                inner.commit(
                    self.vol.as_ref(),
                    JournalOp::Write {
                        ino: ino.0,
                        new_size,
                        mtime,
                        extents: Vec::new(),
                    },
                )?;
            }
        }
        self.notify_freed(&all_freed);
        Ok(all_freed)
    }

    /// Aborts a lease: its write-set blocks are treated as garbage and
    /// returned to the free pool.
    pub fn abort_lease(&self, id: LeaseId) -> Result<Vec<BlockRange>, FsError> {
        let mut all_freed: Vec<BlockRange> = Vec::new();
        {
            let mut inner = self.inner.lock().unwrap();
            let bs = inner.bs();
            let lease = inner
                .leases
                .get(id)
                .ok_or(FsError::UnknownLease(id.0))?
                .clone();
            if !lease.is_active() {
                return Err(FsError::LeaseNotActive(id.0));
            }
            inner.leases.get_mut(id).unwrap().state = LeaseState::Aborted;
            for ext in &lease.write_set {
                inner.bitmap.mark_free(ext.range);
                let mtime = {
                    let st = inner.inode_mut(ext.ino)?;
                    remove_phys_range(&mut st.extents, ext.range.start, ext.range.len, bs);
                    st.mtime += 1;
                    st.mtime
                };
                inner.commit(
                    self.vol.as_ref(),
                    JournalOp::FreeRange {
                        ino: ext.ino.0,
                        phys: ext.range.start,
                        len: ext.range.len,
                        mtime,
                    },
                )?;
                all_freed.push(ext.range);
            }
        }
        self.notify_freed(&all_freed);
        Ok(all_freed)
    }

    /// Cross-checks the bitmap against extent ownership: every allocated
    /// block is owned by exactly one live inode or the metadata region.
    pub fn verify_space_accounting(&self) -> Result<(), String> {
        let inner = self.inner.lock().unwrap();
        let mut expected = Bitmap::new_all_free(inner.layout.geom.block_count);
        expected.mark_allocated(BlockRange::new(0, inner.layout.data.start));
        for st in inner.inodes.iter().flatten() {
            for e in &st.extents {
                for b in e.phys..e.phys + e.len {
                    if expected.is_allocated(b) {
                        return Err(format!("block {} owned twice", b));
                    }
                }
                expected.mark_allocated(e.phys_range());
            }
        }
        if expected.to_bytes() != inner.bitmap.to_bytes() {
            for b in 0..inner.layout.geom.block_count {
                if expected.is_allocated(b) != inner.bitmap.is_allocated(b) {
                    return Err(format!(
                        "block {}: bitmap says {}, extents say {}",
                        b,
                        inner.bitmap.is_allocated(b),
                        expected.is_allocated(b)
                    ));
                }
            }
        }
        Ok(())
    }
}
