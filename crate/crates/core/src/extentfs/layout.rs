//! On-volume layout: superblock, checkpoint slots, and fixed-size inode
//! records.
//!
//! Block 0 holds the superblock. Block 1 is the checkpoint header, a single
//! block rewritten atomically to flip between two checkpoint slots (A/B).
//! Each slot holds a full metadata snapshot: the inode table (128-byte
//! records), the allocation bitmap, the flat directory, and an extent
//! overflow heap for inodes with more than four extents. A journal region
//! follows the slots; everything after it is file data.

use crate::volume::{BlockRange, VolumeGeometry};

use super::FsError;

pub const SUPERBLOCK_MAGIC: [u8; 4] = *b"OFFS";
pub const CKPT_HEADER_MAGIC: [u8; 4] = *b"OFJH";
pub const FS_VERSION: u32 = 1;
pub const INODE_RECORD_SIZE: usize = 128;
pub const INLINE_EXTENTS: usize = 4;
pub const EXTENT_RECORD_SIZE: usize = 20;
pub const MAX_NAME_LEN: usize = 255;
pub const MIN_FS_BLOCKS: u64 = 64;

/// Per-file mapping from a logical byte offset to a physical block run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    /// Byte offset within the file.
    pub logical: u64,
    /// First physical block.
    pub phys: u64,
    /// Length in blocks.
    pub len: u64,
}

impl Extent {
    pub fn logical_end(&self, block_size: u32) -> u64 {
        self.logical + self.len * block_size as u64
    }

    pub fn phys_range(&self) -> BlockRange {
        BlockRange::new(self.phys, self.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub inode_table: BlockRange,
    pub bitmap: BlockRange,
    pub dir: BlockRange,
    pub overflow: BlockRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub geom: VolumeGeometry,
    pub max_inodes: u32,
    pub ckpt_header_block: u64,
    pub slots: [SlotLayout; 2],
    pub journal: BlockRange,
    pub data: BlockRange,
    pub fs_uuid: u64,
}

impl Layout {
    pub fn block_size(&self) -> u64 {
        self.geom.block_size as u64
    }

    pub fn dir_capacity_bytes(&self) -> usize {
        (self.slots[0].dir.len * self.block_size()) as usize
    }

    pub fn overflow_capacity_bytes(&self) -> usize {
        (self.slots[0].overflow.len * self.block_size()) as usize
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MkfsOptions {
    pub max_inodes: Option<u32>,
    pub journal_blocks: Option<u64>,
}

fn blocks_for(bytes: u64, bs: u64) -> u64 {
    bytes.div_ceil(bs)
}

/// Computes where every metadata region lives for a given geometry.
pub fn plan(geom: VolumeGeometry, opts: &MkfsOptions, fs_uuid: u64) -> Result<Layout, FsError> {
    if geom.block_count < MIN_FS_BLOCKS {
        return Err(FsError::VolumeTooSmall {
            blocks: geom.block_count,
            min: MIN_FS_BLOCKS,
        });
    }
    let bs = geom.block_size as u64;
    let max_inodes = opts
        .max_inodes
        .unwrap_or_else(|| (geom.block_count / 64).clamp(8, 2048) as u32);
    let journal_blocks = opts
        .journal_blocks
        .unwrap_or_else(|| (geom.block_count / 32).clamp(8, 2048));

    let inode_table_blocks = blocks_for(max_inodes as u64 * INODE_RECORD_SIZE as u64, bs);
    let bitmap_blocks = blocks_for(geom.block_count.div_ceil(8), bs);
    // Worst-case directory: every inode named at the 255-byte limit.
    let dir_blocks = blocks_for(8 + max_inodes as u64 * (4 + 2 + MAX_NAME_LEN as u64), bs);
    // Worst-case extent storage: every block its own extent record.
    let overflow_blocks = blocks_for(16 + geom.block_count * EXTENT_RECORD_SIZE as u64, bs);

    let mut cursor = 2; // superblock + checkpoint header
    let mut take = |len: u64| {
        let r = BlockRange::new(cursor, len);
        cursor += len;
        r
    };
    let slot = |take: &mut dyn FnMut(u64) -> BlockRange| SlotLayout {
        inode_table: take(inode_table_blocks),
        bitmap: take(bitmap_blocks),
        dir: take(dir_blocks),
        overflow: take(overflow_blocks),
    };
    let slot_a = slot(&mut take);
    let slot_b = slot(&mut take);
    let journal = take(journal_blocks);

    if cursor >= geom.block_count {
        return Err(FsError::VolumeTooSmall {
            blocks: geom.block_count,
            min: cursor + 1,
        });
    }
    let data = BlockRange::new(cursor, geom.block_count - cursor);
    Ok(Layout {
        geom,
        max_inodes,
        ckpt_header_block: 1,
        slots: [slot_a, slot_b],
        journal,
        data,
        fs_uuid,
    })
}

fn put_range(buf: &mut Vec<u8>, r: BlockRange) {
    buf.extend_from_slice(&r.start.to_le_bytes());
    buf.extend_from_slice(&r.len.to_le_bytes());
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn get_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn get_range(b: &[u8], off: usize) -> BlockRange {
    BlockRange::new(get_u64(b, off), get_u64(b, off + 8))
}

/// Serializes the superblock into one zero-padded block.
pub fn encode_superblock(layout: &Layout) -> Vec<u8> {
    let mut buf = Vec::with_capacity(256);
    buf.extend_from_slice(&SUPERBLOCK_MAGIC);
    buf.extend_from_slice(&FS_VERSION.to_le_bytes());
    buf.extend_from_slice(&layout.geom.block_size.to_le_bytes());
    buf.extend_from_slice(&layout.geom.block_count.to_le_bytes());
    buf.extend_from_slice(&layout.max_inodes.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for s in &layout.slots {
        put_range(&mut buf, s.inode_table);
        put_range(&mut buf, s.bitmap);
        put_range(&mut buf, s.dir);
        put_range(&mut buf, s.overflow);
    }
    buf.extend_from_slice(&layout.ckpt_header_block.to_le_bytes());
    put_range(&mut buf, layout.journal);
    put_range(&mut buf, layout.data);
    buf.extend_from_slice(&layout.fs_uuid.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let bs = layout.geom.block_size as usize;
    buf.resize(bs, 0);
    buf
}

pub fn decode_superblock(block: &[u8], geom: VolumeGeometry) -> Result<Layout, FsError> {
    let body_len = 28 + 8 * 16 + 8 + 32 + 8;
    if block.len() < body_len + 4 {
        return Err(FsError::NotFormatted("superblock truncated".into()));
    }
    if block[0..4] != SUPERBLOCK_MAGIC {
        return Err(FsError::NotFormatted("bad superblock magic".into()));
    }
    let stored_crc = get_u32(block, body_len);
    if crc32fast::hash(&block[..body_len]) != stored_crc {
        return Err(FsError::NotFormatted("superblock checksum mismatch".into()));
    }
    let version = get_u32(block, 4);
    if version != FS_VERSION {
        return Err(FsError::NotFormatted(format!(
            "unsupported version {}",
            version
        )));
    }
    let block_size = get_u32(block, 8);
    let block_count = get_u64(block, 12);
    if block_size != geom.block_size || block_count != geom.block_count {
        return Err(FsError::NotFormatted(format!(
            "geometry mismatch: superblock says {}x{}, volume is {}x{}",
            block_count, block_size, geom.block_count, geom.block_size
        )));
    }
    let max_inodes = get_u32(block, 20);
    let mut off = 28;
    let mut slots = [SlotLayout {
        inode_table: BlockRange::new(0, 0),
        bitmap: BlockRange::new(0, 0),
        dir: BlockRange::new(0, 0),
        overflow: BlockRange::new(0, 0),
    }; 2];
    for s in slots.iter_mut() {
        s.inode_table = get_range(block, off);
        s.bitmap = get_range(block, off + 16);
        s.dir = get_range(block, off + 32);
        s.overflow = get_range(block, off + 48);
        off += 64;
    }
    let ckpt_header_block = get_u64(block, off);
    let journal = get_range(block, off + 8);
    let data = get_range(block, off + 24);
    let fs_uuid = get_u64(block, off + 40);
    Ok(Layout {
        geom,
        max_inodes,
        ckpt_header_block,
        slots,
        journal,
        data,
        fs_uuid,
    })
}

/// Checkpoint header: names the active slot and pins its content hashes
/// and blob lengths. Rewriting this single block is what commits a
/// checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CkptHeader {
    pub epoch: u64,
    pub checkpoint_seq: u64,
    pub active_slot: u8,
    pub inode_table_crc: u32,
    pub bitmap_crc: u32,
    pub dir_crc: u32,
    pub overflow_crc: u32,
    pub dir_len: u32,
    pub overflow_len: u32,
}

pub fn encode_ckpt_header(h: &CkptHeader, block_size: u32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(56);
    buf.extend_from_slice(&CKPT_HEADER_MAGIC);
    buf.extend_from_slice(&h.epoch.to_le_bytes());
    buf.extend_from_slice(&h.checkpoint_seq.to_le_bytes());
    buf.push(h.active_slot);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&h.inode_table_crc.to_le_bytes());
    buf.extend_from_slice(&h.bitmap_crc.to_le_bytes());
    buf.extend_from_slice(&h.dir_crc.to_le_bytes());
    buf.extend_from_slice(&h.overflow_crc.to_le_bytes());
    buf.extend_from_slice(&h.dir_len.to_le_bytes());
    buf.extend_from_slice(&h.overflow_len.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf.resize(block_size as usize, 0);
    buf
}

pub fn decode_ckpt_header(block: &[u8]) -> Result<CkptHeader, FsError> {
    let body_len = 4 + 8 + 8 + 4 + 16 + 8;
    if block.len() < body_len + 4 || block[0..4] != CKPT_HEADER_MAGIC {
        return Err(FsError::NotFormatted("bad checkpoint header".into()));
    }
    if crc32fast::hash(&block[..body_len]) != get_u32(block, body_len) {
        return Err(FsError::NotFormatted(
            "checkpoint header checksum mismatch".into(),
        ));
    }
    let active_slot = block[20];
    if active_slot > 1 {
        return Err(FsError::Corrupt("invalid active slot".into()));
    }
    Ok(CkptHeader {
        epoch: get_u64(block, 4),
        checkpoint_seq: get_u64(block, 12),
        active_slot,
        inode_table_crc: get_u32(block, 24),
        bitmap_crc: get_u32(block, 28),
        dir_crc: get_u32(block, 32),
        overflow_crc: get_u32(block, 36),
        dir_len: get_u32(block, 40),
        overflow_len: get_u32(block, 44),
    })
}

/// Snapshot of one inode as stored in the table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InodeRecord {
    pub ino: u32,
    pub live: bool,
    pub size: u64,
    pub mtime: u64,
    pub extents: Vec<Extent>,
}

pub fn encode_extent(buf: &mut Vec<u8>, e: &Extent) {
    buf.extend_from_slice(&e.logical.to_le_bytes());
    buf.extend_from_slice(&e.phys.to_le_bytes());
    buf.extend_from_slice(&(e.len as u32).to_le_bytes());
}

pub fn decode_extent(b: &[u8]) -> Extent {
    Extent {
        logical: get_u64(b, 0),
        phys: get_u64(b, 8),
        len: get_u32(b, 16) as u64,
    }
}

/// Writes one 128-byte inode record. Inodes with more than four extents
/// spill their whole extent list into the overflow heap and record the
/// offset; `overflow` is the heap being assembled for the same checkpoint.
pub fn encode_inode_record(rec: &InodeRecord, overflow: &mut Vec<u8>) -> Result<Vec<u8>, FsError> {
    let mut buf = Vec::with_capacity(INODE_RECORD_SIZE);
    buf.extend_from_slice(&rec.ino.to_le_bytes());
    buf.push(rec.live as u8);
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&rec.size.to_le_bytes());
    buf.extend_from_slice(&rec.mtime.to_le_bytes());
    buf.extend_from_slice(&(rec.extents.len() as u32).to_le_bytes());
    let overflow_off = if rec.extents.len() > INLINE_EXTENTS {
        let off = overflow.len();
        if off > u32::MAX as usize {
            return Err(FsError::Corrupt("extent overflow heap too large".into()));
        }
        for e in &rec.extents {
            encode_extent(overflow, e);
        }
        off as u32
    } else {
        0
    };
    buf.extend_from_slice(&overflow_off.to_le_bytes());
    buf.extend_from_slice(&0u64.to_le_bytes());
    if rec.extents.len() <= INLINE_EXTENTS {
        for e in &rec.extents {
            encode_extent(&mut buf, e);
        }
    }
    buf.resize(INODE_RECORD_SIZE - 8, 0);
    buf.extend_from_slice(&0u32.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(buf.len(), INODE_RECORD_SIZE);
    Ok(buf)
}

pub fn decode_inode_record(b: &[u8], overflow: &[u8]) -> Result<InodeRecord, FsError> {
    debug_assert_eq!(b.len(), INODE_RECORD_SIZE);
    let stored = get_u32(b, INODE_RECORD_SIZE - 4);
    if crc32fast::hash(&b[..INODE_RECORD_SIZE - 4]) != stored {
        return Err(FsError::Corrupt("inode record checksum mismatch".into()));
    }
    let ino = get_u32(b, 0);
    let live = b[4] != 0;
    let size = get_u64(b, 8);
    let mtime = get_u64(b, 16);
    let extent_count = get_u32(b, 24) as usize;
    let overflow_off = get_u32(b, 28) as usize;
    let mut extents = Vec::with_capacity(extent_count);
    if extent_count <= INLINE_EXTENTS {
        for i in 0..extent_count {
            extents.push(decode_extent(&b[40 + i * EXTENT_RECORD_SIZE..]));
        }
    } else {
        let need = extent_count * EXTENT_RECORD_SIZE;
        if overflow_off + need > overflow.len() {
            return Err(FsError::Corrupt("extent overflow out of range".into()));
        }
        for i in 0..extent_count {
            extents.push(decode_extent(
                &overflow[overflow_off + i * EXTENT_RECORD_SIZE..],
            ));
        }
    }
    Ok(InodeRecord {
        ino,
        live,
        size,
        mtime,
        extents,
    })
}

/// Directory blob: `[u32 count]` then `[u32 ino][u16 len][name]` per entry.
pub fn encode_dir(entries: &[(String, u32)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, ino) in entries {
        buf.extend_from_slice(&ino.to_le_bytes());
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    buf
}

pub fn decode_dir(b: &[u8]) -> Result<Vec<(String, u32)>, FsError> {
    let corrupt = || FsError::Corrupt("directory blob truncated".into());
    if b.len() < 4 {
        return Err(corrupt());
    }
    let count = get_u32(b, 0) as usize;
    let mut off = 4;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if off + 6 > b.len() {
            return Err(corrupt());
        }
        let ino = get_u32(b, off);
        let len = u16::from_le_bytes(b[off + 4..off + 6].try_into().unwrap()) as usize;
        off += 6;
        if off + len > b.len() {
            return Err(corrupt());
        }
        let name = String::from_utf8(b[off..off + len].to_vec())
            .map_err(|_| FsError::Corrupt("directory name not utf-8".into()))?;
        off += len;
        out.push((name, ino));
    }
    Ok(out)
}
