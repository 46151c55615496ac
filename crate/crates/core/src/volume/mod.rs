//! Block-addressable volume abstraction.
//!
//! A volume is a flat array of fixed-size blocks. Backends: an in-memory
//! buffer, a regular file, or a remote service reached through the framed
//! wire protocol. All backends are observationally equivalent except for
//! timing and link byte counters.

mod backend;
pub mod metered;
pub mod remote;
pub mod sim;

pub use backend::{create_volume, Backing, FileVolume, MemVolume};
pub use metered::MeteredVolume;
pub use remote::RemoteVolume;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

pub const MIN_BLOCK_SIZE: u32 = 512;

/// Shape of a volume: fixed block size times block count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeGeometry {
    pub block_size: u32,
    pub block_count: u64,
}

impl VolumeGeometry {
    pub fn new(block_size: u32, block_count: u64) -> Result<Self, VolumeError> {
        if block_size < MIN_BLOCK_SIZE || !block_size.is_power_of_two() {
            return Err(VolumeError::InvalidGeometry(format!(
                "block_size {} must be a power of two >= {}",
                block_size, MIN_BLOCK_SIZE
            )));
        }
        if block_count == 0 {
            return Err(VolumeError::InvalidGeometry(
                "block_count must be >= 1".into(),
            ));
        }
        Ok(Self {
            block_size,
            block_count,
        })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.block_size as u64 * self.block_count
    }
}

/// 0-based index of a block within a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddr(pub u64);

/// Contiguous run of physical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockRange {
    pub start: u64,
    pub len: u64,
}

impl BlockRange {
    pub fn new(start: u64, len: u64) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains_range(&self, other: &BlockRange) -> bool {
        other.start >= self.start && other.end() <= self.end()
    }

    pub fn overlaps(&self, other: &BlockRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("block range [{start}, +{count}) out of bounds (block_count {block_count})")]
    OutOfRange {
        start: u64,
        count: u64,
        block_count: u64,
    },
    #[error("data length {len} is not a multiple of block size {block_size}")]
    Misaligned { len: usize, block_size: u32 },
    #[error("backing unavailable: {0}")]
    Backing(String),
    #[error("transport closed")]
    TransportClosed,
    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("simulated crash")]
    Crashed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Monotonic I/O counters maintained by every backend.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct IoCounts {
    pub read_ops: u64,
    pub write_ops: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
}

#[derive(Debug, Default)]
pub struct IoCounters {
    read_ops: AtomicU64,
    write_ops: AtomicU64,
    blocks_read: AtomicU64,
    blocks_written: AtomicU64,
}

impl IoCounters {
    pub fn record_read(&self, blocks: u64) {
        self.read_ops.fetch_add(1, Ordering::Relaxed);
        self.blocks_read.fetch_add(blocks, Ordering::Relaxed);
    }

    pub fn record_write(&self, blocks: u64) {
        self.write_ops.fetch_add(1, Ordering::Relaxed);
        self.blocks_written.fetch_add(blocks, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> IoCounts {
        IoCounts {
            read_ops: self.read_ops.load(Ordering::Relaxed),
            write_ops: self.write_ops.load(Ordering::Relaxed),
            blocks_read: self.blocks_read.load(Ordering::Relaxed),
            blocks_written: self.blocks_written.load(Ordering::Relaxed),
        }
    }
}

/// Block-granular storage. Individual block writes are atomic; no ordering is
/// guaranteed between concurrent writers to the same block.
pub trait BlockStore: Send + Sync {
    fn geometry(&self) -> VolumeGeometry;

    /// Returns `count * block_size` bytes starting at `addr`.
    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError>;

    /// Writes `data` (a multiple of `block_size` long) starting at `addr`.
    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError>;

    fn io_counts(&self) -> IoCounts;
}

pub type VolumeHandle = Arc<dyn BlockStore>;

pub(crate) fn check_range(
    geom: &VolumeGeometry,
    addr: BlockAddr,
    count: u64,
) -> Result<(), VolumeError> {
    if addr.0.checked_add(count).map_or(true, |e| e > geom.block_count) {
        return Err(VolumeError::OutOfRange {
            start: addr.0,
            count,
            block_count: geom.block_count,
        });
    }
    Ok(())
}

pub(crate) fn check_aligned(geom: &VolumeGeometry, data: &[u8]) -> Result<u64, VolumeError> {
    if data.is_empty() || data.len() % geom.block_size as usize != 0 {
        return Err(VolumeError::Misaligned {
            len: data.len(),
            block_size: geom.block_size,
        });
    }
    Ok((data.len() / geom.block_size as usize) as u64)
}
