//! Lease-scoped I/O context handed to offloaded task bodies.
//!
//! A task never sees the file system: it receives a [`LeaseIo`] restricted
//! to the physical extents its lease grants. Reads are authorized against
//! the read set and (on the target) served through the offload cache; writes
//! are authorized against the write set, go straight to the volume, and
//! invalidate any cached copies. The context also tracks how many bytes were
//! produced in each write extent so lease completion can trim unused tails.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::engine::cache::{CacheKey, CacheOutcome, OffloadCache, PinSession};
use crate::extentfs::{Lease, LeaseExtent};
use crate::volume::{BlockAddr, BlockRange, BlockStore, VolumeError};

#[derive(Debug, Error)]
pub enum IoCtxError {
    #[error("lease {0} is not active")]
    NotActive(u64),
    #[error("lease {lease} does not authorize [{start}, +{len})")]
    Unauthorized { lease: u64, start: u64, len: u64 },
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// A task's view of the world: one volume, one lease.
pub struct LeaseIo {
    vol: Arc<dyn BlockStore>,
    volume_id: u64,
    lease: Lease,
    cache: Option<Arc<OffloadCache>>,
    session: Mutex<PinSession>,
    /// High-water byte mark per write-set extent, in lease order. Updated
    /// block-granularly by `offload_write`; a task that knows its exact
    /// output length overrides via `declare_written`.
    watermarks: Mutex<Vec<u64>>,
    reads: AtomicU64,
    writes: AtomicU64,
    read_bytes: AtomicU64,
    write_bytes: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

impl LeaseIo {
    /// `extra_hints` lets the submitting side carry fresher mtimes than the
    /// lease was granted with; per file, the larger value wins.
    pub fn new(
        vol: Arc<dyn BlockStore>,
        volume_id: u64,
        mut lease: Lease,
        extra_hints: &[(crate::extentfs::Ino, u64)],
        cache: Option<Arc<OffloadCache>>,
    ) -> Self {
        for &(ino, m) in extra_hints {
            match lease.mtime_hints.iter_mut().find(|(i, _)| *i == ino) {
                Some(h) => h.1 = h.1.max(m),
                None => lease.mtime_hints.push((ino, m)),
            }
        }
        let n = lease.write_set.len();
        Self {
            vol,
            volume_id,
            lease,
            cache,
            session: Mutex::new(PinSession::default()),
            watermarks: Mutex::new(vec![0; n]),
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
            read_bytes: AtomicU64::new(0),
            write_bytes: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
        }
    }

    pub fn lease(&self) -> &Lease {
        &self.lease
    }

    pub fn block_size(&self) -> u32 {
        self.vol.geometry().block_size
    }

    pub fn read_set(&self) -> &[LeaseExtent] {
        &self.lease.read_set
    }

    pub fn write_set(&self) -> &[LeaseExtent] {
        &self.lease.write_set
    }

    /// Reads `count` blocks at physical address `addr`. The range must lie
    /// inside the lease's read set.
    pub fn offload_read(&self, addr: BlockAddr, count: u32) -> Result<Vec<u8>, IoCtxError> {
        let range = BlockRange::new(addr.0, count as u64);
        self.check_active()?;
        if count == 0 {
            return Err(IoCtxError::BadArgument("zero-length read".into()));
        }
        if !self.lease.authorizes_read(&range) {
            return Err(self.unauthorized(&range));
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        let bs = self.block_size() as usize;
        self.read_bytes
            .fetch_add((count as u64) * bs as u64, Ordering::Relaxed);

        let Some(cache) = &self.cache else {
            return Ok(self.vol.read_blocks(addr, count as u64)?);
        };

        // Per-block cache walk with the owning file's mtime hint.
        let mut out = Vec::with_capacity(count as usize * bs);
        let mut session = self.session.lock().unwrap();
        for i in 0..count as u64 {
            let block = addr.0 + i;
            let hint = self.hint_for_block(block);
            let key = CacheKey {
                volume_id: self.volume_id,
                addr: block,
            };
            let vol = &self.vol;
            let (data, outcome) = cache.read_block(&mut session, key, hint, || {
                vol.read_blocks(BlockAddr(block), 1)
            })?;
            match outcome {
                CacheOutcome::Hit => {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                }
                _ => {
                    self.cache_misses.fetch_add(1, Ordering::Relaxed);
                }
            }
            out.extend_from_slice(&data);
        }
        Ok(out)
    }

    /// Writes whole blocks at physical address `addr`. The range must lie
    /// inside the lease's write set; cached copies of the blocks are
    /// dropped.
    pub fn offload_write(&self, addr: BlockAddr, data: &[u8]) -> Result<(), IoCtxError> {
        self.check_active()?;
        let bs = self.block_size() as usize;
        if data.is_empty() || data.len() % bs != 0 {
            return Err(IoCtxError::BadArgument(format!(
                "write length {} is not a positive multiple of the block size {}",
                data.len(),
                bs
            )));
        }
        let count = (data.len() / bs) as u64;
        let range = BlockRange::new(addr.0, count);
        if !self.lease.authorizes_write(&range) {
            return Err(self.unauthorized(&range));
        }
        self.vol.write_blocks(addr, data)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        self.write_bytes
            .fetch_add(data.len() as u64, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            cache.invalidate((0..count).map(|i| CacheKey {
                volume_id: self.volume_id,
                addr: addr.0 + i,
            }));
        }

        // Advance the high-water mark of every write extent this range
        // touches (block-granular; declare_written refines it).
        let mut marks = self.watermarks.lock().unwrap();
        for (i, ext) in self.lease.write_set.iter().enumerate() {
            let lo = range.start.max(ext.range.start);
            let hi = range.end().min(ext.range.end());
            if lo < hi {
                let covered = (hi - ext.range.start) * bs as u64;
                marks[i] = marks[i].max(covered);
            }
        }
        Ok(())
    }

    /// Records the exact byte count produced in write extent `index`
    /// (overriding the block-granular automatic mark).
    pub fn declare_written(&self, index: usize, bytes: u64) -> Result<(), IoCtxError> {
        let mut marks = self.watermarks.lock().unwrap();
        let Some(m) = marks.get_mut(index) else {
            return Err(IoCtxError::BadArgument(format!(
                "write extent index {} out of range ({} extents)",
                index,
                marks.len()
            )));
        };
        let ext = &self.lease.write_set[index];
        let cap = ext.range.len * self.vol.geometry().block_size as u64;
        if bytes > cap {
            return Err(IoCtxError::BadArgument(format!(
                "declared {} bytes exceeds extent capacity {}",
                bytes, cap
            )));
        }
        *m = bytes;
        Ok(())
    }

    /// Final per-write-extent byte counts, in lease order.
    pub fn bytes_written(&self) -> Vec<u64> {
        self.watermarks.lock().unwrap().clone()
    }

    /// Releases every cache pin this task holds. Called by the executor
    /// when the task body returns.
    pub fn finish(&self) {
        if let Some(cache) = &self.cache {
            let session = std::mem::take(&mut *self.session.lock().unwrap());
            cache.end_session(session);
        }
    }

    pub fn io_summary(&self) -> LeaseIoSummary {
        LeaseIoSummary {
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            read_bytes: self.read_bytes.load(Ordering::Relaxed),
            write_bytes: self.write_bytes.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
        }
    }

    fn check_active(&self) -> Result<(), IoCtxError> {
        if self.lease.is_active() {
            Ok(())
        } else {
            Err(IoCtxError::NotActive(self.lease.id.0))
        }
    }

    fn unauthorized(&self, range: &BlockRange) -> IoCtxError {
        IoCtxError::Unauthorized {
            lease: self.lease.id.0,
            start: range.start,
            len: range.len,
        }
    }

    /// The mtime hint for the file owning `block` in the read set; 0 (any
    /// cached version acceptable) when the lease carries no hint.
    fn hint_for_block(&self, block: u64) -> u64 {
        let probe = BlockRange::new(block, 1);
        self.lease
            .read_set
            .iter()
            .find(|e| e.range.contains_range(&probe))
            .and_then(|e| self.lease.hint_for(e.ino))
            .unwrap_or(0)
    }
}

/// I/O counters for one task execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LeaseIoSummary {
    pub reads: u64,
    pub writes: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Signature shared by registered stubs and their local fallbacks: the
/// lease-scoped context plus opaque arguments, returning opaque results.
pub type TaskFn = Arc<dyn Fn(&LeaseIo, &[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extentfs::{Ino, LeaseId};
    use crate::volume::{MemVolume, VolumeGeometry};

    fn setup() -> (Arc<MemVolume>, Lease) {
        let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 128).unwrap()));
        for b in 0..16u64 {
            vol.write_blocks(BlockAddr(b), &vec![b as u8; 512]).unwrap();
        }
        let lease = Lease::new(
            LeaseId(1),
            vec![LeaseExtent {
                ino: Ino(1),
                logical: 0,
                range: BlockRange::new(4, 2),
            }],
            vec![LeaseExtent {
                ino: Ino(2),
                logical: 0,
                range: BlockRange::new(8, 2),
            }],
            vec![(Ino(1), 3)],
        );
        (vol, lease)
    }

    #[test]
    fn read_inside_read_set_outside_rejected() {
        let (vol, lease) = setup();
        let ctx = LeaseIo::new(vol, 9, lease, &[], None);
        let d = ctx.offload_read(BlockAddr(4), 2).unwrap();
        assert_eq!(&d[..512], &[4u8; 512][..]);
        assert_eq!(&d[512..], &[5u8; 512][..]);
        assert!(matches!(
            ctx.offload_read(BlockAddr(5), 2),
            Err(IoCtxError::Unauthorized { .. })
        ));
        assert!(matches!(
            ctx.offload_read(BlockAddr(8), 1),
            Err(IoCtxError::Unauthorized { .. }),
        ),);
    }

    #[test]
    fn write_inside_write_set_tracks_watermark() {
        let (vol, lease) = setup();
        let ctx = LeaseIo::new(Arc::clone(&vol) as Arc<dyn BlockStore>, 9, lease, &[], None);
        ctx.offload_write(BlockAddr(8), &[0xee; 512]).unwrap();
        assert_eq!(ctx.bytes_written(), vec![512]);
        ctx.offload_write(BlockAddr(9), &[0xef; 512]).unwrap();
        assert_eq!(ctx.bytes_written(), vec![1024]);
        ctx.declare_written(0, 700).unwrap();
        assert_eq!(ctx.bytes_written(), vec![700]);
        assert!(ctx.declare_written(0, 2000).is_err());
        assert!(matches!(
            ctx.offload_write(BlockAddr(4), &[0u8; 512]),
            Err(IoCtxError::Unauthorized { .. })
        ));
        // Misaligned write length.
        assert!(matches!(
            ctx.offload_write(BlockAddr(8), &[0u8; 100]),
            Err(IoCtxError::BadArgument(_))
        ));
        assert_eq!(vol.read_blocks(BlockAddr(8), 1).unwrap(), vec![0xee; 512]);
    }

    #[test]
    fn cached_reads_pin_and_release() {
        let (vol, lease) = setup();
        let cache = Arc::new(OffloadCache::new(1 << 20));
        let ctx = LeaseIo::new(
            Arc::clone(&vol) as Arc<dyn BlockStore>,
            9,
            lease,
            &[],
            Some(Arc::clone(&cache)),
        );
        ctx.offload_read(BlockAddr(4), 2).unwrap();
        assert_eq!(cache.total_pins(), 2);
        let before = vol.io_counts().read_ops;
        ctx.offload_read(BlockAddr(4), 2).unwrap();
        assert_eq!(vol.io_counts().read_ops, before, "second read is all hits");
        assert_eq!(ctx.io_summary().cache_hits, 2);
        ctx.finish();
        assert_eq!(cache.total_pins(), 0);
    }

    #[test]
    fn write_invalidates_cached_blocks() {
        let (vol, lease) = setup();
        // Second lease that can read what the first writes.
        let read_lease = Lease::new(
            LeaseId(2),
            vec![LeaseExtent {
                ino: Ino(2),
                logical: 0,
                range: BlockRange::new(8, 2),
            }],
            vec![],
            vec![],
        );
        let cache = Arc::new(OffloadCache::new(1 << 20));
        let reader = LeaseIo::new(
            Arc::clone(&vol) as Arc<dyn BlockStore>,
            9,
            read_lease,
            &[],
            Some(Arc::clone(&cache)),
        );
        assert_eq!(reader.offload_read(BlockAddr(8), 1).unwrap(), vec![8u8; 512]);
        reader.finish();

        let writer = LeaseIo::new(
            Arc::clone(&vol) as Arc<dyn BlockStore>,
            9,
            lease,
            &[],
            Some(Arc::clone(&cache)),
        );
        writer.offload_write(BlockAddr(8), &[0x11; 512]).unwrap();
        writer.finish();

        // Same hint as before: the cache must not serve the stale copy.
        let read_lease2 = Lease::new(
            LeaseId(3),
            vec![LeaseExtent {
                ino: Ino(2),
                logical: 0,
                range: BlockRange::new(8, 2),
            }],
            vec![],
            vec![],
        );
        let reader2 = LeaseIo::new(
            Arc::clone(&vol) as Arc<dyn BlockStore>,
            9,
            read_lease2,
            &[],
            Some(Arc::clone(&cache)),
        );
        assert_eq!(
            reader2.offload_read(BlockAddr(8), 1).unwrap(),
            vec![0x11; 512]
        );
        reader2.finish();
    }

    #[test]
    fn inactive_lease_rejected() {
        let (vol, mut lease) = setup();
        lease.state = crate::extentfs::LeaseState::Completed;
        let ctx = LeaseIo::new(vol, 9, lease, &[], None);
        assert!(matches!(
            ctx.offload_read(BlockAddr(4), 1),
            Err(IoCtxError::NotActive(1))
        ));
    }
}
