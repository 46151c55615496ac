//! Test-oriented volume wrappers: write recording, crash injection, and
//! copy-on-write overlays.
//!
//! `RecordingVolume` captures every write call so a crash sweep can replay
//! arbitrary persisted prefixes of a run without re-executing the workload.
//! `CrashVolume` fails all traffic after a configured number of write calls,
//! optionally applying a torn prefix of the final write. `OverlayVolume`
//! buffers writes above a read-only base so a recovery attempt can run
//! against a crash image without disturbing it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{BlockAddr, BlockStore, IoCounts, VolumeError, VolumeGeometry};

#[derive(Debug, Clone)]
pub struct WriteRecord {
    pub addr: u64,
    pub data: Vec<u8>,
}

pub struct RecordingVolume {
    inner: Arc<dyn BlockStore>,
    log: Mutex<Vec<WriteRecord>>,
}

impl RecordingVolume {
    pub fn new(inner: Arc<dyn BlockStore>) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// All write calls observed so far, in issue order.
    pub fn take_log(&self) -> Vec<WriteRecord> {
        std::mem::take(&mut *self.log.lock().unwrap())
    }

    pub fn write_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl BlockStore for RecordingVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.inner.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        self.inner.read_blocks(addr, count)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        self.inner.write_blocks(addr, data)?;
        self.log.lock().unwrap().push(WriteRecord {
            addr: addr.0,
            data: data.to_vec(),
        });
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        self.inner.io_counts()
    }
}

/// Volume that simulates a host crash after a fixed number of write calls.
///
/// The crashing write applies its first `torn_blocks` blocks (0 for a clean
/// whole-call drop) and then every subsequent operation, reads included,
/// fails with `VolumeError::Crashed`.
pub struct CrashVolume {
    inner: Arc<dyn BlockStore>,
    writes_remaining: AtomicU64,
    torn_blocks: u64,
    crashed: AtomicBool,
}

impl CrashVolume {
    pub fn new(inner: Arc<dyn BlockStore>, writes_before_crash: u64, torn_blocks: u64) -> Self {
        Self {
            inner,
            writes_remaining: AtomicU64::new(writes_before_crash),
            torn_blocks,
            crashed: AtomicBool::new(false),
        }
    }

    pub fn crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }
}

impl BlockStore for CrashVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.inner.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        if self.crashed() {
            return Err(VolumeError::Crashed);
        }
        self.inner.read_blocks(addr, count)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        if self.crashed() {
            return Err(VolumeError::Crashed);
        }
        let prev = self.writes_remaining.fetch_update(
            Ordering::SeqCst,
            Ordering::SeqCst,
            |n| n.checked_sub(1),
        );
        match prev {
            Ok(_) => self.inner.write_blocks(addr, data),
            Err(_) => {
                self.crashed.store(true, Ordering::SeqCst);
                if self.torn_blocks > 0 {
                    let bs = self.inner.geometry().block_size as usize;
                    let keep = (self.torn_blocks as usize * bs).min(data.len());
                    if keep > 0 {
                        self.inner.write_blocks(addr, &data[..keep])?;
                    }
                }
                Err(VolumeError::Crashed)
            }
        }
    }

    fn io_counts(&self) -> IoCounts {
        self.inner.io_counts()
    }
}

/// Copy-on-write view over a base volume: reads fall through to the base
/// except where a write has shadowed a block, writes never reach the base.
pub struct OverlayVolume {
    base: Arc<dyn BlockStore>,
    delta: Mutex<HashMap<u64, Vec<u8>>>,
    counts: Mutex<IoCounts>,
}

impl OverlayVolume {
    pub fn new(base: Arc<dyn BlockStore>) -> Self {
        Self {
            base,
            delta: Mutex::new(HashMap::new()),
            counts: Mutex::new(IoCounts::default()),
        }
    }

    /// Number of blocks shadowing the base.
    pub fn delta_blocks(&self) -> usize {
        self.delta.lock().unwrap().len()
    }
}

impl BlockStore for OverlayVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.base.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        let mut data = self.base.read_blocks(addr, count)?;
        let bs = self.base.geometry().block_size as usize;
        let delta = self.delta.lock().unwrap();
        if !delta.is_empty() {
            for i in 0..count {
                if let Some(block) = delta.get(&(addr.0 + i)) {
                    let at = i as usize * bs;
                    data[at..at + bs].copy_from_slice(block);
                }
            }
        }
        let mut c = self.counts.lock().unwrap();
        c.read_ops += 1;
        c.blocks_read += count;
        Ok(data)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        let geom = self.base.geometry();
        let bs = geom.block_size as usize;
        if data.is_empty() || data.len() % bs != 0 {
            return Err(VolumeError::Misaligned {
                len: data.len(),
                block_size: geom.block_size,
            });
        }
        let count = (data.len() / bs) as u64;
        if addr.0 + count > geom.block_count {
            return Err(VolumeError::OutOfRange {
                start: addr.0,
                count,
                block_count: geom.block_count,
            });
        }
        let mut delta = self.delta.lock().unwrap();
        for (i, chunk) in data.chunks_exact(bs).enumerate() {
            delta.insert(addr.0 + i as u64, chunk.to_vec());
        }
        let mut c = self.counts.lock().unwrap();
        c.write_ops += 1;
        c.blocks_written += count;
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        *self.counts.lock().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::MemVolume;

    fn mem(blocks: u64) -> Arc<MemVolume> {
        Arc::new(MemVolume::new(VolumeGeometry::new(512, blocks).unwrap()))
    }

    #[test]
    fn recording_captures_writes_in_order() {
        let v = RecordingVolume::new(mem(8));
        v.write_blocks(BlockAddr(3), &[1u8; 512]).unwrap();
        v.write_blocks(BlockAddr(0), &[2u8; 1024]).unwrap();
        let log = v.take_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].addr, 3);
        assert_eq!(log[0].data.len(), 512);
        assert_eq!(log[1].addr, 0);
        assert_eq!(log[1].data, vec![2u8; 1024]);
        assert_eq!(v.write_count(), 0);
    }

    #[test]
    fn crash_after_budget_drops_whole_call() {
        let inner = mem(8);
        let v = CrashVolume::new(Arc::clone(&inner) as _, 2, 0);
        v.write_blocks(BlockAddr(0), &[1u8; 512]).unwrap();
        v.write_blocks(BlockAddr(1), &[2u8; 512]).unwrap();
        let err = v.write_blocks(BlockAddr(2), &[3u8; 512]).unwrap_err();
        assert!(matches!(err, VolumeError::Crashed));
        // Crashing write left no trace; later ops all fail.
        assert!(inner.read_blocks(BlockAddr(2), 1).unwrap().iter().all(|&b| b == 0));
        assert!(matches!(
            v.read_blocks(BlockAddr(0), 1),
            Err(VolumeError::Crashed)
        ));
    }

    #[test]
    fn overlay_shadows_without_touching_base() {
        let base = mem(8);
        base.write_blocks(BlockAddr(0), &[1u8; 1024]).unwrap();
        let v = OverlayVolume::new(Arc::clone(&base) as _);
        assert_eq!(v.read_blocks(BlockAddr(0), 2).unwrap(), {
            let mut d = vec![1u8; 1024];
            d.truncate(1024);
            d
        });
        v.write_blocks(BlockAddr(1), &[9u8; 512]).unwrap();
        let merged = v.read_blocks(BlockAddr(0), 2).unwrap();
        assert_eq!(&merged[..512], &[1u8; 512][..]);
        assert_eq!(&merged[512..], &[9u8; 512][..]);
        // Base unchanged.
        assert_eq!(base.read_blocks(BlockAddr(1), 1).unwrap(), vec![1u8; 512]);
        assert_eq!(v.delta_blocks(), 1);
        assert!(v.write_blocks(BlockAddr(7), &[0u8; 1024]).is_err());
    }

    #[test]
    fn torn_crash_applies_block_prefix() {
        let inner = mem(8);
        let v = CrashVolume::new(Arc::clone(&inner) as _, 0, 1);
        let mut data = vec![7u8; 512];
        data.extend_from_slice(&[9u8; 512]);
        assert!(v.write_blocks(BlockAddr(4), &data).is_err());
        assert_eq!(inner.read_blocks(BlockAddr(4), 1).unwrap(), vec![7u8; 512]);
        assert!(inner.read_blocks(BlockAddr(5), 1).unwrap().iter().all(|&b| b == 0));
    }
}
