//! Initiator-side block cache.
//!
//! The file system itself does no caching; applications layer one in where
//! it helps. [`CachedVolume`] wraps any block store with a write-through
//! LRU of whole blocks, which the benchmarks use to measure how running
//! bulk work locally (instead of offloading it) evicts an application's
//! hot set.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::volume::{
    BlockAddr, BlockStore, IoCounters, IoCounts, VolumeError, VolumeGeometry,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

struct Cached {
    data: Vec<u8>,
    tick: u64,
}

#[derive(Default)]
struct LruInner {
    map: HashMap<u64, Cached>,
    by_tick: BTreeMap<u64, u64>,
    tick: u64,
}

impl LruInner {
    fn touch(&mut self, block: u64) {
        self.tick += 1;
        let tick = self.tick;
        if let Some(c) = self.map.get_mut(&block) {
            self.by_tick.remove(&c.tick);
            c.tick = tick;
            self.by_tick.insert(tick, block);
        }
    }

    fn insert(&mut self, block: u64, data: Vec<u8>, cap: usize) -> u64 {
        let mut evictions = 0;
        if let Some(old) = self.map.remove(&block) {
            self.by_tick.remove(&old.tick);
        }
        while self.map.len() >= cap {
            let (&t, &b) = self.by_tick.iter().next().expect("non-empty lru");
            self.by_tick.remove(&t);
            self.map.remove(&b);
            evictions += 1;
        }
        self.tick += 1;
        let tick = self.tick;
        self.map.insert(block, Cached { data, tick });
        self.by_tick.insert(tick, block);
        evictions
    }
}

/// Write-through LRU block cache in front of a volume.
pub struct CachedVolume {
    inner: Arc<dyn BlockStore>,
    capacity_blocks: usize,
    lru: Mutex<LruInner>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    counters: IoCounters,
}

impl CachedVolume {
    pub fn new(inner: Arc<dyn BlockStore>, capacity_blocks: usize) -> Self {
        assert!(capacity_blocks > 0, "cache needs at least one block");
        Self {
            inner,
            capacity_blocks,
            lru: Mutex::new(LruInner::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            counters: IoCounters::default(),
        }
    }

    pub fn cache_stats(&self) -> BlockCacheStats {
        BlockCacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    pub fn cached_blocks(&self) -> usize {
        self.lru.lock().unwrap().map.len()
    }

    /// True if the block is currently cached (does not touch LRU order).
    pub fn contains(&self, block: u64) -> bool {
        self.lru.lock().unwrap().map.contains_key(&block)
    }

    pub fn inner(&self) -> &Arc<dyn BlockStore> {
        &self.inner
    }
}

impl BlockStore for CachedVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.inner.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        let bs = self.inner.geometry().block_size as usize;
        let mut out = vec![0u8; count as usize * bs];
        // Serve cached blocks, then fetch contiguous missing runs.
        let mut missing: Vec<(u64, u64)> = Vec::new(); // (block, run len)
        {
            let mut lru = self.lru.lock().unwrap();
            for i in 0..count {
                let block = addr.0 + i;
                if let Some(c) = lru.map.get(&block) {
                    out[i as usize * bs..(i as usize + 1) * bs].copy_from_slice(&c.data);
                    lru.touch(block);
                    self.hits.fetch_add(1, Ordering::Relaxed);
                } else {
                    match missing.last_mut() {
                        Some((start, len)) if *start + *len == block => *len += 1,
                        _ => missing.push((block, 1)),
                    }
                    self.misses.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        for (start, len) in missing {
            let data = self.inner.read_blocks(BlockAddr(start), len)?;
            let mut lru = self.lru.lock().unwrap();
            for i in 0..len {
                let block_data = data[i as usize * bs..(i as usize + 1) * bs].to_vec();
                let off = ((start + i - addr.0) as usize) * bs;
                out[off..off + bs].copy_from_slice(&block_data);
                let ev = lru.insert(start + i, block_data, self.capacity_blocks);
                self.evictions.fetch_add(ev, Ordering::Relaxed);
            }
        }
        self.counters.record_read(count);
        Ok(out)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        self.inner.write_blocks(addr, data)?;
        let bs = self.inner.geometry().block_size as usize;
        let count = data.len() / bs;
        let mut lru = self.lru.lock().unwrap();
        for i in 0..count {
            let block = addr.0 + i as u64;
            // Write-through: refresh blocks already cached, do not admit
            // new ones (writes should not evict the read-hot set).
            if lru.map.contains_key(&block) {
                let slice = data[i * bs..(i + 1) * bs].to_vec();
                if let Some(c) = lru.map.get_mut(&block) {
                    c.data = slice;
                }
                lru.touch(block);
            }
        }
        self.counters.record_write(count as u64);
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        self.counters.snapshot()
    }
}
