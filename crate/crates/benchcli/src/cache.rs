//! Fixed-capacity initiator-side block cache in front of a volume.
//!
//! Read-through with per-block LRU eviction. Writes go through to the
//! backing store and refresh blocks that are already resident, but do
//! not allocate new entries — streaming writes therefore cannot evict
//! the read working set, while reads always see the latest local write.
//!
//! Coherence with writers that bypass this cache (offloaded tasks write
//! straight to the backing volume) rests on one invariant: a task may
//! only write into freshly allocated extents, and every block passes
//! through the free pool before reallocation. Attaching
//! [`CacheInvalidator`] as a file-system block listener evicts freed
//! blocks eagerly, so no stale copy can survive into a block's next
//! life.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use offload_core::extentfs::BlockEventListener;
use offload_core::volume::IoCounts;
use offload_core::{BlockAddr, BlockRange, BlockStore, VolumeError, VolumeGeometry};

struct Slot {
    data: Vec<u8>,
    tick: u64,
}

#[derive(Default)]
struct CacheState {
    blocks: HashMap<u64, Slot>,
    /// Recency index: tick -> block address, oldest first.
    order: BTreeMap<u64, u64>,
    next_tick: u64,
}

impl CacheState {
    fn touch(&mut self, addr: u64) {
        let slot = self.blocks.get_mut(&addr).expect("touched block is resident");
        self.order.remove(&slot.tick);
        slot.tick = self.next_tick;
        self.order.insert(self.next_tick, addr);
        self.next_tick += 1;
    }

    fn insert(&mut self, addr: u64, data: Vec<u8>, capacity: usize) {
        if let Some(old) = self.blocks.remove(&addr) {
            self.order.remove(&old.tick);
        }
        while self.blocks.len() >= capacity {
            let (_, victim) = self.order.pop_first().expect("cache is non-empty");
            self.blocks.remove(&victim);
        }
        self.blocks.insert(addr, Slot { data, tick: self.next_tick });
        self.order.insert(self.next_tick, addr);
        self.next_tick += 1;
    }
}

pub struct CachedVolume {
    inner: Arc<dyn BlockStore>,
    capacity_blocks: usize,
    state: Mutex<CacheState>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedVolume {
    pub fn new(inner: Arc<dyn BlockStore>, capacity_blocks: usize) -> Arc<Self> {
        assert!(capacity_blocks > 0, "cache capacity must be at least one block");
        Arc::new(Self {
            inner,
            capacity_blocks,
            state: Mutex::new(CacheState::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// (hits, misses) counted per block looked up.
    pub fn counters(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    pub fn hit_ratio(&self) -> f64 {
        let (h, m) = self.counters();
        if h + m == 0 {
            0.0
        } else {
            h as f64 / (h + m) as f64
        }
    }

    pub fn resident_blocks(&self) -> usize {
        self.state.lock().unwrap().blocks.len()
    }

    pub fn invalidate(&self, ranges: &[BlockRange]) {
        let mut st = self.state.lock().unwrap();
        for r in ranges {
            for addr in r.start..r.end() {
                if let Some(slot) = st.blocks.remove(&addr) {
                    st.order.remove(&slot.tick);
                }
            }
        }
    }
}

impl BlockStore for CachedVolume {
    fn geometry(&self) -> VolumeGeometry {
        self.inner.geometry()
    }

    fn read_blocks(&self, addr: BlockAddr, count: u64) -> Result<Vec<u8>, VolumeError> {
        let bs = self.inner.geometry().block_size as usize;
        let mut out = vec![0u8; bs * count as usize];
        let mut st = self.state.lock().unwrap();
        let mut i = 0u64;
        while i < count {
            let block = addr.0 + i;
            if st.blocks.contains_key(&block) {
                let data = st.blocks[&block].data.clone();
                out[(i as usize) * bs..][..bs].copy_from_slice(&data);
                st.touch(block);
                self.hits.fetch_add(1, Ordering::Relaxed);
                i += 1;
                continue;
            }
            // Fetch the whole run of consecutive missing blocks at once.
            let run_start = i;
            while i < count && !st.blocks.contains_key(&(addr.0 + i)) {
                i += 1;
            }
            let run = i - run_start;
            let data = self.inner.read_blocks(BlockAddr(addr.0 + run_start), run)?;
            for k in 0..run as usize {
                let chunk = data[k * bs..][..bs].to_vec();
                st.insert(addr.0 + run_start + k as u64, chunk, self.capacity_blocks);
            }
            out[(run_start as usize) * bs..][..run as usize * bs].copy_from_slice(&data);
            self.misses.fetch_add(run, Ordering::Relaxed);
        }
        Ok(out)
    }

    fn write_blocks(&self, addr: BlockAddr, data: &[u8]) -> Result<(), VolumeError> {
        self.inner.write_blocks(addr, data)?;
        let bs = self.inner.geometry().block_size as usize;
        let mut st = self.state.lock().unwrap();
        for (k, chunk) in data.chunks(bs).enumerate() {
            let block = addr.0 + k as u64;
            if let Some(slot) = st.blocks.get_mut(&block) {
                slot.data.copy_from_slice(chunk);
                st.touch(block);
            }
        }
        Ok(())
    }

    fn io_counts(&self) -> IoCounts {
        // The device-level truth: reads absorbed by the cache never reach
        // the backing store and are invisible here by design.
        self.inner.io_counts()
    }
}

/// Drops freed blocks from the cache; attach with `add_block_listener`.
pub struct CacheInvalidator(pub Arc<CachedVolume>);

impl BlockEventListener for CacheInvalidator {
    fn blocks_freed(&self, ranges: &[BlockRange]) {
        self.0.invalidate(ranges);
    }
}
