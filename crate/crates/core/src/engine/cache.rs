//! Target-side block cache for offloaded reads.
//!
//! Entries are single blocks keyed by `(volume id, block address)`. A block
//! read by a running task is pinned for the task's duration; pinned entries
//! are never evicted. Coherence is version-based: each entry remembers the
//! file mtime it was loaded under, and a read carrying a newer mtime hint
//! bypasses the entry, reloads from the volume, and refreshes it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub volume_id: u64,
    pub addr: u64,
}

/// How a cached read was satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    /// Served from the cache; no volume I/O.
    Hit,
    /// Not cached; loaded from the volume and inserted.
    Miss,
    /// Cached but older than the caller's mtime hint; reloaded from the
    /// volume and the entry refreshed.
    StaleBypass,
    /// Loaded from the volume but not inserted (capacity 0 or no evictable
    /// space).
    Uncached,
}

struct Entry {
    data: Vec<u8>,
    load_version: u64,
    pin_count: u32,
    /// Invalidated while pinned; never served, dropped at final unpin.
    dead: bool,
    lru_tick: u64,
}

#[derive(Default)]
struct CacheInner {
    map: HashMap<CacheKey, Entry>,
    /// LRU index over unpinned, live entries: tick -> key.
    lru: BTreeMap<u64, CacheKey>,
    occupancy: u64,
    tick: u64,
}

/// Point-in-time counters; `occupancy_bytes` is the live total including
/// pinned entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub stale_bypasses: u64,
    pub evictions: u64,
    pub invalidations: u64,
    pub occupancy_bytes: u64,
    pub entries: u64,
}

/// Tracks which keys one task has pinned so they can be released together
/// when the task finishes. A task pins a key at most once; repeat reads
/// reuse the existing pin.
#[derive(Debug, Default)]
pub struct PinSession {
    keys: HashSet<CacheKey>,
}

pub struct OffloadCache {
    capacity_bytes: u64,
    inner: Mutex<CacheInner>,
    hits: AtomicU64,
    misses: AtomicU64,
    stale_bypasses: AtomicU64,
    evictions: AtomicU64,
    invalidations: AtomicU64,
}

impl OffloadCache {
    /// `capacity_bytes = 0` disables caching entirely: every read is served
    /// straight from the volume and nothing is pinned.
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            inner: Mutex::new(CacheInner::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            stale_bypasses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            invalidations: AtomicU64::new(0),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Reads one block through the cache.
    ///
    /// `min_version` is the caller's mtime hint: an entry loaded under an
    /// older version is stale and bypassed. `loader` fetches the block from
    /// the volume on miss or bypass. The key is pinned into `session` (when
    /// caching is possible) so the block survives until the task ends.
    pub fn read_block<E>(
        &self,
        session: &mut PinSession,
        key: CacheKey,
        min_version: u64,
        loader: impl FnOnce() -> Result<Vec<u8>, E>,
    ) -> Result<(Vec<u8>, CacheOutcome), E> {
        if self.capacity_bytes == 0 {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok((loader()?, CacheOutcome::Uncached));
        }

        // Fast path: serve or judge the existing entry.
        {
            let mut inner = self.inner.lock().unwrap();
            inner.tick += 1;
            let tick = inner.tick;
            if let Some(e) = inner.map.get_mut(&key) {
                if !e.dead && e.load_version >= min_version {
                    let data = e.data.clone();
                    let old = e.lru_tick;
                    e.lru_tick = tick;
                    Self::pin_locked(&mut inner, &key, session, Some(old), tick);
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok((data, CacheOutcome::Hit));
                }
            }
        }

        // Slow path: load outside the lock, then insert/refresh.
        let data = loader()?;
        let mut inner = self.inner.lock().unwrap();
        inner.tick += 1;
        let tick = inner.tick;
        let outcome = if let Some(e) = inner.map.get_mut(&key) {
            // Refresh in place (stale or made dead while we loaded).
            let was_dead = e.dead;
            e.data = data.clone();
            e.load_version = min_version.max(e.load_version);
            e.dead = false;
            let old = e.lru_tick;
            e.lru_tick = tick;
            Self::pin_locked(&mut inner, &key, session, Some(old), tick);
            if was_dead {
                self.misses.fetch_add(1, Ordering::Relaxed);
                CacheOutcome::Miss
            } else {
                self.stale_bypasses.fetch_add(1, Ordering::Relaxed);
                CacheOutcome::StaleBypass
            }
        } else if self.make_room(&mut inner, data.len() as u64) {
            inner.occupancy += data.len() as u64;
            inner.map.insert(
                key,
                Entry {
                    data: data.clone(),
                    load_version: min_version,
                    pin_count: 0,
                    dead: false,
                    lru_tick: tick,
                },
            );
            Self::pin_locked(&mut inner, &key, session, Some(tick), tick);
            self.misses.fetch_add(1, Ordering::Relaxed);
            CacheOutcome::Miss
        } else {
            // All capacity is pinned by other tasks: serve without caching.
            self.misses.fetch_add(1, Ordering::Relaxed);
            CacheOutcome::Uncached
        };
        Ok((data, outcome))
    }

    /// Evicts unpinned LRU entries until `need` more bytes fit. Returns
    /// false if that is impossible.
    fn make_room(&self, inner: &mut CacheInner, need: u64) -> bool {
        if need > self.capacity_bytes {
            return false;
        }
        while inner.occupancy + need > self.capacity_bytes {
            let Some((&tick, &key)) = inner.lru.iter().next() else {
                return false;
            };
            inner.lru.remove(&tick);
            let e = inner.map.remove(&key).expect("lru index points at entry");
            debug_assert_eq!(e.pin_count, 0);
            inner.occupancy -= e.data.len() as u64;
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
        true
    }

    /// Pins `key` for `session`, maintaining the LRU index (pinned entries
    /// leave it; unpinned entries get their tick refreshed).
    fn pin_locked(
        inner: &mut CacheInner,
        key: &CacheKey,
        session: &mut PinSession,
        old_tick: Option<u64>,
        new_tick: u64,
    ) {
        let newly_pinned = session.keys.insert(*key);
        let e = inner.map.get_mut(key).expect("entry exists");
        if let Some(t) = old_tick {
            inner.lru.remove(&t);
        }
        if newly_pinned {
            e.pin_count += 1;
        }
        if e.pin_count == 0 {
            inner.lru.insert(new_tick, *key);
        }
    }

    /// Releases every pin the session holds. Dead entries whose last pin
    /// drops are removed; live ones rejoin the LRU.
    pub fn end_session(&self, session: PinSession) {
        let mut inner = self.inner.lock().unwrap();
        for key in session.keys {
            let Some(e) = inner.map.get_mut(&key) else {
                continue;
            };
            debug_assert!(e.pin_count > 0);
            e.pin_count -= 1;
            if e.pin_count == 0 {
                if e.dead {
                    let e = inner.map.remove(&key).unwrap();
                    inner.occupancy -= e.data.len() as u64;
                } else {
                    // Rejoin the LRU at the entry's last-read tick so
                    // recency reflects actual use, not unpin order.
                    let t = e.lru_tick;
                    inner.lru.insert(t, key);
                }
            }
        }
    }

    /// Drops cached copies of the given blocks (e.g. after a write through a
    /// lease, or when the initiator frees them). Pinned entries are marked
    /// dead instead of removed and disappear at final unpin.
    pub fn invalidate(&self, keys: impl IntoIterator<Item = CacheKey>) {
        let mut inner = self.inner.lock().unwrap();
        for key in keys {
            match inner.map.get_mut(&key) {
                Some(e) if e.pin_count == 0 => {
                    let tick = e.lru_tick;
                    inner.lru.remove(&tick);
                    let e = inner.map.remove(&key).unwrap();
                    inner.occupancy -= e.data.len() as u64;
                    self.invalidations.fetch_add(1, Ordering::Relaxed);
                }
                Some(e) => {
                    e.dead = true;
                    self.invalidations.fetch_add(1, Ordering::Relaxed);
                }
                None => {}
            }
        }
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock().unwrap();
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            stale_bypasses: self.stale_bypasses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            invalidations: self.invalidations.load(Ordering::Relaxed),
            occupancy_bytes: inner.occupancy,
            entries: inner.map.len() as u64,
        }
    }

    /// Total pin count across all entries (0 when no task is running).
    pub fn total_pins(&self) -> u64 {
        let inner = self.inner.lock().unwrap();
        inner.map.values().map(|e| e.pin_count as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn key(addr: u64) -> CacheKey {
        CacheKey {
            volume_id: 1,
            addr,
        }
    }

    fn load(byte: u8) -> impl FnOnce() -> Result<Vec<u8>, Infallible> {
        move || Ok(vec![byte; 512])
    }

    #[test]
    fn miss_then_hit_then_stale_bypass() {
        let c = OffloadCache::new(1 << 20);
        let mut s = PinSession::default();
        let (d, o) = c.read_block(&mut s, key(4), 5, load(0xaa)).unwrap();
        assert_eq!((d[0], o), (0xaa, CacheOutcome::Miss));
        // Same hint: served from cache, loader not consulted.
        let (d, o) = c
            .read_block(&mut s, key(4), 5, || -> Result<Vec<u8>, Infallible> {
                panic!("must not load on hit")
            })
            .unwrap();
        assert_eq!((d[0], o), (0xaa, CacheOutcome::Hit));
        // Newer hint: bypass and refresh.
        let (d, o) = c.read_block(&mut s, key(4), 6, load(0xbb)).unwrap();
        assert_eq!((d[0], o), (0xbb, CacheOutcome::StaleBypass));
        // Now version 6 is cached.
        let (d, o) = c
            .read_block(&mut s, key(4), 6, || -> Result<Vec<u8>, Infallible> {
                panic!("refreshed entry must serve")
            })
            .unwrap();
        assert_eq!((d[0], o), (0xbb, CacheOutcome::Hit));
        c.end_session(s);
        assert_eq!(c.total_pins(), 0);
        let st = c.stats();
        assert_eq!((st.hits, st.misses, st.stale_bypasses), (2, 1, 1));
    }

    #[test]
    fn pinned_entries_survive_eviction_pressure() {
        // Room for exactly two 512 B blocks.
        let c = OffloadCache::new(1024);
        let mut s1 = PinSession::default();
        c.read_block(&mut s1, key(1), 0, load(1)).unwrap();
        c.read_block(&mut s1, key(2), 0, load(2)).unwrap();
        // A third block cannot evict pinned entries: served uncached.
        let (_, o) = c.read_block(&mut s1, key(3), 0, load(3)).unwrap();
        assert_eq!(o, CacheOutcome::Uncached);
        assert!(c.stats().occupancy_bytes <= 1024);
        c.end_session(s1);

        // Unpinned now; a new block evicts the LRU (key 1).
        let mut s2 = PinSession::default();
        let (_, o) = c.read_block(&mut s2, key(4), 0, load(4)).unwrap();
        assert_eq!(o, CacheOutcome::Miss);
        assert_eq!(c.stats().evictions, 1);
        let (_, o) = c.read_block(&mut s2, key(2), 0, load(2)).unwrap();
        assert_eq!(o, CacheOutcome::Hit, "key 2 was more recently used");
        c.end_session(s2);
        assert!(c.stats().occupancy_bytes <= 1024);
    }

    #[test]
    fn invalidate_unpinned_removes_pinned_goes_dead() {
        let c = OffloadCache::new(1 << 20);
        let mut s = PinSession::default();
        c.read_block(&mut s, key(7), 1, load(7)).unwrap();
        // Pinned: invalidation marks dead; next read must reload.
        c.invalidate([key(7)]);
        let (d, _) = c.read_block(&mut s, key(7), 1, load(8)).unwrap();
        assert_eq!(d[0], 8);
        c.end_session(s);

        let mut s = PinSession::default();
        c.read_block(&mut s, key(9), 1, load(9)).unwrap();
        c.end_session(s);
        c.invalidate([key(9)]);
        assert_eq!(c.stats().entries, 1, "only refreshed key 7 remains");
    }

    #[test]
    fn capacity_zero_disables_caching() {
        let c = OffloadCache::new(0);
        let mut s = PinSession::default();
        let (_, o) = c.read_block(&mut s, key(1), 0, load(1)).unwrap();
        assert_eq!(o, CacheOutcome::Uncached);
        let (_, o) = c.read_block(&mut s, key(1), 0, load(1)).unwrap();
        assert_eq!(o, CacheOutcome::Uncached);
        c.end_session(s);
        assert_eq!(c.stats().entries, 0);
        assert_eq!(c.stats().misses, 2);
    }

    #[test]
    fn dead_entry_dropped_at_final_unpin() {
        let c = OffloadCache::new(1 << 20);
        let mut s1 = PinSession::default();
        let mut s2 = PinSession::default();
        c.read_block(&mut s1, key(3), 0, load(1)).unwrap();
        c.read_block(&mut s2, key(3), 0, load(1)).unwrap();
        c.invalidate([key(3)]);
        c.end_session(s1);
        assert_eq!(c.stats().entries, 1, "still pinned by s2");
        c.end_session(s2);
        assert_eq!(c.stats().entries, 0);
        assert_eq!(c.stats().occupancy_bytes, 0);
    }
}
