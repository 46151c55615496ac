//! The store: write path, flush by offset array, leveled compaction with
//! per-level placement, and crash recovery.
//!
//! ## Write path
//! `put`/`delete` append one WAL record, remember its byte offset in the
//! active MemTable, and rotate the table once it reaches its byte budget.
//!
//! ## Flush
//! A flush turns the oldest immutable MemTable into a level-0 table. The
//! WAL is synced first; then — because every entry already sits in the
//! log — the table is registered *by reference*: the MANIFEST edit
//! carries only the WAL span and the offset array (record positions in
//! ascending key order) while the initiator retains the entries in
//! memory. Key-value payloads do not move again. When the retained-table
//! budget is exhausted, the flush instead materializes an ordinary table
//! file by running the log recycler at the configured level-0 site.
//!
//! ## Compaction
//! Victims merge into the next level through the merge stub at the
//! per-level configured site, with an identical local fallback. WAL-backed
//! victims are read straight from the log (each block exactly once);
//! outputs are preallocated by the initiator, written under the task
//! lease, and committed in one MANIFEST edit that also advances the WAL
//! release point. Once nothing references the log it is reset to zero
//! length.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use offload_core::extentfs::{ExtentFs, FsError};
use offload_core::offloader::OffloaderError;
use offload_core::{BlockRange, EngineClient, ExecutionSite, Ino, TaskOffloader, TaskSpec};
use thiserror::Error;

use crate::config::{DbConfig, Maintenance, WalSyncMode};
use crate::manifest::{L0Backing, Manifest, ManifestEdit, ManifestError, SstMeta, VersionState};
use crate::memtable::{MemEntry, MemTable, Op};
use crate::sstable::{self, SstError, SstInfo, TableRef};
use crate::stubs::{self, MergeArgs, MergeInputArg, STUB_LOG_RECYCLE, STUB_MERGE};
use crate::wal::{self, WalError, WalFile, WalRecord};

const WAL_NAME: &str = "wal";
const SST_PREFIX: &str = "sst-";
/// Writers stall once this many immutable MemTables queue up (thread
/// maintenance only; sync maintenance drains inline).
const MAX_IMMUTABLES: usize = 4;
/// Upper bound on maintenance steps per convergence loop; hitting it
/// means a trigger refuses to clear.
const MAINTENANCE_STEP_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("db corrupt: {0}")]
    Corrupt(String),
    #[error("db unrecoverable: {0}")]
    Unrecoverable(String),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("task failed: {0}")]
    Task(String),
    #[error("bad argument: {0}")]
    InvalidArgument(String),
}

impl From<WalError> for DbError {
    fn from(e: WalError) -> Self {
        match e {
            WalError::Corrupt(m) => DbError::Corrupt(m),
            WalError::Fs(f) => DbError::Fs(f),
        }
    }
}

impl From<ManifestError> for DbError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Corrupt(m) => DbError::Corrupt(m),
            ManifestError::Unrecoverable(m) => DbError::Unrecoverable(m),
            ManifestError::Fs(f) => DbError::Fs(f),
        }
    }
}

impl From<SstError> for DbError {
    fn from(e: SstError) -> Self {
        match e {
            SstError::Corrupt(m) => DbError::Corrupt(m),
            SstError::Fs(f) => DbError::Fs(f),
        }
    }
}

impl From<OffloaderError> for DbError {
    fn from(e: OffloaderError) -> Self {
        match e {
            OffloaderError::Fs(f) => DbError::Fs(f),
            other => DbError::Task(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, DbError>;

/// Monotonic operation and maintenance counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DbStats {
    pub puts: u64,
    pub deletes: u64,
    pub gets: u64,
    pub scans: u64,
    pub flushes: u64,
    pub compactions: u64,
    /// WAL frame bytes appended (before padding).
    pub wal_frame_bytes: u64,
    /// WAL bytes written by syncs (frames plus block padding).
    pub wal_synced_bytes: u64,
    /// Point reads served by a retained WAL-backed level-0 table.
    pub l0_cache_hits: u64,
    /// Writer stalls on a full immutable queue (thread maintenance).
    pub stalls: u64,
    /// Total time writers spent stalled, in microseconds.
    pub stall_us: u64,
    /// Where maintenance tasks actually ran.
    pub site_local: u64,
    pub site_target: u64,
    pub site_peer: u64,
}

struct DbState {
    fs: Arc<ExtentFs>,
    cfg: DbConfig,
    offloader: Arc<TaskOffloader>,
    wal: WalFile,
    manifest: Manifest,
    version: VersionState,
    active: MemTable,
    immutables: VecDeque<MemTable>,
    /// Entries of every live WAL-backed level-0 table, by table id.
    l0_cache: HashMap<u64, Arc<MemTable>>,
    /// Round-robin compaction cursor per level: the largest key of the
    /// last victim picked there.
    cursors: Vec<Vec<u8>>,
    next_seq: u64,
    stats: DbStats,
    background_error: Option<String>,
    shutdown: bool,
}

struct DbShared {
    state: Mutex<DbState>,
    /// Wakes the maintenance worker.
    work: Condvar,
    /// Wakes writers waiting for the worker to drain.
    idle: Condvar,
}

pub struct Db {
    shared: Arc<DbShared>,
    worker: Option<JoinHandle<()>>,
}

impl Db {
    /// Opens (or creates) a store on `fs`. `clients[0]` is the storage
    /// target's engine, later entries are peers; pass an empty vector for
    /// purely local operation.
    pub fn open(
        fs: Arc<ExtentFs>,
        cfg: DbConfig,
        clients: Vec<Arc<EngineClient>>,
    ) -> Result<Db> {
        cfg.validate()
            .map_err(|e| DbError::InvalidArgument(e.to_string()))?;
        let offloader = Arc::new(TaskOffloader::new(Arc::clone(&fs), clients));
        let (manifest, version) = Manifest::open(Arc::clone(&fs), cfg.levels)?;
        let wal = WalFile::open(Arc::clone(&fs), WAL_NAME)?;

        let mut state = DbState {
            fs,
            cursors: vec![Vec::new(); cfg.levels],
            cfg,
            offloader,
            wal,
            manifest,
            version,
            active: MemTable::new(),
            immutables: VecDeque::new(),
            l0_cache: HashMap::new(),
            next_seq: 1,
            stats: DbStats::default(),
            background_error: None,
            shutdown: false,
        };
        state.recover()?;

        let shared = Arc::new(DbShared {
            state: Mutex::new(state),
            work: Condvar::new(),
            idle: Condvar::new(),
        });
        let worker = match shared.state.lock().unwrap().cfg.maintenance {
            Maintenance::Sync => None,
            Maintenance::Thread => {
                let shared = Arc::clone(&shared);
                Some(std::thread::spawn(move || Self::worker_loop(&shared)))
            }
        };
        Ok(Db { shared, worker })
    }

    /// Opens with no remote engines: every task runs as its own fallback.
    pub fn open_local(fs: Arc<ExtentFs>, cfg: DbConfig) -> Result<Db> {
        Self::open(fs, cfg, Vec::new())
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        self.write_op(key, Op::Put(value.to_vec()))
    }

    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.write_op(key, Op::Delete)
    }

    fn write_op(&self, key: &[u8], op: Op) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        if let Some(msg) = &st.background_error {
            return Err(DbError::Task(msg.clone()));
        }
        if key.is_empty() || key.len() > st.cfg.key_max {
            return Err(DbError::InvalidArgument(format!(
                "key length {} outside 1..={}",
                key.len(),
                st.cfg.key_max
            )));
        }
        if op.value_len() > st.cfg.value_max {
            return Err(DbError::InvalidArgument(format!(
                "value length {} exceeds {}",
                op.value_len(),
                st.cfg.value_max
            )));
        }

        let seq = st.next_seq;
        st.next_seq += 1;
        let rec = match &op {
            Op::Put(v) => WalRecord::put(seq, key, v),
            Op::Delete => WalRecord::delete(seq, key),
        };
        st.stats.wal_frame_bytes += rec.encoded_len();
        let offset = st.wal.append(&rec);
        if st.cfg.wal_sync == WalSyncMode::Each {
            let n = st.wal.sync()?;
            st.stats.wal_synced_bytes += n;
        }
        match op {
            Op::Put(_) => st.stats.puts += 1,
            Op::Delete => st.stats.deletes += 1,
        }
        st.active.insert(
            key.to_vec(),
            MemEntry {
                seq,
                wal_offset: offset,
                op,
            },
        );
        if st.active.approx_bytes() >= st.cfg.memtable_bytes {
            let full = std::mem::take(&mut st.active);
            st.immutables.push_back(full);
        }

        match st.cfg.maintenance {
            Maintenance::Sync => st.maintain_to_quiescence()?,
            Maintenance::Thread => {
                if !st.immutables.is_empty() {
                    self.shared.work.notify_all();
                }
                while st.immutables.len() >= MAX_IMMUTABLES && st.background_error.is_none() {
                    st.stats.stalls += 1;
                    let stalled_at = std::time::Instant::now();
                    st = self.shared.idle.wait(st).unwrap();
                    st.stats.stall_us += stalled_at.elapsed().as_micros() as u64;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let mut st = self.shared.state.lock().unwrap();
        st.stats.gets += 1;
        let (found, l0_hit) = lookup(&st, key)?;
        if l0_hit {
            st.stats.l0_cache_hits += 1;
        }
        Ok(match found {
            Found::Value(v) => Some(v),
            Found::Tombstone | Found::Missing => None,
        })
    }

    /// Key-ordered entries with `key >= start`, up to `limit`. Tombstones
    /// are resolved away.
    pub fn scan(&self, start: &[u8], limit: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut st = self.shared.state.lock().unwrap();
        st.stats.scans += 1;
        gather(&st, start, limit)
    }

    /// Makes every acknowledged write durable in the log.
    pub fn sync(&self) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        let n = st.wal.sync()?;
        st.stats.wal_synced_bytes += n;
        Ok(())
    }

    /// Rotates the active MemTable (if non-empty) and flushes every
    /// immutable into level 0. Does not compact.
    pub fn flush(&self) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        if !st.active.is_empty() {
            let full = std::mem::take(&mut st.active);
            st.immutables.push_back(full);
        }
        while !st.immutables.is_empty() {
            st.flush_one()?;
        }
        Ok(())
    }

    /// Runs flushes and compactions until no trigger fires.
    pub fn maintain(&self) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        st.maintain_to_quiescence()
    }

    /// Compacts `level` into `level + 1` regardless of triggers. Returns
    /// false when the level is empty.
    pub fn compact_level(&self, level: usize) -> Result<bool> {
        let mut st = self.shared.state.lock().unwrap();
        if level + 1 >= st.cfg.levels {
            return Err(DbError::InvalidArgument(format!(
                "cannot compact level {level} of {}",
                st.cfg.levels
            )));
        }
        st.compact_locked(level)
    }

    /// Blocks until no maintenance is pending (thread mode); drains
    /// inline under sync maintenance.
    pub fn wait_idle(&self) -> Result<()> {
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(msg) = &st.background_error {
                return Err(DbError::Task(msg.clone()));
            }
            if st.immutables.is_empty() && st.pick_compaction().is_none() {
                return Ok(());
            }
            if self.worker.is_none() {
                st.maintain_to_quiescence()?;
            } else {
                st = self.shared.idle.wait(st).unwrap();
            }
        }
    }

    pub fn stats(&self) -> DbStats {
        self.shared.state.lock().unwrap().stats
    }

    /// Snapshot of the table hierarchy.
    pub fn version_snapshot(&self) -> VersionState {
        self.shared.state.lock().unwrap().version.clone()
    }

    /// `(synced, pending, released)` byte positions of the log.
    pub fn wal_status(&self) -> (u64, u64, u64) {
        let st = self.shared.state.lock().unwrap();
        (
            st.wal.synced_len(),
            st.wal.pending_bytes(),
            st.version.wal_released_up_to,
        )
    }

    /// Ids of level-0 tables currently retained in memory.
    pub fn retained_l0_ids(&self) -> Vec<u64> {
        let st = self.shared.state.lock().unwrap();
        let mut ids: Vec<u64> = st.l0_cache.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn fs(&self) -> Arc<ExtentFs> {
        Arc::clone(&self.shared.state.lock().unwrap().fs)
    }

    pub fn config(&self) -> DbConfig {
        self.shared.state.lock().unwrap().cfg.clone()
    }

    fn worker_loop(shared: &DbShared) {
        loop {
            let mut st = shared.state.lock().unwrap();
            loop {
                if st.shutdown {
                    return;
                }
                if st.background_error.is_none() && st.needs_work() {
                    break;
                }
                st = shared.work.wait(st).unwrap();
            }
            if let Err(e) = st.step() {
                st.background_error = Some(e.to_string());
            }
            shared.idle.notify_all();
        }
    }
}

impl Drop for Db {
    fn drop(&mut self) {
        if let Some(handle) = self.worker.take() {
            self.shared.state.lock().unwrap().shutdown = true;
            self.shared.work.notify_all();
            let _ = handle.join();
        }
    }
}

enum Found {
    Value(Vec<u8>),
    Tombstone,
    Missing,
}

fn entry_found(op: &Op) -> Found {
    match op {
        Op::Put(v) => Found::Value(v.clone()),
        Op::Delete => Found::Tombstone,
    }
}

/// Point lookup in precedence order: active, immutables newest-first,
/// level 0 newest-first, then one candidate table per deeper level.
/// Returns whether a retained level-0 table answered.
fn lookup(st: &DbState, key: &[u8]) -> Result<(Found, bool)> {
    if let Some(e) = st.active.get(key) {
        return Ok((entry_found(&e.op), false));
    }
    for mt in st.immutables.iter().rev() {
        if let Some(e) = mt.get(key) {
            return Ok((entry_found(&e.op), false));
        }
    }
    for meta in st.version.levels[0].iter().rev() {
        if !meta.covers(key) {
            continue;
        }
        match &meta.backing {
            L0Backing::Wal { .. } => {
                let table = st.l0_cache.get(&meta.id).ok_or_else(|| {
                    DbError::Corrupt(format!("level-0 table {} has no retained entries", meta.id))
                })?;
                if let Some(e) = table.get(key) {
                    return Ok((entry_found(&e.op), true));
                }
            }
            L0Backing::Materialized => {
                let t = TableRef {
                    ino: meta.ino,
                    data_bytes: meta.data_bytes,
                    entry_count: meta.entry_count,
                };
                if let Some((_seq, op)) = sstable::get(&st.fs, t, key)? {
                    return Ok((entry_found(&op), false));
                }
            }
        }
    }
    for level in st.version.levels.iter().skip(1) {
        let idx = level.partition_point(|m| m.smallest.as_slice() <= key);
        if idx == 0 {
            continue;
        }
        let meta = &level[idx - 1];
        if !meta.covers(key) {
            continue;
        }
        let t = TableRef {
            ino: meta.ino,
            data_bytes: meta.data_bytes,
            entry_count: meta.entry_count,
        };
        if let Some((_seq, op)) = sstable::get(&st.fs, t, key)? {
            return Ok((entry_found(&op), false));
        }
    }
    Ok((Found::Missing, false))
}

/// Merges every source into one key-ordered view, newest sequence wins.
fn gather(st: &DbState, start: &[u8], limit: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    let mut acc: BTreeMap<Vec<u8>, (u64, Op)> = BTreeMap::new();
    let consider = |acc: &mut BTreeMap<Vec<u8>, (u64, Op)>, key: &[u8], seq: u64, op: Op| {
        match acc.get(key) {
            Some((existing, _)) if *existing >= seq => {}
            _ => {
                acc.insert(key.to_vec(), (seq, op));
            }
        }
    };
    for (key, e) in st.active.range_from(start) {
        consider(&mut acc, key, e.seq, e.op.clone());
    }
    for mt in &st.immutables {
        for (key, e) in mt.range_from(start) {
            consider(&mut acc, key, e.seq, e.op.clone());
        }
    }
    for meta in st.version.live_tables() {
        if meta.largest.as_slice() < start {
            continue;
        }
        match &meta.backing {
            L0Backing::Wal { .. } => {
                let table = st.l0_cache.get(&meta.id).ok_or_else(|| {
                    DbError::Corrupt(format!("level-0 table {} has no retained entries", meta.id))
                })?;
                for (key, e) in table.range_from(start) {
                    consider(&mut acc, key, e.seq, e.op.clone());
                }
            }
            L0Backing::Materialized => {
                let t = TableRef {
                    ino: meta.ino,
                    data_bytes: meta.data_bytes,
                    entry_count: meta.entry_count,
                };
                for (key, seq, op) in sstable::iter_from(&st.fs, t, start)? {
                    consider(&mut acc, &key, seq, op);
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .filter_map(|(key, (_seq, op))| match op {
            Op::Put(v) => Some((key, v)),
            Op::Delete => None,
        })
        .take(limit)
        .collect())
}

impl DbState {
    // ---- recovery ----------------------------------------------------

    /// Rebuilds in-memory state from the MANIFEST and the log: retained
    /// level-0 tables come back from their offset arrays, unflushed
    /// records refill the active MemTable, and unreferenced table files
    /// are reclaimed.
    fn recover(&mut self) -> Result<()> {
        for meta in self.version.live_tables() {
            self.next_seq = self.next_seq.max(meta.max_seq + 1);
        }

        // Integrity of materialized tables: footer parses, crc holds.
        for meta in self.version.live_tables() {
            if meta.is_wal_backed() {
                continue;
            }
            let (size, _) = self.fs.stat(meta.ino)?;
            if size != meta.file_bytes {
                return Err(DbError::Corrupt(format!(
                    "table {}: file is {size} bytes, manifest says {}",
                    meta.id, meta.file_bytes
                )));
            }
            let info = sstable::read_info(&self.fs, meta.ino, meta.file_bytes)?;
            if info.entry_count != meta.entry_count || info.data_bytes != meta.data_bytes {
                return Err(DbError::Corrupt(format!(
                    "table {}: footer disagrees with manifest",
                    meta.id
                )));
            }
        }

        // Which replayed offsets belong to retained level-0 tables.
        let mut owned: HashMap<u64, u64> = HashMap::new();
        for meta in &self.version.levels[0] {
            if let L0Backing::Wal { offsets, .. } = &meta.backing {
                for off in offsets {
                    owned.insert(*off, meta.id);
                }
            }
        }
        let max_flushed_seq = self.version.levels[0]
            .iter()
            .map(|m| m.max_seq)
            .max();

        let (records, _end) = wal::replay(&self.fs, self.wal.ino(), self.version.wal_released_up_to)?;
        let mut rebuilt: HashMap<u64, MemTable> = HashMap::new();
        for (offset, rec) in records {
            self.next_seq = self.next_seq.max(rec.seq + 1);
            if let Some(id) = owned.get(&offset) {
                rebuilt.entry(*id).or_default().insert(
                    rec.key,
                    MemEntry {
                        seq: rec.seq,
                        wal_offset: offset,
                        op: if rec.op == wal::OP_PUT {
                            Op::Put(rec.value)
                        } else {
                            Op::Delete
                        },
                    },
                );
            } else if matches!(max_flushed_seq, Some(m) if rec.seq <= m) {
                // Flushed but unreferenced: superseded within its own
                // generation, or materialized already.
            } else {
                self.active.insert(
                    rec.key,
                    MemEntry {
                        seq: rec.seq,
                        wal_offset: offset,
                        op: if rec.op == wal::OP_PUT {
                            Op::Put(rec.value)
                        } else {
                            Op::Delete
                        },
                    },
                );
                if self.active.approx_bytes() >= self.cfg.memtable_bytes {
                    let full = std::mem::take(&mut self.active);
                    self.immutables.push_back(full);
                }
            }
        }

        for meta in &self.version.levels[0] {
            let L0Backing::Wal { offsets, .. } = &meta.backing else {
                continue;
            };
            let table = rebuilt.remove(&meta.id).unwrap_or_default();
            if table.len() != offsets.len() || table.len() as u32 != meta.entry_count {
                return Err(DbError::Corrupt(format!(
                    "level-0 table {}: rebuilt {} of {} entries from the log",
                    meta.id,
                    table.len(),
                    meta.entry_count
                )));
            }
            if table.key_bounds() != Some((meta.smallest.as_slice(), meta.largest.as_slice())) {
                return Err(DbError::Corrupt(format!(
                    "level-0 table {}: rebuilt key bounds disagree with manifest",
                    meta.id
                )));
            }
            self.l0_cache.insert(meta.id, Arc::new(table));
        }

        // Reclaim table files no edit references (crash between writing
        // compaction outputs and committing, or between committing and
        // deleting victims).
        let live: Vec<Ino> = self
            .version
            .live_tables()
            .filter(|m| !m.is_wal_backed())
            .map(|m| m.ino)
            .collect();
        for (name, ino) in self.fs.list_files() {
            if name.starts_with(SST_PREFIX) && !live.contains(&ino) {
                self.fs.delete_file(ino)?;
            }
        }
        Ok(())
    }

    // ---- maintenance -------------------------------------------------

    fn needs_work(&self) -> bool {
        !self.immutables.is_empty() || self.pick_compaction().is_some()
    }

    /// Lowest level whose trigger fires, flushes first.
    fn pick_compaction(&self) -> Option<usize> {
        if self.version.levels[0].len() >= self.cfg.l0_trigger {
            return Some(0);
        }
        for l in 1..self.cfg.levels - 1 {
            let bytes: u64 = self.version.levels[l].iter().map(|m| m.data_bytes).sum();
            if bytes > self.cfg.level_budget(l) {
                return Some(l);
            }
        }
        None
    }

    /// One maintenance step; false when nothing was pending.
    fn step(&mut self) -> Result<bool> {
        if !self.immutables.is_empty() {
            self.flush_one()?;
            return Ok(true);
        }
        if let Some(l) = self.pick_compaction() {
            self.compact_locked(l)?;
            return Ok(true);
        }
        self.maybe_reset_wal()?;
        Ok(false)
    }

    fn maintain_to_quiescence(&mut self) -> Result<()> {
        for _ in 0..MAINTENANCE_STEP_CAP {
            if !self.step()? {
                return Ok(());
            }
        }
        Err(DbError::Unrecoverable(
            "maintenance did not converge".into(),
        ))
    }

    /// Appends and applies one edit; the append is the commit point.
    fn commit(&mut self, edit: ManifestEdit) -> Result<()> {
        self.manifest.append(&edit)?;
        self.version.apply(&edit)?;
        Ok(())
    }

    /// Smallest WAL offset any live structure still needs, given the
    /// level-0 list after the pending edit.
    fn min_live_wal_ref<'a>(
        &self,
        l0_after: impl Iterator<Item = &'a SstMeta>,
    ) -> Option<u64> {
        let mut min: Option<u64> = None;
        let mut fold = |v: u64| min = Some(min.map_or(v, |m: u64| m.min(v)));
        for meta in l0_after {
            if let L0Backing::Wal { lo, .. } = &meta.backing {
                fold(*lo);
            }
        }
        for mt in &self.immutables {
            if let Some(lo) = mt.min_wal_offset() {
                fold(lo);
            }
        }
        if let Some(lo) = self.active.min_wal_offset() {
            fold(lo);
        }
        min
    }

    fn released_after<'a>(&self, l0_after: impl Iterator<Item = &'a SstMeta>) -> u64 {
        let floor = self
            .min_live_wal_ref(l0_after)
            .unwrap_or_else(|| self.wal.next_offset());
        floor.max(self.version.wal_released_up_to)
    }

    fn note_site(&mut self, site: ExecutionSite) {
        match site {
            ExecutionSite::Local => self.stats.site_local += 1,
            ExecutionSite::Target => self.stats.site_target += 1,
            ExecutionSite::Peer => self.stats.site_peer += 1,
        }
    }

    // ---- flush -------------------------------------------------------

    /// Installs the oldest immutable MemTable as a level-0 table.
    fn flush_one(&mut self) -> Result<()> {
        let Some(mt) = self.immutables.front() else {
            return Ok(());
        };
        if mt.is_empty() {
            self.immutables.pop_front();
            return Ok(());
        }
        let n = self.wal.sync()?;
        self.stats.wal_synced_bytes += n;

        let mt = self.immutables.front().cloned().expect("checked non-empty");
        let id = self.version.next_sst_id;
        let retained: u64 = self.l0_cache.values().map(|t| t.approx_bytes()).sum();
        let meta = if retained + mt.approx_bytes() <= self.cfg.l0_cache_bytes {
            self.wal_backed_meta(&mt, id)
        } else {
            self.materialize_l0(&mt, id)?
        };
        let wal_backed = meta.is_wal_backed();

        let mut l0_after: Vec<&SstMeta> = self.version.levels[0].iter().collect();
        l0_after.push(&meta);
        let released = {
            // The flushed table keeps its span referenced; active and the
            // *remaining* immutables are still counted conservatively via
            // the flushed table's own offsets being the smallest.
            self.released_after(l0_after.into_iter())
        };
        let edit = ManifestEdit {
            seq: self.version.last_edit_seq + 1,
            wal_released_up_to: released,
            next_sst_id: id + 1,
            deleted: Vec::new(),
            added: vec![meta],
        };
        self.commit(edit)?;
        if wal_backed {
            self.l0_cache.insert(id, Arc::new(mt));
        }
        self.immutables.pop_front();
        self.stats.flushes += 1;
        Ok(())
    }

    /// Level-0 metadata for a table whose payload stays in the log: only
    /// the span and the key-ordered offset array are recorded.
    fn wal_backed_meta(&self, mt: &MemTable, id: u64) -> SstMeta {
        let (lo, hi) = mt.wal_span().expect("non-empty");
        let (smallest, largest) = mt.key_bounds().expect("non-empty");
        let (min_seq, max_seq) = mt.seq_bounds().expect("non-empty");
        let mut data_bytes = 0u64;
        let mut max_frame = 0u32;
        for (key, e) in mt.iter() {
            let f = sstable::frame_len(key.len(), e.op.value_len());
            data_bytes += f;
            max_frame = max_frame.max(f as u32);
        }
        SstMeta {
            id,
            level: 0,
            ino: self.wal.ino(),
            file_bytes: hi - lo,
            data_bytes,
            entry_count: mt.len() as u32,
            max_frame,
            min_seq,
            max_seq,
            smallest: smallest.to_vec(),
            largest: largest.to_vec(),
            backing: L0Backing::Wal {
                lo,
                hi,
                offsets: mt.offset_array(),
            },
        }
    }

    /// Fallback for a retained-budget overflow: run the log recycler at
    /// the level-0 site and register an ordinary table file.
    fn materialize_l0(&mut self, mt: &MemTable, id: u64) -> Result<SstMeta> {
        let (lo, hi) = mt.wal_span().expect("non-empty");
        let offsets = mt.offset_array();
        let (smallest, largest) = mt.key_bounds().expect("non-empty");
        let mut data_bytes = 0u64;
        for (key, e) in mt.iter() {
            data_bytes += sstable::frame_len(key.len(), e.op.value_len());
        }
        let exact = data_bytes
            + 4 * mt.len() as u64
            + sstable::footer_len(smallest.len(), largest.len());
        // fits() projects the footer with the candidate key as largest,
        // so allow one key of slack over the exact size.
        let cap = exact + self.cfg.key_max as u64 + 64;

        let name = format!("{SST_PREFIX}{id}");
        let ino = self.fs.create_file(&name)?;
        self.fs.preallocate(ino, cap)?;
        let args = stubs::encode_recycle_args(self.wal.ino(), lo, hi, &offsets, ino, cap);
        let spec = TaskSpec {
            stub_name: STUB_LOG_RECYCLE.into(),
            read_extents: span_ranges(&self.fs, self.wal.ino(), lo, hi)?,
            write_extents: whole_file_ranges(&self.fs, ino)?,
            args,
            local_fallback: stubs::recycle_task_fn(),
        };
        let plan = self.cfg.offload_levels[0];
        let (result, site) = match self.offloader.run(&spec, &plan) {
            Ok(r) => r,
            Err(e) => {
                self.fs.delete_file(ino)?;
                return Err(e.into());
            }
        };
        self.note_site(site);
        let rows = stubs::decode_results(&result).map_err(DbError::Task)?;
        let [(out_ino, info)] = rows.as_slice() else {
            self.fs.delete_file(ino)?;
            return Err(DbError::Task(format!(
                "log recycle produced {} tables, expected 1",
                rows.len()
            )));
        };
        if *out_ino != ino || info.entry_count != mt.len() as u32 {
            self.fs.delete_file(ino)?;
            return Err(DbError::Task("log recycle result mismatch".into()));
        }
        Ok(materialized_meta(id, 0, ino, info))
    }

    // ---- compaction --------------------------------------------------

    /// Merges `level` into `level + 1`: all of level 0 plus overlapping
    /// level-1 tables, or one cursor-picked table plus its overlaps
    /// deeper down. Commits one edit and reclaims whatever it unreferenced.
    fn compact_locked(&mut self, level: usize) -> Result<bool> {
        let out_level = level + 1;
        let victims: Vec<SstMeta> = if level == 0 {
            let l0 = self.version.levels[0].clone();
            if l0.is_empty() {
                return Ok(false);
            }
            let lo = l0.iter().map(|m| m.smallest.clone()).min().unwrap();
            let hi = l0.iter().map(|m| m.largest.clone()).max().unwrap();
            let mut v = l0;
            v.extend(
                self.version.levels[1]
                    .iter()
                    .filter(|m| m.smallest <= hi && lo <= m.largest)
                    .cloned(),
            );
            v
        } else {
            let tables = &self.version.levels[level];
            if tables.is_empty() {
                return Ok(false);
            }
            let cursor = &self.cursors[level];
            let pick = tables
                .iter()
                .find(|m| m.smallest.as_slice() > cursor.as_slice())
                .unwrap_or(&tables[0])
                .clone();
            self.cursors[level] = pick.largest.clone();
            let mut v = vec![pick.clone()];
            v.extend(
                self.version.levels[out_level]
                    .iter()
                    .filter(|m| m.smallest <= pick.largest && pick.smallest <= m.largest)
                    .cloned(),
            );
            v
        };

        // Inputs and the lease that covers them.
        let mut inputs = Vec::with_capacity(victims.len());
        let mut read_extents = Vec::new();
        for meta in &victims {
            match &meta.backing {
                L0Backing::Wal { lo, hi, offsets } => {
                    inputs.push(MergeInputArg::WalBacked {
                        ino: meta.ino,
                        lo: *lo,
                        hi: *hi,
                        offsets: offsets.clone(),
                    });
                    read_extents.extend(span_ranges(&self.fs, meta.ino, *lo, *hi)?);
                }
                L0Backing::Materialized => {
                    inputs.push(MergeInputArg::Materialized {
                        ino: meta.ino,
                        data_bytes: meta.data_bytes,
                    });
                    read_extents.extend(whole_file_ranges(&self.fs, meta.ino)?);
                }
            }
        }

        // Output sizing: enough capacity per file for the target size or
        // at least two maximal frames, and enough files for every input
        // byte at worst-case packing.
        let max_in_frame = victims.iter().map(|m| m.max_frame as u64).max().unwrap();
        let overhead =
            max_in_frame + 4 + sstable::footer_len(self.cfg.key_max, self.cfg.key_max);
        let cap = self.cfg.sst_target_bytes.max(2 * overhead);
        let usable = cap - overhead;
        let est_total: u64 = victims
            .iter()
            .map(|m| m.data_bytes + 4 * m.entry_count as u64)
            .sum::<u64>()
            + 64;
        let n_out = (est_total / usable + 2) as usize;

        let base_id = self.version.next_sst_id;
        let mut outputs = Vec::with_capacity(n_out);
        let mut write_extents = Vec::new();
        for k in 0..n_out {
            let ino = self.fs.create_file(&format!("{SST_PREFIX}{}", base_id + k as u64))?;
            self.fs.preallocate(ino, cap)?;
            write_extents.extend(whole_file_ranges(&self.fs, ino)?);
            outputs.push((ino, cap));
        }

        let drop_tombstones = out_level == self.cfg.levels - 1;
        let spec = TaskSpec {
            stub_name: STUB_MERGE.into(),
            read_extents,
            write_extents,
            args: stubs::encode_merge_args(&MergeArgs {
                inputs,
                drop_tombstones,
                outputs: outputs.clone(),
            }),
            local_fallback: stubs::merge_task_fn(),
        };
        let plan = self.cfg.offload_levels[level];
        let (result, site) = match self.offloader.run(&spec, &plan) {
            Ok(r) => r,
            Err(e) => {
                for (ino, _) in &outputs {
                    self.fs.delete_file(*ino)?;
                }
                return Err(e.into());
            }
        };
        self.note_site(site);
        let rows = stubs::decode_results(&result).map_err(DbError::Task)?;

        let mut added = Vec::with_capacity(rows.len());
        for (k, (ino, info)) in rows.iter().enumerate() {
            if *ino != outputs[k].0 {
                return Err(DbError::Task(
                    "merge outputs out of order with their files".into(),
                ));
            }
            added.push(materialized_meta(
                base_id + k as u64,
                out_level as u8,
                *ino,
                info,
            ));
        }

        let victim_ids: Vec<u64> = victims.iter().map(|m| m.id).collect();
        let released = {
            let l0_after: Vec<&SstMeta> = self.version.levels[0]
                .iter()
                .filter(|m| !victim_ids.contains(&m.id))
                .collect();
            self.released_after(l0_after.into_iter())
        };
        let edit = ManifestEdit {
            seq: self.version.last_edit_seq + 1,
            wal_released_up_to: released,
            next_sst_id: base_id + rows.len() as u64,
            deleted: victim_ids.clone(),
            added,
        };
        self.commit(edit)?;

        // Reclaim what the edit unreferenced: merged-away retained
        // tables, victim files, and unused preallocated outputs.
        for meta in &victims {
            match meta.backing {
                L0Backing::Wal { .. } => {
                    self.l0_cache.remove(&meta.id);
                }
                L0Backing::Materialized => self.fs.delete_file(meta.ino)?,
            }
        }
        for (ino, _) in &outputs[rows.len()..] {
            self.fs.delete_file(*ino)?;
        }
        self.stats.compactions += 1;
        self.maybe_reset_wal()?;
        Ok(true)
    }

    /// Once nothing references the log — no retained level-0 table, no
    /// buffered writes — truncate it back to zero. The file is recreated
    /// before the edit lands: if we crash in between, replay starts at or
    /// past the (empty) file's end and finds nothing, which is the truth.
    fn maybe_reset_wal(&mut self) -> Result<()> {
        let idle = self.active.is_empty()
            && self.immutables.is_empty()
            && self.wal.pending_bytes() == 0
            && self.wal.synced_len() > 0
            && self.version.wal_released_up_to >= self.wal.synced_len()
            && self.version.levels[0].iter().all(|m| !m.is_wal_backed());
        if !idle {
            return Ok(());
        }
        self.fs.delete_file(self.wal.ino())?;
        self.wal = WalFile::open(Arc::clone(&self.fs), WAL_NAME)?;
        let edit = ManifestEdit {
            seq: self.version.last_edit_seq + 1,
            wal_released_up_to: 0,
            next_sst_id: self.version.next_sst_id,
            deleted: Vec::new(),
            added: Vec::new(),
        };
        self.commit(edit)
    }
}

fn materialized_meta(id: u64, level: u8, ino: Ino, info: &SstInfo) -> SstMeta {
    SstMeta {
        id,
        level,
        ino,
        file_bytes: info.file_bytes,
        data_bytes: info.data_bytes,
        entry_count: info.entry_count,
        max_frame: info.max_frame,
        min_seq: info.min_seq,
        max_seq: info.max_seq,
        smallest: info.smallest.clone(),
        largest: info.largest.clone(),
        backing: L0Backing::Materialized,
    }
}

/// Per-extent block ranges covering the byte span `[lo, hi)` of a file.
fn span_ranges(
    fs: &ExtentFs,
    ino: Ino,
    lo: u64,
    hi: u64,
) -> std::result::Result<Vec<(Ino, BlockRange)>, FsError> {
    let bs = fs.geometry().block_size as u64;
    let mut out = Vec::new();
    for e in fs.file_extents(ino)? {
        let e_lo = e.logical;
        let e_hi = e.logical + e.len * bs;
        let s = lo.max(e_lo);
        let t = hi.min(e_hi);
        if s >= t {
            continue;
        }
        let first = e.phys + (s - e_lo) / bs;
        let last = e.phys + (t - e_lo).div_ceil(bs);
        out.push((ino, BlockRange::new(first, last - first)));
    }
    Ok(out)
}

fn whole_file_ranges(
    fs: &ExtentFs,
    ino: Ino,
) -> std::result::Result<Vec<(Ino, BlockRange)>, FsError> {
    Ok(fs
        .file_extents(ino)?
        .into_iter()
        .map(|e| (ino, e.phys_range()))
        .collect())
}
