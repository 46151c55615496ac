//! Read-only preprocessing offload over leased file extents.
//!
//! A [`PrepBatch`] names a set of files, a transform, and a split of the
//! work across execution sites (initiator-local, target, peer). Every
//! item runs the same pure pipeline — [`transform`] — so where an item
//! executes is a placement decision only: digests are invariant under
//! any split. The per-item site assignment is deterministic given the
//! batch seed.
//!
//! Placement and safety properties:
//!
//! * Leases are **read-only**: the write set is always empty, so a batch
//!   can never change the volume and concurrent batches never conflict.
//! * Each item is one offload request. A rejected submission costs one
//!   round trip and then falls back to local execution under the same
//!   lease, so a fully rejecting target degrades to all-local plus one
//!   round trip per attempted item.
//! * The offload cache is never attached for local runs, and engines
//!   serving this workload should run with the cache disabled: batch
//!   inputs stream through once, so cached blocks only evict data that
//!   other workloads still want.
//! * A failed item (unreadable file, bad ino) fails alone; the rest of
//!   the batch completes and the failure is reported in [`BatchStats`].
//!
//! Items within a site run concurrently on a small worker pool. Results
//! arrive unordered and are reported sorted by ino.

mod transform;

pub use transform::{transform, TransformId, DIGEST_LEN};

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use offload_core::engine::EngineError;
use offload_core::{
    BlockAddr, BlockRange, ExecutionSite, FsError, Ino, LeaseIo, OffloadEngine, SitePlan, TaskFn,
    TaskOffloader, TaskSpec,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stub name under which the transform runs on an engine.
pub const STUB_TRANSFORM: &str = "prep.transform";

/// Workers per execution site unless overridden.
pub const DEFAULT_WORKERS: usize = 4;

const ARGS_LEN: usize = 4 + 4 + 8;
const RESULT_LEN: usize = 8 + DIGEST_LEN;

#[derive(Debug, thiserror::Error)]
pub enum PrepError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("file system error: {0}")]
    Fs(#[from] FsError),
}

/// Fractions of a batch to run at each site. Fractions must be finite,
/// non-negative, and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub local: f64,
    pub peer: f64,
    pub target: f64,
}

impl SplitSpec {
    pub const ALL_LOCAL: SplitSpec = SplitSpec { local: 1.0, peer: 0.0, target: 0.0 };
    pub const ALL_TARGET: SplitSpec = SplitSpec { local: 0.0, peer: 0.0, target: 1.0 };
    pub const ALL_PEER: SplitSpec = SplitSpec { local: 0.0, peer: 1.0, target: 0.0 };

    pub fn validate(&self) -> Result<(), PrepError> {
        let parts = [self.local, self.peer, self.target];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(PrepError::InvalidBatch(format!(
                "split fractions must be non-negative: {self:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PrepError::InvalidBatch(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Item counts per site for a batch of `n`: target and peer shares
    /// round to the nearest item, local takes the remainder.
    pub fn counts(&self, n: usize) -> SiteCounts {
        let target = (self.target * n as f64).round() as usize;
        let peer = ((self.peer * n as f64).round() as usize).min(n - target.min(n));
        let target = target.min(n);
        SiteCounts { local: n - target - peer, peer, target }
    }
}

/// Per-site item counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteCounts {
    pub local: usize,
    pub peer: usize,
    pub target: usize,
}

impl SiteCounts {
    fn bump(&mut self, site: ExecutionSite) {
        match site {
            ExecutionSite::Local => self.local += 1,
            ExecutionSite::Target => self.target += 1,
            ExecutionSite::Peer => self.peer += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.local + self.peer + self.target
    }
}

/// Per-site wall-clock spans, measured from batch start to the last
/// completion at that site. Zero for sites that ran nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct SiteTimes {
    pub local: Duration,
    pub peer: Duration,
    pub target: Duration,
}

impl SiteTimes {
    fn extend(&mut self, site: ExecutionSite, elapsed: Duration) {
        let slot = match site {
            ExecutionSite::Local => &mut self.local,
            ExecutionSite::Target => &mut self.target,
            ExecutionSite::Peer => &mut self.peer,
        };
        *slot = (*slot).max(elapsed);
    }

    pub fn max(&self) -> Duration {
        self.local.max(self.peer).max(self.target)
    }
}

/// A preprocessing request: which files, which transform, and how the
/// items divide across sites. The same `seed` always yields the same
/// per-item placement.
#[derive(Debug, Clone)]
pub struct PrepBatch {
    pub items: Vec<Ino>,
    pub transform: TransformId,
    pub split: SplitSpec,
    pub seed: u64,
}

impl PrepBatch {
    pub fn new(items: Vec<Ino>, transform: TransformId) -> Self {
        Self { items, transform, split: SplitSpec::ALL_LOCAL, seed: 0 }
    }

    pub fn with_split(mut self, split: SplitSpec, seed: u64) -> Self {
        self.split = split;
        self.seed = seed;
        self
    }
}

/// Outcome of one item. The digest and output length depend only on the
/// file content and the transform id, never on `site`.
#[derive(Debug, Clone)]
pub struct TransformResult {
    pub ino: Ino,
    pub digest: [u8; DIGEST_LEN],
    pub output_len: u64,
    pub site: ExecutionSite,
    pub duration: Duration,
}

/// Batch-level accounting. `planned` reflects the split assignment;
/// `ran` the sites where items actually executed (they differ when a
/// site rejects work and items fall back locally).
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub planned: SiteCounts,
    pub ran: SiteCounts,
    /// Items planned for a remote site that ended up running locally.
    pub fallbacks: usize,
    pub site_wall: SiteTimes,
    /// Batch turnaround: the slowest site's wall time.
    pub turnaround: Duration,
    pub failures: Vec<(Ino, String)>,
}

/// Deterministic per-item site assignment: the item indices are shuffled
/// by a seeded generator, then the first `target` shuffled slots go to
/// the target, the next `peer` to the peer, and the rest stay local.
pub fn assign_sites(n: usize, split: &SplitSpec, seed: u64) -> Vec<ExecutionSite> {
    let counts = split.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sites = vec![ExecutionSite::Local; n];
    for (slot, &idx) in order.iter().enumerate() {
        sites[idx] = if slot < counts.target {
            ExecutionSite::Target
        } else if slot < counts.target + counts.peer {
            ExecutionSite::Peer
        } else {
            ExecutionSite::Local
        };
    }
    sites
}

/// Registers the transform stub with an engine.
pub fn register_prep_stub(engine: &OffloadEngine) -> Result<(), EngineError> {
    engine.register_stub(STUB_TRANSFORM, transform_task_fn())
}

/// The transform as an offloadable task body. The same function serves
/// as the engine stub and the local fallback, so output bytes are
/// identical wherever it executes.
pub fn transform_task_fn() -> TaskFn {
    Arc::new(|ctx, args| transform_stub(ctx, args))
}

fn transform_stub(ctx: &LeaseIo, args: &[u8]) -> Result<Vec<u8>, String> {
    if args.len() != ARGS_LEN {
        return Err(format!("transform args are {} bytes, expected {ARGS_LEN}", args.len()));
    }
    let id = TransformId(u32::from_le_bytes(args[0..4].try_into().unwrap()));
    let ino = Ino(u32::from_le_bytes(args[4..8].try_into().unwrap()));
    let len = u64::from_le_bytes(args[8..16].try_into().unwrap());

    let content = read_leased_file(ctx, ino, len)?;
    let (digest, output_len) = transform(&content, id);

    let mut out = Vec::with_capacity(RESULT_LEN);
    out.extend_from_slice(&output_len.to_le_bytes());
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Streams the first `len` bytes of `ino` through the lease: extents
/// sorted by logical offset, each read whole, block padding trimmed.
fn read_leased_file(ctx: &LeaseIo, ino: Ino, len: u64) -> Result<Vec<u8>, String> {
    let mut extents: Vec<_> = ctx
        .read_set()
        .iter()
        .filter(|e| e.ino == ino)
        .cloned()
        .collect();
    extents.sort_by_key(|e| e.logical);

    let bs = ctx.block_size() as u64;
    let mut content = Vec::with_capacity(len as usize);
    for e in &extents {
        if e.logical >= len {
            break;
        }
        let data = ctx
            .offload_read(BlockAddr(e.range.start), e.range.len as u32)
            .map_err(|err| err.to_string())?;
        let take = (len - e.logical).min(e.range.len * bs) as usize;
        content.extend_from_slice(&data[..take]);
    }
    if content.len() as u64 != len {
        return Err(format!(
            "leased extents cover {} of {len} bytes of ino {}",
            content.len(),
            ino.0
        ));
    }
    Ok(content)
}

/// Runs preprocessing batches through a task offloader.
pub struct Preprocessor {
    offloader: Arc<TaskOffloader>,
    workers: usize,
}

struct Collector {
    results: Vec<TransformResult>,
    failures: Vec<(Ino, String)>,
    ran: SiteCounts,
    fallbacks: usize,
    site_wall: SiteTimes,
}

impl Preprocessor {
    pub fn new(offloader: Arc<TaskOffloader>) -> Self {
        Self { offloader, workers: DEFAULT_WORKERS }
    }

    /// Overrides the per-site worker count (minimum 1).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn offloader(&self) -> &Arc<TaskOffloader> {
        &self.offloader
    }

    /// Runs every item of the batch at its assigned site and collects
    /// results sorted by ino. Item failures are isolated: they appear in
    /// `BatchStats::failures` while the rest of the batch completes.
    pub fn preprocess_batch(
        &self,
        batch: &PrepBatch,
    ) -> Result<(Vec<TransformResult>, BatchStats), PrepError> {
        batch.split.validate()?;
        let n = batch.items.len();
        let planned = batch.split.counts(n);
        if planned.target > 0 && self.offloader.client(0).is_none() {
            return Err(PrepError::InvalidBatch(
                "split sends items to the target but no target client is configured".into(),
            ));
        }
        if planned.peer > 0 && self.offloader.client(1).is_none() {
            return Err(PrepError::InvalidBatch(
                "split sends items to a peer but no peer client is configured".into(),
            ));
        }

        let assignment = assign_sites(n, &batch.split, batch.seed);
        let plans = [SitePlan::Local, SitePlan::Target, SitePlan::Peer(0)];
        let queues: [Mutex<VecDeque<usize>>; 3] = Default::default();
        for (idx, site) in assignment.iter().enumerate() {
            let q = match site {
                ExecutionSite::Local => &queues[0],
                ExecutionSite::Target => &queues[1],
                ExecutionSite::Peer => &queues[2],
            };
            q.lock().unwrap().push_back(idx);
        }

        let started = Instant::now();
        let collector = Mutex::new(Collector {
            results: Vec::with_capacity(n),
            failures: Vec::new(),
            ran: SiteCounts::default(),
            fallbacks: 0,
            site_wall: SiteTimes::default(),
        });

        std::thread::scope(|s| {
            for (k, queue) in queues.iter().enumerate() {
                let backlog = queue.lock().unwrap().len();
                for _ in 0..self.workers.min(backlog) {
                    let plan = &plans[k];
                    let collector = &collector;
                    let batch = &batch;
                    s.spawn(move || loop {
                        let Some(idx) = queue.lock().unwrap().pop_front() else {
                            break;
                        };
                        let ino = batch.items[idx];
                        let outcome = self.run_item(ino, batch.transform, plan);
                        let elapsed = started.elapsed();
                        let mut c = collector.lock().unwrap();
                        match outcome {
                            Ok(result) => {
                                c.ran.bump(result.site);
                                c.site_wall.extend(result.site, elapsed);
                                if k != 0 && result.site == ExecutionSite::Local {
                                    c.fallbacks += 1;
                                }
                                c.results.push(result);
                            }
                            Err(msg) => c.failures.push((ino, msg)),
                        }
                    });
                }
            }
        });

        let mut c = collector.into_inner().unwrap();
        c.results.sort_by_key(|r| r.ino.0);
        c.failures.sort_by_key(|(ino, _)| ino.0);
        let turnaround = c.site_wall.max();
        Ok((
            c.results,
            BatchStats {
                planned,
                ran: c.ran,
                fallbacks: c.fallbacks,
                site_wall: c.site_wall,
                turnaround,
                failures: c.failures,
            },
        ))
    }

    fn run_item(
        &self,
        ino: Ino,
        id: TransformId,
        plan: &SitePlan,
    ) -> Result<TransformResult, String> {
        let fs = self.offloader.fs();
        let (size, _mtime) = fs.stat(ino).map_err(|e| e.to_string())?;
        let read_extents: Vec<(Ino, BlockRange)> = fs
            .file_extents(ino)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|e| (ino, e.phys_range()))
            .collect();

        let mut args = Vec::with_capacity(ARGS_LEN);
        args.extend_from_slice(&id.0.to_le_bytes());
        args.extend_from_slice(&ino.0.to_le_bytes());
        args.extend_from_slice(&size.to_le_bytes());

        let spec = TaskSpec {
            stub_name: STUB_TRANSFORM.into(),
            read_extents,
            write_extents: Vec::new(),
            args,
            local_fallback: transform_task_fn(),
        };

        let item_start = Instant::now();
        let (result, site) = self.offloader.run(&spec, plan).map_err(|e| e.to_string())?;
        let duration = item_start.elapsed();

        if result.len() != RESULT_LEN {
            return Err(format!(
                "malformed transform result: {} bytes, expected {RESULT_LEN}",
                result.len()
            ));
        }
        let output_len = u64::from_le_bytes(result[0..8].try_into().unwrap());
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(&result[8..]);
        Ok(TransformResult { ino, digest, output_len, site, duration })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_split_counts_are_exact() {
        let split = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };
        assert_eq!(
            split.counts(64),
            SiteCounts { local: 32, peer: 16, target: 16 }
        );
    }

    #[test]
    fn counts_cover_every_item_for_uneven_fractions() {
        let third = 1.0 / 3.0;
        let split = SplitSpec { local: third, peer: third, target: third };
        for n in [0, 1, 7, 64, 100, 101] {
            assert_eq!(split.counts(n).total(), n, "n = {n}");
        }
        assert_eq!(SplitSpec::ALL_TARGET.counts(5).target, 5);
        assert_eq!(SplitSpec::ALL_LOCAL.counts(5).local, 5);
    }

    #[test]
    fn assignment_is_deterministic_per_seed() {
        let split = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };
        let a = assign_sites(64, &split, 42);
        let b = assign_sites(64, &split, 42);
        assert_eq!(a, b);

        let counts = split.counts(64);
        let observed = a.iter().fold(SiteCounts::default(), |mut c, s| {
            c.bump(*s);
            c
        });
        assert_eq!(observed, counts);

        let other = assign_sites(64, &split, 43);
        assert_eq!(
            other.iter().filter(|s| **s == ExecutionSite::Target).count(),
            16
        );
        assert_ne!(a, other, "different seeds should permute the assignment");
    }

    #[test]
    fn validate_rejects_bad_fractions() {
        assert!(SplitSpec { local: 0.5, peer: 0.25, target: 0.2 }.validate().is_err());
        assert!(SplitSpec { local: -0.5, peer: 1.0, target: 0.5 }.validate().is_err());
        assert!(SplitSpec { local: f64::NAN, peer: 0.5, target: 0.5 }.validate().is_err());
        assert!(SplitSpec { local: 0.5, peer: 0.25, target: 0.25 }.validate().is_ok());
    }
}
