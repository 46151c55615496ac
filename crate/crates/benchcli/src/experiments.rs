//! Experiment runners: topology assembly, measured phases, and one
//! metrics row per configuration.
//!
//! Topology: the initiator's file system sits on top of an optional
//! block cache over a metered link to the raw device, while embedded
//! engines (the storage target and any peers) operate on the raw device
//! directly — they are colocated with the disks, so their I/O never
//! crosses the initiator link. `tx_bytes`/`rx_bytes` therefore count
//! exactly what the initiator ships over the wire: block frames plus
//! offload requests.
//!
//! Determinism: workloads are seeded, single-threaded by default, and
//! the scale-policy experiment advances a manual clock in lock-step
//! rounds, so every non-timing column reproduces bit-for-bit for a
//! given seed and config.

use std::sync::Arc;
use std::time::{Duration, Instant};

use offload_core::clock::{Clock, ManualClock};
use offload_core::engine::server::ServedVolume;
use offload_core::volume::{create_volume, Backing, MeteredVolume, RemoteVolume};
use offload_core::wire::LinkStats;
use offload_core::{
    AdmissionPolicy, BlockStore, EngineClient, ExecutionSite, ExtentFs, OffloadEngine, SitePlan,
    TaskOffloader, VolumeGeometry,
};
use offloaddb::{register_stubs, Db, DbConfig};
use offloadprep::{register_prep_stub, PrepBatch, Preprocessor, SplitSpec, TransformId};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{CacheInvalidator, CachedVolume};
use crate::config::{BenchConfig, BenchError, FioMode};
use crate::metrics::{LatencyRecorder, MetricsRow};
use crate::workload::{generate_ops, BenchOp, Phase, WorkloadSpec};

pub const EXPERIMENTS: &[&str] = &[
    "fio-like",
    "ycsb",
    "offload-sweep",
    "scale-policy",
    "quantify",
    "pollution",
    "prep-split",
];

pub fn run_experiment(
    name: &str,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<Vec<MetricsRow>, BenchError> {
    match name {
        "fio-like" => fio_like_rows(cfg, seed),
        "ycsb" => Ok(vec![ycsb_run(cfg, cfg.db.clone(), seed, "base")?.row]),
        "offload-sweep" => offload_sweep(cfg, seed),
        "scale-policy" => scale_policy(cfg, seed),
        "quantify" => quantify(cfg, seed),
        "pollution" => pollution(cfg, seed),
        "prep-split" => prep_split(cfg, seed),
        other => Err(BenchError::UnknownExperiment(other.into())),
    }
}

/// An assembled initiator stack plus the embedded remote parties.
pub struct DbRig {
    /// The raw device; embedded engines read and write this directly.
    pub raw: Arc<dyn BlockStore>,
    pub fs: Arc<ExtentFs>,
    pub db: Db,
    pub cache: Option<Arc<CachedVolume>>,
    /// Embedded engines: index 0 is the target, the rest are peers.
    pub engines: Vec<Arc<OffloadEngine>>,
    pub clients: Vec<Arc<EngineClient>>,
    /// Byte counters for everything the initiator sends over the link.
    links: Vec<Arc<LinkStats>>,
}

impl DbRig {
    pub fn tx_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.tx_bytes()).sum()
    }

    pub fn rx_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.rx_bytes()).sum()
    }

    pub fn offcache_hit_ratio(&self) -> f64 {
        let Some(engine) = self.engines.first() else { return 0.0 };
        let st = engine.cache().stats();
        if st.hits + st.misses == 0 {
            0.0
        } else {
            st.hits as f64 / (st.hits + st.misses) as f64
        }
    }

    pub fn blockcache_hit_ratio(&self) -> f64 {
        self.cache.as_ref().map(|c| c.hit_ratio()).unwrap_or(0.0)
    }
}

fn register_all_stubs(engine: &OffloadEngine) -> Result<(), BenchError> {
    register_stubs(engine).map_err(|e| BenchError::Offload(e.to_string()))?;
    register_prep_stub(engine).map_err(|e| BenchError::Offload(e.to_string()))?;
    Ok(())
}

/// Builds the initiator stack for one store instance. With
/// `target_addr` set the store runs against a remote target over TCP;
/// otherwise a target engine (and `cfg.peers` peer engines) are
/// embedded in-process on the raw device.
pub fn build_db_rig(cfg: &BenchConfig, db_cfg: DbConfig) -> Result<DbRig, BenchError> {
    if let Some(addr) = &cfg.target_addr {
        let remote = RemoteVolume::connect(addr, &cfg.vol_name)?;
        let vol_link = remote.stats();
        let raw: Arc<dyn BlockStore> = Arc::new(remote);
        let mut links = vec![vol_link];

        let mut stack = raw.clone();
        let cache = if cfg.cache_blocks > 0 {
            let c = CachedVolume::new(stack, cfg.cache_blocks);
            stack = c.clone();
            Some(c)
        } else {
            None
        };
        let fs = Arc::new(ExtentFs::mount(stack)?);
        if let Some(c) = &cache {
            fs.add_block_listener(Arc::new(CacheInvalidator(c.clone())));
        }
        let client = Arc::new(
            EngineClient::connect(addr, "init-0").map_err(|e| BenchError::Offload(e.to_string()))?,
        );
        if let Some(l) = client.link_stats() {
            links.push(l);
        }
        let clients = vec![client];
        let db = Db::open(fs.clone(), db_cfg, clients.clone())?;
        return Ok(DbRig { raw, fs, db, cache, engines: Vec::new(), clients, links });
    }

    let geom = VolumeGeometry::new(cfg.block_size, cfg.blocks)
        .map_err(|e| BenchError::BadConfig(e.to_string()))?;
    let raw = create_volume(&cfg.vol, geom)?;
    let link = LinkStats::new();
    let mut stack: Arc<dyn BlockStore> = Arc::new(MeteredVolume::new(raw.clone(), link.clone()));
    let cache = if cfg.cache_blocks > 0 {
        let c = CachedVolume::new(stack, cfg.cache_blocks);
        stack = c.clone();
        Some(c)
    } else {
        None
    };
    let fs = Arc::new(ExtentFs::mkfs(stack)?);
    if let Some(c) = &cache {
        fs.add_block_listener(Arc::new(CacheInvalidator(c.clone())));
    }

    let mut engines = Vec::new();
    let mut clients = Vec::new();
    for i in 0..=cfg.peers {
        let engine = OffloadEngine::new(cfg.engine.clone());
        engine.register_volume(fs.fs_uuid(), raw.clone());
        register_all_stubs(&engine)?;
        clients.push(Arc::new(EngineClient::in_proc(engine.clone(), &format!("init-{i}"))));
        engines.push(engine);
    }

    let db = Db::open(fs.clone(), db_cfg, clients.clone())?;
    Ok(DbRig { raw, fs, db, cache, engines, clients, links: vec![link] })
}

fn apply_op(db: &Db, op: &BenchOp) -> Result<(), BenchError> {
    match op {
        BenchOp::Read(k) => {
            db.get(k)?;
        }
        BenchOp::Insert(k, v) | BenchOp::Update(k, v) => db.put(k, v)?,
        BenchOp::Scan(start, limit) => {
            db.scan(start, *limit)?;
        }
    }
    Ok(())
}

/// Applies the run-phase ops, splitting them across `threads` workers,
/// and returns the merged latency recorder and the measured wall time.
fn run_ops(
    db: &Db,
    ops: &[BenchOp],
    threads: usize,
) -> Result<(LatencyRecorder, Duration), BenchError> {
    let started = Instant::now();
    if threads <= 1 {
        let mut lat = LatencyRecorder::new();
        for op in ops {
            let t = Instant::now();
            apply_op(db, op)?;
            lat.record(t.elapsed());
        }
        return Ok((lat, started.elapsed()));
    }

    let chunk = ops.len().div_ceil(threads);
    let mut merged = LatencyRecorder::new();
    let results: Vec<Result<LatencyRecorder, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ops
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut lat = LatencyRecorder::new();
                    for op in part {
                        let t = Instant::now();
                        apply_op(db, op)?;
                        lat.record(t.elapsed());
                    }
                    Ok(lat)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for r in results {
        merged.merge(r?);
    }
    Ok((merged, started.elapsed()))
}

pub struct RunOutcome {
    pub row: MetricsRow,
    pub rig: DbRig,
}

/// Loads the record set, runs the op mix, and snapshots one row. The
/// rig is returned so callers can cross-check counters or reuse state.
pub fn ycsb_run(
    cfg: &BenchConfig,
    db_cfg: DbConfig,
    seed: u64,
    label: &str,
) -> Result<RunOutcome, BenchError> {
    cfg.workload.validate().map_err(BenchError::BadConfig)?;
    let rig = build_db_rig(cfg, db_cfg)?;

    for op in generate_ops(&cfg.workload, seed, Phase::Load) {
        apply_op(&rig.db, &op)?;
    }
    rig.db.sync()?;

    let ops = generate_ops(&cfg.workload, seed.wrapping_add(1), Phase::Run);
    let (lat, elapsed) = run_ops(&rig.db, &ops, cfg.workload.threads)?;
    rig.db.wait_idle()?;

    let st = rig.db.stats();
    let row = MetricsRow {
        experiment: "ycsb".into(),
        config: label.into(),
        seed,
        throughput_ops: lat.throughput(elapsed),
        lat_p50_us: lat.percentile_us(50.0),
        lat_p99_us: lat.percentile_us(99.0),
        tx_bytes: rig.tx_bytes(),
        rx_bytes: rig.rx_bytes(),
        offcache_hit: rig.offcache_hit_ratio(),
        blockcache_hit: rig.blockcache_hit_ratio(),
        site_local: st.site_local,
        site_target: st.site_target,
        site_peer: st.site_peer,
        stall_ms: st.stall_us / 1000,
        ..Default::default()
    };
    Ok(RunOutcome { row, rig })
}

/// One row per maintenance placement: all-local, target compaction for
/// a growing level prefix, and everything at a peer.
fn offload_sweep(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    let levels = cfg.db.levels;
    let mut variants: Vec<(String, Vec<SitePlan>)> =
        vec![("local".into(), vec![SitePlan::Local; levels])];
    for k in 1..=levels {
        let mut plan = vec![SitePlan::Local; levels];
        plan[..k].fill(SitePlan::Target);
        let name = if k == levels {
            "all".into()
        } else if k == 1 {
            "L0".into()
        } else {
            format!("L0-L{}", k - 1)
        };
        variants.push((name, plan));
    }
    if cfg.peers > 0 {
        variants.push(("peer".into(), vec![SitePlan::Peer(0); levels]));
    }

    let mut rows = Vec::new();
    for (label, plan) in variants {
        let mut db_cfg = cfg.db.clone();
        db_cfg.offload_levels = plan;
        let mut out = ycsb_run(cfg, db_cfg, seed, &label)?;
        out.row.experiment = "offload-sweep".into();
        rows.push(out.row);
    }
    Ok(rows)
}

/// The design-quantification ladder: flush/compaction fully local with
/// no retained tables, then log recycling at the target, then recycling
/// plus the retained level-0 cache.
fn quantify(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    let mut wl = cfg.workload.clone();
    wl.read_fraction = 0.0;
    wl.update_fraction = 1.0;
    wl.insert_fraction = 0.0;
    wl.scan_fraction = 0.0;
    let cfg = BenchConfig { workload: wl, ..cfg.clone() };

    let levels = cfg.db.levels;
    let variants: &[(&str, Vec<SitePlan>, u64)] = &[
        ("recycle-off-cache-off", vec![SitePlan::Local; levels], 0),
        ("recycle-on-cache-off", vec![SitePlan::Target; levels], 0),
        ("all-on", vec![SitePlan::Target; levels], 8 << 20),
    ];

    let mut rows = Vec::new();
    for (label, plan, l0_cache) in variants {
        let mut db_cfg = cfg.db.clone();
        db_cfg.offload_levels = plan.clone();
        db_cfg.l0_cache_bytes = *l0_cache;
        let mut out = ycsb_run(&cfg, db_cfg, seed, label)?;
        out.row.experiment = "quantify".into();
        rows.push(out.row);
    }
    Ok(rows)
}

/// M initiators sharing one engine under each admission policy, driven
/// in deterministic lock-step rounds on a manual clock. Each initiator
/// owns a small file system and submits one read-only transform per
/// round; a rejected submission falls back to local execution.
fn scale_policy(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    const ROUND_STEP_US: u64 = 5_000;
    const ROUNDS: usize = 200;

    let policies: &[(&str, AdmissionPolicy)] = &[
        ("accept", AdmissionPolicy::AcceptAll),
        ("cpu80", AdmissionPolicy::CpuThreshold { threshold: 0.8 }),
        ("tokens", AdmissionPolicy::Token { token_count: 4, ttl: Duration::from_secs(1) }),
    ];

    let mut rows = Vec::new();
    for m in 1..=cfg.initiators.max(1) {
        for (policy_name, policy) in policies {
            let clock = ManualClock::new();
            let engine = OffloadEngine::with_clock(
                offload_core::EngineConfig {
                    policy: policy.clone(),
                    cache_capacity_bytes: 0,
                    executor_slots: cfg.engine.executor_slots,
                },
                clock.clone(),
            );
            register_all_stubs(&engine)?;
            // Scripted utilization: a sawtooth over simulated time, so the
            // CPU policy alternates between admitting and shedding.
            {
                let clock = clock.clone();
                engine.set_utilization_probe(Arc::new(move || {
                    ((clock.now_us() / ROUND_STEP_US) % 10) as f64 / 10.0
                }));
            }

            let mut initiators = Vec::new();
            for i in 0..m {
                let geom = VolumeGeometry::new(cfg.block_size, 4096)
                    .map_err(|e| BenchError::BadConfig(e.to_string()))?;
                let raw = create_volume(&Backing::Memory, geom)?;
                let fs = Arc::new(ExtentFs::mkfs(raw.clone())?);
                engine.register_volume(fs.fs_uuid(), raw);
                let ino = fs.create_file("sample")?;
                let mut content = vec![0u8; 8 * 1024];
                ChaCha8Rng::seed_from_u64(seed ^ i as u64).fill_bytes(&mut content);
                fs.write(ino, 0, &content)?;
                let client =
                    Arc::new(EngineClient::in_proc(engine.clone(), &format!("init-{i}")));
                let off = Arc::new(TaskOffloader::new(fs, vec![client]));
                initiators.push((Preprocessor::new(off).with_workers(1), ino));
            }

            let started = Instant::now();
            let mut lat = LatencyRecorder::new();
            let (mut local, mut target) = (0u64, 0u64);
            for _ in 0..ROUNDS {
                clock.advance_us(ROUND_STEP_US);
                for (prep, ino) in &initiators {
                    // Under the token policy, submission admits only holders;
                    // everyone else degrades to local execution.
                    let _ = prep.offloader().hold_token(0);
                    let batch = PrepBatch::new(vec![*ino], TransformId(0))
                        .with_split(SplitSpec::ALL_TARGET, seed);
                    let t = Instant::now();
                    let (results, _) = prep.preprocess_batch(&batch)?;
                    lat.record(t.elapsed());
                    match results.first().map(|r| r.site) {
                        Some(ExecutionSite::Target) => target += 1,
                        _ => local += 1,
                    }
                }
            }

            rows.push(MetricsRow {
                experiment: "scale-policy".into(),
                config: format!("{policy_name}-m{m}"),
                seed,
                throughput_ops: lat.throughput(started.elapsed()),
                lat_p50_us: lat.percentile_us(50.0),
                lat_p99_us: lat.percentile_us(99.0),
                site_local: local,
                site_target: target,
                ..Default::default()
            });
        }
    }
    Ok(rows)
}

/// The cache-pollution analog: a write-heavy phase then a read-heavy
/// phase, with compaction either local (its reads stream through the
/// initiator block cache) or offloaded (they never touch it). Rows log
/// the foreground read hit ratio per window of operations.
fn pollution(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    const WINDOWS: usize = 4;
    let cache_blocks = if cfg.cache_blocks > 0 { cfg.cache_blocks } else { 1024 };

    let mut rows = Vec::new();
    for (label, site) in [("no-offload", SitePlan::Local), ("offload", SitePlan::Target)] {
        let mut run_cfg = cfg.clone();
        run_cfg.cache_blocks = cache_blocks;
        let mut db_cfg = cfg.db.clone();
        db_cfg.offload_levels = vec![site; db_cfg.levels];
        // Keep level-0 tables materialized so foreground reads exercise
        // the block cache rather than the retained-table map.
        db_cfg.l0_cache_bytes = 0;

        let rig = build_db_rig(&run_cfg, db_cfg)?;
        for op in generate_ops(&cfg.workload, seed, Phase::Load) {
            apply_op(&rig.db, &op)?;
        }
        rig.db.sync()?;
        let cache = rig.cache.as_ref().expect("pollution runs with a block cache");

        for (phase, update_fraction) in [("wr75", 0.75), ("wr25", 0.25)] {
            let wl = WorkloadSpec {
                read_fraction: 1.0 - update_fraction,
                update_fraction,
                insert_fraction: 0.0,
                scan_fraction: 0.0,
                ..cfg.workload.clone()
            };
            let ops = generate_ops(&wl, seed.wrapping_add(7), Phase::Run);
            let window = ops.len().div_ceil(WINDOWS);
            for (w, part) in ops.chunks(window).enumerate() {
                let mut lat = LatencyRecorder::new();
                let started = Instant::now();
                let (mut fg_hits, mut fg_misses) = (0u64, 0u64);
                for op in part {
                    let is_read = matches!(op, BenchOp::Read(_));
                    let before = cache.counters();
                    let t = Instant::now();
                    apply_op(&rig.db, op)?;
                    lat.record(t.elapsed());
                    if is_read {
                        let after = cache.counters();
                        fg_hits += after.0 - before.0;
                        fg_misses += after.1 - before.1;
                    }
                }
                let st = rig.db.stats();
                rows.push(MetricsRow {
                    experiment: "pollution".into(),
                    config: format!("{label}-{phase}-w{w}"),
                    seed,
                    throughput_ops: lat.throughput(started.elapsed()),
                    lat_p50_us: lat.percentile_us(50.0),
                    lat_p99_us: lat.percentile_us(99.0),
                    tx_bytes: rig.tx_bytes(),
                    rx_bytes: rig.rx_bytes(),
                    blockcache_hit: if fg_hits + fg_misses == 0 {
                        0.0
                    } else {
                        fg_hits as f64 / (fg_hits + fg_misses) as f64
                    },
                    site_local: st.site_local,
                    site_target: st.site_target,
                    site_peer: st.site_peer,
                    stall_ms: st.stall_us / 1000,
                    ..Default::default()
                });
            }
        }
    }
    Ok(rows)
}

/// Preprocessing batches under several placement splits; one row per
/// split with turnaround-derived throughput.
fn prep_split(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    let geom = VolumeGeometry::new(cfg.block_size, cfg.blocks)
        .map_err(|e| BenchError::BadConfig(e.to_string()))?;
    let raw = create_volume(&Backing::Memory, geom)?;
    let fs = Arc::new(ExtentFs::mkfs(raw.clone())?);

    let mut items = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cfg.prep_items {
        let ino = fs.create_file(&format!("item-{i:04}"))?;
        let mut content = vec![0u8; cfg.prep_item_bytes];
        rng.fill_bytes(&mut content);
        fs.write(ino, 0, &content)?;
        items.push(ino);
    }

    let mut clients = Vec::new();
    for i in 0..2 {
        let engine = OffloadEngine::new(offload_core::EngineConfig {
            policy: AdmissionPolicy::AcceptAll,
            cache_capacity_bytes: 0,
            // Enough slots for the preprocessor's worker pool, so rows
            // show placement rather than overload fallbacks.
            executor_slots: cfg.engine.executor_slots.max(offloadprep::DEFAULT_WORKERS),
        });
        engine.register_volume(fs.fs_uuid(), raw.clone());
        register_prep_stub(&engine).map_err(|e| BenchError::Offload(e.to_string()))?;
        clients.push(Arc::new(EngineClient::in_proc(engine, &format!("init-{i}"))));
    }
    let prep = Preprocessor::new(Arc::new(TaskOffloader::new(fs, clients)));

    let splits: &[(&str, SplitSpec)] = &[
        ("local", SplitSpec::ALL_LOCAL),
        ("quarter", SplitSpec { local: 0.5, peer: 0.25, target: 0.25 }),
        ("remote-half", SplitSpec { local: 0.0, peer: 0.5, target: 0.5 }),
        ("target", SplitSpec::ALL_TARGET),
    ];

    let mut rows = Vec::new();
    for (label, split) in splits {
        let batch = PrepBatch::new(items.clone(), TransformId(1)).with_split(*split, seed);
        let (results, stats) = prep.preprocess_batch(&batch)?;
        let mut lat = LatencyRecorder::new();
        for r in &results {
            lat.record(r.duration);
        }
        let turnaround = stats.turnaround.max(Duration::from_micros(1));
        rows.push(MetricsRow {
            experiment: "prep-split".into(),
            config: (*label).into(),
            seed,
            throughput_ops: results.len() as f64 / turnaround.as_secs_f64(),
            lat_p50_us: lat.percentile_us(50.0),
            lat_p99_us: lat.percentile_us(99.0),
            site_local: stats.ran.local as u64,
            site_target: stats.ran.target as u64,
            site_peer: stats.ran.peer as u64,
            ..Default::default()
        });
    }
    Ok(rows)
}

/// Raw-volume microbenchmark. The op budget derives from the requested
/// duration at a fixed nominal rate so byte columns stay reproducible;
/// wall-clock throughput is still measured, not assumed.
pub fn fio_like(
    vol: &dyn BlockStore,
    mode: FioMode,
    io_size: u64,
    duration: Duration,
    seed: u64,
) -> Result<MetricsRow, BenchError> {
    const NOMINAL_IOPS: u64 = 20_000;
    let geom = vol.geometry();
    let bs = geom.block_size as u64;
    let blocks_per_io = io_size.div_ceil(bs).max(1);
    if blocks_per_io > geom.block_count {
        return Err(BenchError::BadConfig(format!(
            "io_size {io_size} exceeds the volume ({} blocks)",
            geom.block_count
        )));
    }
    let ops = (duration.as_millis() as u64 * NOMINAL_IOPS / 1000).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut payload = vec![0u8; (blocks_per_io * bs) as usize];
    rng.fill_bytes(&mut payload);

    let before = vol.io_counts();
    let mut lat = LatencyRecorder::new();
    let started = Instant::now();
    for _ in 0..ops {
        let addr = rng.gen_range(0..=geom.block_count - blocks_per_io);
        let t = Instant::now();
        match mode {
            FioMode::RandRead => {
                vol.read_blocks(offload_core::BlockAddr(addr), blocks_per_io)?;
            }
            FioMode::RandWrite => {
                vol.write_blocks(offload_core::BlockAddr(addr), &payload)?;
            }
        }
        lat.record(t.elapsed());
    }
    let elapsed = started.elapsed();
    let after = vol.io_counts();

    let mode_name = match mode {
        FioMode::RandRead => "randread",
        FioMode::RandWrite => "randwrite",
    };
    Ok(MetricsRow {
        experiment: "fio-like".into(),
        config: format!("{mode_name}-{io_size}"),
        seed,
        throughput_ops: lat.throughput(elapsed),
        lat_p50_us: lat.percentile_us(50.0),
        lat_p99_us: lat.percentile_us(99.0),
        tx_bytes: (after.blocks_written - before.blocks_written) * bs,
        rx_bytes: (after.blocks_read - before.blocks_read) * bs,
        ..Default::default()
    })
}

fn fio_like_rows(cfg: &BenchConfig, seed: u64) -> Result<Vec<MetricsRow>, BenchError> {
    let geom = VolumeGeometry::new(cfg.block_size, cfg.blocks)
        .map_err(|e| BenchError::BadConfig(e.to_string()))?;
    let vol = create_volume(&cfg.vol, geom)?;
    let duration = Duration::from_millis(cfg.duration_ms);
    // Write first so the read pass touches initialized data.
    let write = fio_like(vol.as_ref(), FioMode::RandWrite, cfg.io_size, duration, seed)?;
    let read = fio_like(vol.as_ref(), FioMode::RandRead, cfg.io_size, duration, seed)?;
    Ok(vec![write, read])
}

/// Serves one volume as a storage target: engine, stubs, and the wire
/// listener. Returns the bound server; callers decide how long to run.
pub fn serve_target(cfg: &BenchConfig, listen: &str) -> Result<offload_core::engine::server::EngineServer, BenchError> {
    let raw: Arc<dyn BlockStore> = match &cfg.vol {
        Backing::Memory => {
            let geom = VolumeGeometry::new(cfg.block_size, cfg.blocks)
                .map_err(|e| BenchError::BadConfig(e.to_string()))?;
            let vol = create_volume(&Backing::Memory, geom)?;
            ExtentFs::mkfs(vol.clone())?;
            vol
        }
        Backing::File(path) => Arc::new(offload_core::volume::FileVolume::open(
            path,
            cfg.block_size,
        )?),
    };
    let fs = ExtentFs::mount(raw.clone())?;
    let engine = OffloadEngine::new(cfg.engine.clone());
    register_all_stubs(&engine)?;
    let served = vec![ServedVolume {
        name: cfg.vol_name.clone(),
        volume_id: fs.fs_uuid(),
        store: raw,
    }];
    offload_core::engine::server::EngineServer::start(engine, listen, served)
        .map_err(BenchError::Io)
}
