//! Flat `key = value` configuration for the bench harness.
//!
//! Keys prefixed `db.` are forwarded to the store's own config parser
//! (`db.memtable_bytes = 4096`, `db.offload_levels = L0-L1:target`),
//! keys prefixed `engine.` to the engine's (`engine.policy = tokens`),
//! and bare keys configure the volume, workload, and experiment knobs.
//! Blank lines and `#` comments are ignored.

use std::path::PathBuf;

use offload_core::volume::Backing;
use offload_core::EngineConfig;
use offloaddb::DbConfig;

use crate::workload::{KeyDist, WorkloadSpec};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("volume error: {0}")]
    Volume(#[from] offload_core::VolumeError),
    #[error("file system error: {0}")]
    Fs(#[from] offload_core::FsError),
    #[error("store error: {0}")]
    Db(#[from] offloaddb::DbError),
    #[error("preprocess error: {0}")]
    Prep(#[from] offloadprep::PrepError),
    #[error("offload error: {0}")]
    Offload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FioMode {
    RandRead,
    RandWrite,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Volume backing: in-memory, or a file image path.
    pub vol: Backing,
    pub blocks: u64,
    pub block_size: u32,
    /// Name the volume is served under by a remote target.
    pub vol_name: String,
    pub workload: WorkloadSpec,
    pub db: DbConfig,
    pub engine: EngineConfig,
    /// Connect to a remote target instead of embedding one in-process.
    pub target_addr: Option<String>,
    /// Peer engines to embed (site `peer` placements need at least one).
    pub peers: usize,
    /// Initiator count ceiling for the scale-policy experiment.
    pub initiators: usize,
    /// Initiator block cache capacity in blocks; 0 disables the cache.
    pub cache_blocks: usize,
    pub io_size: u64,
    pub duration_ms: u64,
    pub fio_mode: FioMode,
    pub prep_items: usize,
    pub prep_item_bytes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vol: Backing::Memory,
            blocks: 128 * 1024,
            block_size: 512,
            vol_name: "vol0".into(),
            workload: WorkloadSpec::default(),
            db: DbConfig::default(),
            engine: EngineConfig::default(),
            target_addr: None,
            peers: 1,
            initiators: 4,
            cache_blocks: 0,
            io_size: 4_096,
            duration_ms: 100,
            fio_mode: FioMode::RandRead,
            prep_items: 64,
            prep_item_bytes: 16 * 1024,
        }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut cfg = BenchConfig::default();
        let mut db_lines = Vec::new();
        let mut engine_lines = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| {
                BenchError::BadConfig(format!("line {line}: expected key=value, got {s:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());

            if let Some(rest) = key.strip_prefix("db.") {
                db_lines.push(format!("{rest} = {value}"));
                continue;
            }
            if let Some(rest) = key.strip_prefix("engine.") {
                engine_lines.push(format!("{rest} = {value}"));
                continue;
            }

            let bad = |what: &str| {
                BenchError::BadConfig(format!("line {line}: bad {what}: {value:?}"))
            };
            let num = |what: &str| -> Result<u64, BenchError> {
                value.parse::<u64>().map_err(|_| bad(what))
            };
            let frac = |what: &str| -> Result<f64, BenchError> {
                value.parse::<f64>().map_err(|_| bad(what))
            };
            match key {
                "vol" => {
                    cfg.vol = if value == "mem" {
                        Backing::Memory
                    } else {
                        Backing::File(PathBuf::from(value))
                    }
                }
                "blocks" => cfg.blocks = num(key)?,
                "block_size" => cfg.block_size = num(key)? as u32,
                "vol_name" => cfg.vol_name = value.to_string(),
                "target_addr" => cfg.target_addr = Some(value.to_string()),
                "peers" => cfg.peers = num(key)? as usize,
                "initiators" => cfg.initiators = num(key)? as usize,
                "cache_blocks" => cfg.cache_blocks = num(key)? as usize,
                "io_size" => cfg.io_size = num(key)?,
                "duration_ms" => cfg.duration_ms = num(key)?,
                "fio_mode" => {
                    cfg.fio_mode = match value {
                        "randread" => FioMode::RandRead,
                        "randwrite" => FioMode::RandWrite,
                        _ => return Err(bad("fio_mode (randread|randwrite)")),
                    }
                }
                "prep_items" => cfg.prep_items = num(key)? as usize,
                "prep_item_bytes" => cfg.prep_item_bytes = num(key)? as usize,
                "records" => cfg.workload.records = num(key)? as usize,
                "ops" => cfg.workload.ops = num(key)? as usize,
                "key_len" => cfg.workload.key_len = num(key)? as usize,
                "value_len" => cfg.workload.value_len = num(key)? as usize,
                "read_fraction" => cfg.workload.read_fraction = frac(key)?,
                "update_fraction" => cfg.workload.update_fraction = frac(key)?,
                "insert_fraction" => cfg.workload.insert_fraction = frac(key)?,
                "scan_fraction" => cfg.workload.scan_fraction = frac(key)?,
                "threads" => cfg.workload.threads = num(key)? as usize,
                "distribution" => {
                    cfg.workload.dist = match value {
                        "uniform" => KeyDist::Uniform,
                        "zipfian" => KeyDist::Zipfian,
                        _ => return Err(bad("distribution (uniform|zipfian)")),
                    }
                }
                other => {
                    return Err(BenchError::BadConfig(format!(
                        "line {line}: unknown key {other:?}"
                    )))
                }
            }
        }

        if !db_lines.is_empty() {
            cfg.db = DbConfig::parse(&db_lines.join("\n"))
                .map_err(|e| BenchError::BadConfig(e.to_string()))?;
        }
        if !engine_lines.is_empty() {
            cfg.engine = EngineConfig::parse(&engine_lines.join("\n"))
                .map_err(|e| BenchError::BadConfig(e.to_string()))?;
        }
        cfg.workload.validate().map_err(BenchError::BadConfig)?;
        if cfg.blocks < 64 {
            return Err(BenchError::BadConfig("volume needs at least 64 blocks".into()));
        }
        Ok(cfg)
    }
}
