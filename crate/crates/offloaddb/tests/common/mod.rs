//! Shared fixtures for the integration tests: deterministic trace
//! generation, a model-map oracle, and engine wiring.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use offload_core::engine::OffloadEngine;
use offload_core::extentfs::ExtentFs;
use offload_core::volume::{BlockStore, MemVolume};
use offload_core::{EngineClient, EngineConfig, SitePlan, VolumeGeometry};
use offloaddb::{register_stubs, Db, DbConfig, DbError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mem_volume(blocks: u64) -> Arc<MemVolume> {
    Arc::new(MemVolume::new(VolumeGeometry::new(512, blocks).unwrap()))
}

pub fn mem_fs(blocks: u64) -> Arc<ExtentFs> {
    Arc::new(ExtentFs::mkfs(mem_volume(blocks)).unwrap())
}

/// A configuration small enough to exercise rotation, level-0 pressure,
/// and multi-level compaction within a few thousand operations.
pub fn small_cfg(levels: usize) -> DbConfig {
    DbConfig {
        memtable_bytes: 4096,
        sst_target_bytes: 16 * 1024,
        l0_trigger: 3,
        levels,
        l1_budget_bytes: 24 * 1024,
        level_fanout: 4,
        offload_levels: vec![SitePlan::Local; levels],
        ..DbConfig::default()
    }
}

/// In-process engine acting as the storage target for `raw`, with the
/// store's stubs registered.
pub fn inproc_engine(fs_uuid: u64, raw: Arc<dyn BlockStore>, name: &str) -> Arc<EngineClient> {
    let engine = OffloadEngine::new(EngineConfig::default());
    engine.register_volume(fs_uuid, raw);
    register_stubs(&engine).unwrap();
    Arc::new(EngineClient::in_proc(engine, name))
}

/// One step of a generated workload. Maintenance entries let a trace
/// exercise flush and compaction at deterministic points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Put(Vec<u8>, Vec<u8>),
    Delete(Vec<u8>),
    Flush,
    Maintain,
}

pub struct TraceSpec {
    pub ops: usize,
    pub key_pool: usize,
    pub value_len: (usize, usize),
    pub delete_ratio: f64,
    pub flush_every: usize,
    pub maintain_every: usize,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            ops: 2000,
            key_pool: 400,
            value_len: (20, 200),
            delete_ratio: 0.2,
            flush_every: 0,
            maintain_every: 0,
        }
    }
}

/// 24-byte key `n` of the pool, zero-padded so ordering is lexicographic.
pub fn pool_key(n: usize) -> Vec<u8> {
    format!("user{n:020}").into_bytes()
}

pub fn gen_trace(seed: u64, spec: &TraceSpec) -> Vec<TraceOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.ops + spec.ops / 8);
    for i in 0..spec.ops {
        let key = pool_key(rng.gen_range(0..spec.key_pool));
        if rng.gen_bool(spec.delete_ratio) {
            out.push(TraceOp::Delete(key));
        } else {
            let len = rng.gen_range(spec.value_len.0..=spec.value_len.1);
            let mut value = vec![0u8; len];
            rng.fill(value.as_mut_slice());
            out.push(TraceOp::Put(key, value));
        }
        if spec.flush_every != 0 && (i + 1) % spec.flush_every == 0 {
            out.push(TraceOp::Flush);
        }
        if spec.maintain_every != 0 && (i + 1) % spec.maintain_every == 0 {
            out.push(TraceOp::Maintain);
        }
    }
    out
}

pub type Shadow = BTreeMap<Vec<u8>, Vec<u8>>;

pub fn apply_shadow(shadow: &mut Shadow, op: &TraceOp) {
    match op {
        TraceOp::Put(k, v) => {
            shadow.insert(k.clone(), v.clone());
        }
        TraceOp::Delete(k) => {
            shadow.remove(k);
        }
        TraceOp::Flush | TraceOp::Maintain => {}
    }
}

pub fn apply_db(db: &Db, op: &TraceOp) -> Result<(), DbError> {
    match op {
        TraceOp::Put(k, v) => db.put(k, v),
        TraceOp::Delete(k) => db.delete(k),
        TraceOp::Flush => db.flush(),
        TraceOp::Maintain => db.maintain(),
    }
}

pub fn full_scan(db: &Db) -> Vec<(Vec<u8>, Vec<u8>)> {
    db.scan(b"", usize::MAX).unwrap()
}

pub fn shadow_pairs(shadow: &Shadow) -> Vec<(Vec<u8>, Vec<u8>)> {
    shadow.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// True iff `scan` equals `shadow` after optionally applying `patch` —
/// the op that was in flight when a crash hit — to the shadow. The two
/// admissible states are therefore exact prefixes: last-committed, or
/// last-committed plus the one in-flight record. Anything else is a mix.
pub fn matches_shadow_with_patch(
    scan: &[(Vec<u8>, Vec<u8>)],
    shadow: &Shadow,
    patch: Option<&TraceOp>,
) -> bool {
    match patch {
        None => {
            scan.len() == shadow.len()
                && scan
                    .iter()
                    .zip(shadow.iter())
                    .all(|((sk, sv), (mk, mv))| sk == mk && sv == mv)
        }
        Some(op) => {
            let mut patched = shadow.clone();
            apply_shadow(&mut patched, op);
            scan.len() == patched.len()
                && scan
                    .iter()
                    .zip(patched.iter())
                    .all(|((sk, sv), (mk, mv))| sk == mk && sv == mv)
        }
    }
}
