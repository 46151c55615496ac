//! Target-side offload engine: stub registry, admission control, bounded
//! executor, offload cache, and token circulation.
//!
//! The engine owns the target's handle to each served volume. A submission
//! carries a lease descriptor minted by the initiator's file system; if the
//! request is admitted, the named stub runs against a [`LeaseIo`] context
//! restricted to that lease. Rejected submissions touch nothing.

pub mod cache;
pub mod server;
pub mod tokens;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use thiserror::Error;

use crate::clock::{Clock, WallClock};
use crate::proto::{OffloadRequest, OffloadResponse, RejectReason};
use crate::task_io::{LeaseIo, TaskFn};
use crate::volume::BlockStore;
use cache::{CacheKey, OffloadCache};
use tokens::{TokenGrant, TokenScheduler};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("stub already registered: {0}")]
    DuplicateStub(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
}

/// How the engine decides whether to run a submission.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissionPolicy {
    AcceptAll,
    RejectAll,
    /// Reject while the utilization probe reads at or above `threshold`.
    CpuThreshold { threshold: f64 },
    /// Admit only submissions from initiators holding a circulating token.
    Token { token_count: usize, ttl: Duration },
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        AdmissionPolicy::AcceptAll
    }
}

/// Engine tuning; parsed from `key=value` text (one pair per line, `#`
/// comments allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub policy: AdmissionPolicy,
    pub cache_capacity_bytes: u64,
    pub executor_slots: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: AdmissionPolicy::AcceptAll,
            cache_capacity_bytes: 8 << 20,
            executor_slots: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(4),
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let mut cfg = Self::default();
        let mut policy_name: Option<String> = None;
        let mut threshold = 0.8f64;
        let mut token_count = 4usize;
        let mut token_ttl_ms = 1000u64;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(EngineError::BadConfig(format!(
                    "line {}: expected key=value, got {:?}",
                    lineno + 1,
                    line
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                EngineError::BadConfig(format!("line {}: bad {}: {:?}", lineno + 1, what, value))
            };
            match key {
                "policy" => policy_name = Some(value.to_ascii_lowercase()),
                "threshold" => threshold = value.parse().map_err(|_| bad("threshold"))?,
                "token_count" => token_count = value.parse().map_err(|_| bad("token_count"))?,
                "token_ttl_ms" => token_ttl_ms = value.parse().map_err(|_| bad("token_ttl_ms"))?,
                "cache_capacity_bytes" => {
                    cfg.cache_capacity_bytes = value.parse().map_err(|_| bad("cache capacity"))?
                }
                "executor_slots" => {
                    cfg.executor_slots = value.parse().map_err(|_| bad("executor_slots"))?
                }
                other => {
                    return Err(EngineError::BadConfig(format!(
                        "line {}: unknown key {:?}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        if let Some(name) = policy_name {
            cfg.policy = match name.as_str() {
                "accept_all" => AdmissionPolicy::AcceptAll,
                "reject_all" => AdmissionPolicy::RejectAll,
                "cpu_threshold" => {
                    if !(threshold > 0.0 && threshold <= 1.0) {
                        return Err(EngineError::BadConfig(format!(
                            "threshold {} outside (0, 1]",
                            threshold
                        )));
                    }
                    AdmissionPolicy::CpuThreshold { threshold }
                }
                "token" => {
                    if token_count < 1 || token_ttl_ms == 0 {
                        return Err(EngineError::BadConfig(
                            "token policy needs token_count >= 1 and token_ttl_ms > 0".into(),
                        ));
                    }
                    AdmissionPolicy::Token {
                        token_count,
                        ttl: Duration::from_millis(token_ttl_ms),
                    }
                }
                other => {
                    return Err(EngineError::BadConfig(format!("unknown policy {:?}", other)))
                }
            };
        }
        if cfg.executor_slots == 0 {
            return Err(EngineError::BadConfig("executor_slots must be >= 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub submitted: u64,
    pub completed: u64,
    pub rejected_policy: u64,
    pub rejected_overload: u64,
    pub failed: u64,
}

type Probe = Arc<dyn Fn() -> f64 + Send + Sync>;

pub struct OffloadEngine {
    cfg: EngineConfig,
    stubs: RwLock<HashMap<String, TaskFn>>,
    volumes: RwLock<HashMap<u64, Arc<dyn BlockStore>>>,
    cache: Arc<OffloadCache>,
    /// Busy executor slots; admission + acquisition happen under this lock.
    busy: Mutex<usize>,
    probe: RwLock<Option<Probe>>,
    tokens: Option<TokenScheduler>,
    submitted: AtomicU64,
    completed: AtomicU64,
    rejected_policy: AtomicU64,
    rejected_overload: AtomicU64,
    failed: AtomicU64,
}

impl OffloadEngine {
    pub fn new(cfg: EngineConfig) -> Arc<Self> {
        Self::with_clock(cfg, Arc::new(WallClock::new()))
    }

    pub fn with_clock(cfg: EngineConfig, clock: Arc<dyn Clock>) -> Arc<Self> {
        let tokens = match &cfg.policy {
            AdmissionPolicy::Token { token_count, ttl } => {
                Some(TokenScheduler::new(*token_count, *ttl, clock))
            }
            _ => None,
        };
        Arc::new(Self {
            cache: Arc::new(OffloadCache::new(cfg.cache_capacity_bytes)),
            stubs: RwLock::new(HashMap::new()),
            volumes: RwLock::new(HashMap::new()),
            busy: Mutex::new(0),
            probe: RwLock::new(None),
            tokens,
            cfg,
            submitted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            rejected_policy: AtomicU64::new(0),
            rejected_overload: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &Arc<OffloadCache> {
        &self.cache
    }

    /// Registers a named task body. Names are claimed once.
    pub fn register_stub(&self, name: &str, f: TaskFn) -> Result<(), EngineError> {
        let mut stubs = self.stubs.write().unwrap();
        if stubs.contains_key(name) {
            return Err(EngineError::DuplicateStub(name.to_string()));
        }
        stubs.insert(name.to_string(), f);
        Ok(())
    }

    pub fn has_stub(&self, name: &str) -> bool {
        self.stubs.read().unwrap().contains_key(name)
    }

    /// Makes a volume reachable by submissions carrying this id.
    pub fn register_volume(&self, volume_id: u64, vol: Arc<dyn BlockStore>) {
        self.volumes.write().unwrap().insert(volume_id, vol);
    }

    pub fn volume(&self, volume_id: u64) -> Option<Arc<dyn BlockStore>> {
        self.volumes.read().unwrap().get(&volume_id).cloned()
    }

    /// Overrides the utilization source consulted by `CpuThreshold`. The
    /// default is executor-slot occupancy (busy / total), which is
    /// deterministic under test.
    pub fn set_utilization_probe(&self, f: Probe) {
        *self.probe.write().unwrap() = Some(f);
    }

    pub fn utilization(&self) -> f64 {
        let probe = self.probe.read().unwrap().clone();
        match probe {
            Some(p) => p(),
            None => {
                let busy = *self.busy.lock().unwrap();
                busy as f64 / self.cfg.executor_slots as f64
            }
        }
    }

    /// Current token grant for `initiator`, if the Token policy is active
    /// and a token is (or rotates) available.
    pub fn acquire_token(&self, initiator: &str) -> Option<TokenGrant> {
        self.tokens.as_ref()?.acquire(initiator)
    }

    pub fn return_token(&self, token_id: u64) {
        if let Some(t) = &self.tokens {
            t.give_back(token_id);
        }
    }

    pub fn token_scheduler(&self) -> Option<&TokenScheduler> {
        self.tokens.as_ref()
    }

    /// Drops cached copies of the given blocks (initiator-side frees).
    pub fn invalidate_blocks(&self, volume_id: u64, addrs: &[u64]) {
        self.cache.invalidate(addrs.iter().map(|&addr| CacheKey {
            volume_id,
            addr,
        }));
    }

    /// Admission decision plus slot acquisition, atomically. `Ok(guard)`
    /// means one slot is held; errors are the rejection responses.
    fn admit(&self, req: &OffloadRequest) -> Result<SlotGuard<'_>, OffloadResponse> {
        let mut busy = self.busy.lock().unwrap();
        match &self.cfg.policy {
            AdmissionPolicy::AcceptAll => {}
            AdmissionPolicy::RejectAll => {
                return Err(OffloadResponse::rejected(RejectReason::Policy));
            }
            AdmissionPolicy::CpuThreshold { threshold } => {
                let util = {
                    let probe = self.probe.read().unwrap().clone();
                    match probe {
                        Some(p) => p(),
                        None => *busy as f64 / self.cfg.executor_slots as f64,
                    }
                };
                if util >= *threshold {
                    return Err(OffloadResponse::rejected(RejectReason::Policy));
                }
            }
            AdmissionPolicy::Token { .. } => {
                let admitted = self
                    .tokens
                    .as_ref()
                    .map(|t| t.consume(&req.initiator))
                    .unwrap_or(false);
                if !admitted {
                    return Err(OffloadResponse::rejected(RejectReason::Policy));
                }
            }
        }
        if *busy >= self.cfg.executor_slots {
            return Err(OffloadResponse::rejected(RejectReason::Overload));
        }
        *busy += 1;
        Ok(SlotGuard { engine: self })
    }

    /// Runs one submission to completion (synchronously in the caller's
    /// thread; concurrency comes from callers).
    pub fn submit(&self, req: OffloadRequest) -> OffloadResponse {
        self.submitted.fetch_add(1, Ordering::Relaxed);
        let _slot = match self.admit(&req) {
            Ok(g) => g,
            Err(resp) => {
                match resp.outcome {
                    crate::proto::Outcome::Rejected(RejectReason::Policy) => {
                        self.rejected_policy.fetch_add(1, Ordering::Relaxed);
                    }
                    _ => {
                        self.rejected_overload.fetch_add(1, Ordering::Relaxed);
                    }
                }
                return resp;
            }
        };

        let Some(stub) = self.stubs.read().unwrap().get(&req.stub_name).cloned() else {
            self.failed.fetch_add(1, Ordering::Relaxed);
            return OffloadResponse::failed(format!("unknown stub {:?}", req.stub_name));
        };
        let Some(vol) = self.volume(req.volume_id) else {
            self.failed.fetch_add(1, Ordering::Relaxed);
            return OffloadResponse::failed(format!("unknown volume {}", req.volume_id));
        };

        let ctx = LeaseIo::new(
            vol,
            req.volume_id,
            req.lease,
            &req.mtime_hints,
            Some(Arc::clone(&self.cache)),
        );
        let out = stub(&ctx, &req.args);
        ctx.finish();
        match out {
            Ok(result) => {
                self.completed.fetch_add(1, Ordering::Relaxed);
                OffloadResponse::completed(result, ctx.bytes_written())
            }
            Err(msg) => {
                self.failed.fetch_add(1, Ordering::Relaxed);
                OffloadResponse::failed(msg)
            }
        }
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            submitted: self.submitted.load(Ordering::Relaxed),
            completed: self.completed.load(Ordering::Relaxed),
            rejected_policy: self.rejected_policy.load(Ordering::Relaxed),
            rejected_overload: self.rejected_overload.load(Ordering::Relaxed),
            failed: self.failed.load(Ordering::Relaxed),
        }
    }

    pub fn busy_slots(&self) -> usize {
        *self.busy.lock().unwrap()
    }
}

struct SlotGuard<'a> {
    engine: &'a OffloadEngine,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.engine.busy.lock().unwrap() -= 1;
    }
}
