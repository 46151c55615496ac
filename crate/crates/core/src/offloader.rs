//! Initiator-side task dispatch.
//!
//! The offloader packages a task with a lease over its extents, picks an
//! execution site (locally, the storage target, a peer initiator, or a
//! split across sites), submits, and transparently falls back to local
//! execution when the remote engine rejects. Results are identical no
//! matter where the task ran; only the reported site differs.

use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::engine::tokens::TokenGrant;
use crate::engine::OffloadEngine;
use crate::extentfs::{ExtentFs, FsError, Ino};
use crate::proto::{self, OffloadRequest, OffloadResponse, Outcome};
use crate::task_io::{LeaseIo, TaskFn};
use crate::volume::BlockRange;
use crate::wire::{msg, FramedStream, LinkStats};

#[derive(Debug, Error)]
pub enum OffloaderError {
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("task failed: {0}")]
    Task(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad plan: {0}")]
    BadPlan(String),
    #[error("no execution site at index {0}")]
    NoSuchSite(usize),
}

/// Where a task actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionSite {
    Local,
    Target,
    Peer,
}

/// Where the caller wants tasks to run. `Split` applies to batches: the
/// given fraction of items goes to the target, the rest to the first peer
/// (or local execution when no peer is configured).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SitePlan {
    Local,
    Target,
    Peer(usize),
    Split { target_fraction: f64 },
}

/// One offloadable unit of work. The stub named `stub_name` must be
/// registered on every remote site the plan can select; `local_fallback`
/// is the same computation for initiator-side execution.
#[derive(Clone)]
pub struct TaskSpec {
    pub stub_name: String,
    pub read_extents: Vec<(Ino, BlockRange)>,
    pub write_extents: Vec<(Ino, BlockRange)>,
    pub args: Vec<u8>,
    pub local_fallback: TaskFn,
}

/// Transport to one engine: in-process for same-process targets and peers,
/// framed TCP otherwise. Each `submit` is one round trip.
pub enum EngineClient {
    InProc {
        engine: Arc<OffloadEngine>,
        initiator: String,
        round_trips: AtomicU64,
    },
    Remote(RemoteEngineClient),
}

pub struct RemoteEngineClient {
    conn: Mutex<FramedStream<TcpStream>>,
    initiator: String,
    round_trips: AtomicU64,
    stats: Arc<LinkStats>,
}

impl EngineClient {
    pub fn in_proc(engine: Arc<OffloadEngine>, initiator: &str) -> Self {
        EngineClient::InProc {
            engine,
            initiator: initiator.to_string(),
            round_trips: AtomicU64::new(0),
        }
    }

    pub fn connect(addr: &str, initiator: &str) -> Result<Self, OffloaderError> {
        let sock = TcpStream::connect(addr).map_err(|e| OffloaderError::Transport(e.to_string()))?;
        sock.set_nodelay(true).ok();
        let stats = LinkStats::new();
        Ok(EngineClient::Remote(RemoteEngineClient {
            conn: Mutex::new(FramedStream::with_stats(sock, Arc::clone(&stats))),
            initiator: initiator.to_string(),
            round_trips: AtomicU64::new(0),
            stats,
        }))
    }

    pub fn initiator(&self) -> &str {
        match self {
            EngineClient::InProc { initiator, .. } => initiator,
            EngineClient::Remote(r) => &r.initiator,
        }
    }

    /// Submissions sent so far (each is exactly one round trip).
    pub fn round_trips(&self) -> u64 {
        match self {
            EngineClient::InProc { round_trips, .. } => round_trips.load(Ordering::Relaxed),
            EngineClient::Remote(r) => r.round_trips.load(Ordering::Relaxed),
        }
    }

    /// Link byte counters (remote transport only).
    pub fn link_stats(&self) -> Option<Arc<LinkStats>> {
        match self {
            EngineClient::InProc { .. } => None,
            EngineClient::Remote(r) => Some(Arc::clone(&r.stats)),
        }
    }

    pub fn submit(&self, req: OffloadRequest) -> Result<OffloadResponse, OffloaderError> {
        match self {
            EngineClient::InProc {
                engine,
                round_trips,
                ..
            } => {
                round_trips.fetch_add(1, Ordering::Relaxed);
                Ok(engine.submit(req))
            }
            EngineClient::Remote(r) => {
                r.round_trips.fetch_add(1, Ordering::Relaxed);
                let mut conn = r.conn.lock().unwrap();
                conn.send(msg::OFFLOAD_SUBMIT, &proto::encode_offload_submit(&req))
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                let frame = conn
                    .recv()
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                match frame.msg_type {
                    msg::OFFLOAD_RESULT => proto::decode_offload_result(&frame.payload)
                        .map_err(|e| OffloaderError::Transport(e.to_string())),
                    msg::ERR => Err(OffloaderError::Transport(
                        String::from_utf8_lossy(&frame.payload).into_owned(),
                    )),
                    t => Err(OffloaderError::Transport(format!(
                        "unexpected reply type {}",
                        t
                    ))),
                }
            }
        }
    }

    /// Asks the engine for a token (Token policy only).
    pub fn acquire_token(&self) -> Result<Option<TokenGrant>, OffloaderError> {
        match self {
            EngineClient::InProc { engine, initiator, .. } => {
                Ok(engine.acquire_token(initiator))
            }
            EngineClient::Remote(r) => {
                let mut conn = r.conn.lock().unwrap();
                conn.send(msg::TOKEN_ACQUIRE, &proto::encode_token_acquire(&r.initiator))
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                let frame = conn
                    .recv()
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                if frame.msg_type != msg::TOKEN_GRANT {
                    return Err(OffloaderError::Transport(format!(
                        "unexpected reply type {}",
                        frame.msg_type
                    )));
                }
                let (id, ttl_ms) = proto::decode_token_grant(&frame.payload)
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                if id == 0 {
                    Ok(None)
                } else {
                    Ok(Some(TokenGrant {
                        token_id: id,
                        expires_at_us: ttl_ms * 1000,
                    }))
                }
            }
        }
    }

    /// Tells the engine to drop cached copies of freed blocks.
    pub fn invalidate(&self, volume_id: u64, addrs: &[u64]) -> Result<(), OffloaderError> {
        match self {
            EngineClient::InProc { engine, .. } => {
                engine.invalidate_blocks(volume_id, addrs);
                Ok(())
            }
            EngineClient::Remote(r) => {
                let mut conn = r.conn.lock().unwrap();
                conn.send(msg::CACHE_INVAL, &proto::encode_cache_inval(volume_id, addrs))
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                let frame = conn
                    .recv()
                    .map_err(|e| OffloaderError::Transport(e.to_string()))?;
                if frame.msg_type == msg::OK {
                    Ok(())
                } else {
                    Err(OffloaderError::Transport("invalidation failed".into()))
                }
            }
        }
    }
}

/// Forwards freed-block notifications from the file system to every
/// configured engine so dead cache entries are dropped eagerly.
struct InvalFanout {
    volume_id: u64,
    clients: Vec<Arc<EngineClient>>,
}

impl crate::extentfs::BlockEventListener for InvalFanout {
    fn blocks_freed(&self, ranges: &[BlockRange]) {
        let addrs: Vec<u64> = ranges.iter().flat_map(|r| r.start..r.end()).collect();
        for c in &self.clients {
            let _ = c.invalidate(self.volume_id, &addrs);
        }
    }
}

pub struct TaskOffloader {
    fs: Arc<ExtentFs>,
    /// Index 0 is the storage target; 1.. are peer initiators.
    clients: Vec<Arc<EngineClient>>,
}

impl TaskOffloader {
    /// `clients[0]` is the storage target, later entries are peers. Freed
    /// blocks are propagated to every client's cache from here on.
    pub fn new(fs: Arc<ExtentFs>, clients: Vec<Arc<EngineClient>>) -> Self {
        if !clients.is_empty() {
            fs.add_block_listener(Arc::new(InvalFanout {
                volume_id: fs.fs_uuid(),
                clients: clients.clone(),
            }));
        }
        Self { fs, clients }
    }

    pub fn fs(&self) -> &Arc<ExtentFs> {
        &self.fs
    }

    pub fn client(&self, index: usize) -> Option<&Arc<EngineClient>> {
        self.clients.get(index)
    }

    fn site_index(&self, plan: &SitePlan) -> Result<Option<usize>, OffloaderError> {
        match plan {
            SitePlan::Local => Ok(None),
            SitePlan::Target => Ok(Some(0)),
            SitePlan::Peer(i) => Ok(Some(1 + i)),
            SitePlan::Split { .. } => Err(OffloaderError::BadPlan(
                "split plans apply to run_batch".into(),
            )),
        }
    }

    /// Runs one task under the plan. Returns the result bytes and where
    /// the work actually happened.
    pub fn run(
        &self,
        task: &TaskSpec,
        plan: &SitePlan,
    ) -> Result<(Vec<u8>, ExecutionSite), OffloaderError> {
        let site = self.site_index(plan)?;
        self.run_at(task, site)
    }

    /// Runs a batch. `Split` sends `round(target_fraction * n)` items to
    /// the target and the remainder to the first peer (local when no peer
    /// exists); other plans apply uniformly.
    pub fn run_batch(
        &self,
        tasks: &[TaskSpec],
        plan: &SitePlan,
    ) -> Result<Vec<(Vec<u8>, ExecutionSite)>, OffloaderError> {
        match plan {
            SitePlan::Split { target_fraction } => {
                if !(0.0..=1.0).contains(target_fraction) {
                    return Err(OffloaderError::BadPlan(format!(
                        "target_fraction {} outside [0, 1]",
                        target_fraction
                    )));
                }
                let n_target = (target_fraction * tasks.len() as f64).round() as usize;
                let rest_site = if self.clients.len() > 1 {
                    Some(1)
                } else {
                    None
                };
                tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i < n_target {
                            self.run_at(t, Some(0))
                        } else {
                            self.run_at(t, rest_site)
                        }
                    })
                    .collect()
            }
            _ => {
                let site = self.site_index(plan)?;
                tasks.iter().map(|t| self.run_at(t, site)).collect()
            }
        }
    }

    /// Requests a token from the engine at `site` (0 = target). A holder's
    /// next `run` against that site is admitted under the Token policy.
    pub fn hold_token(&self, site: usize) -> Result<Option<TokenGrant>, OffloaderError> {
        let client = self
            .clients
            .get(site)
            .ok_or(OffloaderError::NoSuchSite(site))?;
        client.acquire_token()
    }

    fn run_at(
        &self,
        task: &TaskSpec,
        site: Option<usize>,
    ) -> Result<(Vec<u8>, ExecutionSite), OffloaderError> {
        // Hints for every file the task reads, so the target's coherence
        // check sees current mtimes.
        let mut inos: Vec<Ino> = task.read_extents.iter().map(|(i, _)| *i).collect();
        inos.sort_by_key(|i| i.0);
        inos.dedup();
        let hints = self.fs.current_hints(&inos)?;
        let lease = self
            .fs
            .grant_lease(&task.read_extents, &task.write_extents, hints.clone())?;

        if let Some(idx) = site {
            let Some(client) = self.clients.get(idx) else {
                self.fs.abort_lease(lease.id)?;
                return Err(OffloaderError::NoSuchSite(idx));
            };
            let req = OffloadRequest {
                volume_id: self.fs.fs_uuid(),
                lease: lease.clone(),
                stub_name: task.stub_name.clone(),
                mtime_hints: hints,
                args: task.args.clone(),
                initiator: client.initiator().to_string(),
            };
            let resp = match client.submit(req) {
                Ok(r) => r,
                Err(e) => {
                    self.fs.abort_lease(lease.id)?;
                    return Err(e);
                }
            };
            match resp.outcome {
                Outcome::Completed => {
                    self.fs.complete_lease(lease.id, &resp.bytes_written)?;
                    let where_ = if idx == 0 {
                        ExecutionSite::Target
                    } else {
                        ExecutionSite::Peer
                    };
                    return Ok((resp.result, where_));
                }
                Outcome::Rejected(_) => {
                    // Fall through: the lease is still active and local
                    // execution begins immediately.
                }
                Outcome::Failed(msg) => {
                    self.fs.abort_lease(lease.id)?;
                    return Err(OffloaderError::Task(msg));
                }
            }
        }

        // Local execution (chosen or fallback): same lease, same semantics,
        // no offload cache.
        let ctx = LeaseIo::new(self.fs.volume(), self.fs.fs_uuid(), lease.clone(), &[], None);
        let out = (task.local_fallback)(&ctx, &task.args);
        ctx.finish();
        match out {
            Ok(result) => {
                self.fs.complete_lease(lease.id, &ctx.bytes_written())?;
                Ok((result, ExecutionSite::Local))
            }
            Err(msg) => {
                self.fs.abort_lease(lease.id)?;
                Err(OffloaderError::Task(msg))
            }
        }
    }
}
