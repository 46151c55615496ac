//! Core of an initiator-centric user-level file system over disaggregated
//! block storage, plus the target-side offload engine that executes I/O
//! tasks next to the data.
//!
//! The crate is organized bottom-up:
//!
//! - [`volume`]: block-addressable storage behind local, file, metered, and
//!   remote backends, all observationally equivalent.
//! - [`wire`]: the framed protocol shared by volume I/O, offload
//!   submission, and token scheduling, with exact per-frame byte
//!   accounting.
//! - [`extentfs`]: the file system — inode table, extents, free-space
//!   bitmap, metadata journal with A/B checkpoints, and leases.
//! - [`task_io`]: the lease-scoped I/O context offloaded tasks run
//!   against, on either side of the link.
//! - [`engine`]: the target daemon — stub registry, admission policies,
//!   offload cache, executor slots, and the wire server.
//! - [`offloader`]: the initiator-side dispatcher — site selection,
//!   submission, and local fallback.
//! - [`proto`]: wire encodings of leases, offload requests, and results.

pub mod cache;
pub mod clock;
pub mod engine;
pub mod extentfs;
pub mod offloader;
pub mod proto;
pub mod task_io;
pub mod volume;
pub mod wire;

pub use engine::{AdmissionPolicy, EngineConfig, OffloadEngine};
pub use extentfs::{ExtentFs, FsError, Ino, Lease, LeaseExtent, LeaseId};
pub use offloader::{EngineClient, ExecutionSite, SitePlan, TaskOffloader, TaskSpec};
pub use task_io::{IoCtxError, LeaseIo, TaskFn};
pub use volume::{BlockAddr, BlockRange, BlockStore, VolumeError, VolumeGeometry};
