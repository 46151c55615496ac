//! Miniature LSM key-value store over the extent file system.
//!
//! The write path appends framed records to a single write-ahead log and
//! keeps the byte offset of every record alongside its key in the MemTable.
//! A flush does not rewrite the data: it registers the immutable MemTable's
//! offset array as a WAL-backed level-0 table in the MANIFEST and keeps the
//! table in memory (the L0 cache). Actual materialization happens during
//! L0 compaction, when the log recycler reads the already-persisted WAL
//! records straight from the volume — so each key-value payload travels to
//! storage exactly once. Compactions are offloadable per level through the
//! task offloader and commit atomically via a MANIFEST edit.

pub mod codec;
pub mod config;
pub mod db;
pub mod manifest;
pub mod memtable;
pub mod sstable;
pub mod stubs;
pub mod wal;

pub use config::{DbConfig, Maintenance, WalSyncMode};
pub use db::{Db, DbError, DbStats};
pub use manifest::{L0Backing, ManifestEdit, SstMeta};
pub use memtable::{MemEntry, MemTable, Op};
pub use stubs::{register_stubs, STUB_LOG_RECYCLE, STUB_MERGE};
pub use wal::{WalFile, WalRecord, OP_DELETE, OP_PUT};
