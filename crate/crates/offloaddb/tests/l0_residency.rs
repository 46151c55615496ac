//! Retained level-0 tables answer reads from memory: keys living in a
//! WAL-backed table must cost zero volume reads, while materialized
//! tables do have to touch blocks.

mod common;

use std::sync::Arc;

use common::*;
use offload_core::extentfs::ExtentFs;
use offload_core::volume::BlockStore;
use offloaddb::{Db, DbConfig};

#[test]
fn wal_backed_keys_cost_no_volume_reads() {
    let vol = mem_volume(32 * 1024);
    let fs = Arc::new(ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap());
    let db = Db::open_local(Arc::clone(&fs), small_cfg(3)).unwrap();

    let n = 120usize;
    for i in 0..n {
        db.put(&pool_key(i), format!("value-{i}").as_bytes()).unwrap();
    }
    db.flush().unwrap();
    let v = db.version_snapshot();
    assert!(!v.levels[0].is_empty());
    assert!(
        v.levels[0].iter().all(|m| m.is_wal_backed()),
        "all level-0 tables retained"
    );

    let reads_before = vol.io_counts().read_ops;
    let hits_before = db.stats().l0_cache_hits;
    for i in 0..n {
        assert_eq!(
            db.get(&pool_key(i)).unwrap(),
            Some(format!("value-{i}").into_bytes())
        );
    }
    assert_eq!(
        vol.io_counts().read_ops,
        reads_before,
        "level-0 resident reads reached the volume"
    );
    assert_eq!(db.stats().l0_cache_hits - hits_before, n as u64);
}

#[test]
fn materialized_tables_do_read_the_volume() {
    let vol = mem_volume(32 * 1024);
    let fs = Arc::new(ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap());
    let cfg = DbConfig {
        l0_cache_bytes: 0, // force materialization
        ..small_cfg(3)
    };
    let db = Db::open(Arc::clone(&fs), cfg, Vec::new()).unwrap();

    let n = 120usize;
    for i in 0..n {
        db.put(&pool_key(i), format!("value-{i}").as_bytes()).unwrap();
    }
    db.flush().unwrap();
    let v = db.version_snapshot();
    assert!(v.levels[0].iter().all(|m| !m.is_wal_backed()));

    let reads_before = vol.io_counts().read_ops;
    for i in 0..n {
        assert_eq!(
            db.get(&pool_key(i)).unwrap(),
            Some(format!("value-{i}").into_bytes())
        );
    }
    assert!(
        vol.io_counts().read_ops > reads_before,
        "materialized lookups must touch blocks"
    );
    assert_eq!(db.stats().l0_cache_hits, 0);
}
