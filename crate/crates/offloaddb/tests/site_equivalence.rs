//! Running maintenance locally, on the target, on a peer, or mixed per
//! level must be observationally identical: same final contents, same
//! table hierarchy. The stubs and their local fallbacks are the same
//! code, so any divergence would mean the lease I/O path or the wire
//! codecs corrupted something.

mod common;

use std::sync::Arc;

use common::*;
use offload_core::extentfs::ExtentFs;
use offload_core::volume::BlockStore;
use offload_core::{EngineClient, SitePlan};
use offloaddb::{Db, DbConfig, SstMeta};

struct Outcome {
    scan: Vec<(Vec<u8>, Vec<u8>)>,
    levels: Vec<Vec<(u8, Vec<u8>, Vec<u8>, u32)>>,
    site_local: u64,
    site_target: u64,
    site_peer: u64,
}

fn level_shape(tables: &[SstMeta]) -> Vec<(u8, Vec<u8>, Vec<u8>, u32)> {
    tables
        .iter()
        .map(|m| (m.level, m.smallest.clone(), m.largest.clone(), m.entry_count))
        .collect()
}

/// Runs the fixed trace under one placement plan and returns everything
/// observable: contents, hierarchy shape, and where tasks ran.
fn run_plan(ops: &[TraceOp], offload_levels: Vec<SitePlan>, peers: usize) -> Outcome {
    let vol = mem_volume(64 * 1024);
    let fs = Arc::new(ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap());
    let mut clients: Vec<Arc<EngineClient>> = Vec::new();
    // Index 0 is the target; peers follow.
    clients.push(inproc_engine(fs.fs_uuid(), Arc::clone(&vol) as _, "init-0"));
    for p in 0..peers {
        clients.push(inproc_engine(
            fs.fs_uuid(),
            Arc::clone(&vol) as _,
            &format!("peer-{p}"),
        ));
    }
    let cfg = DbConfig {
        offload_levels,
        // Small retained budget so flushes regularly materialize through
        // the recycle stub at the configured site.
        l0_cache_bytes: 8 * 1024,
        ..small_cfg(4)
    };
    let db = Db::open(Arc::clone(&fs), cfg, clients).unwrap();
    for op in ops {
        apply_db(&db, op).unwrap();
    }
    db.flush().unwrap();
    db.maintain().unwrap();
    let stats = db.stats();
    let v = db.version_snapshot();
    fs.verify_space_accounting().unwrap();
    Outcome {
        scan: full_scan(&db),
        levels: v.levels.iter().map(|l| level_shape(l)).collect(),
        site_local: stats.site_local,
        site_target: stats.site_target,
        site_peer: stats.site_peer,
    }
}

#[test]
fn all_sites_produce_identical_stores() {
    let ops = gen_trace(
        909,
        &TraceSpec {
            ops: 3000,
            key_pool: 450,
            value_len: (40, 300),
            delete_ratio: 0.2,
            flush_every: 300,
            maintain_every: 800,
            ..TraceSpec::default()
        },
    );

    let local = run_plan(&ops, vec![SitePlan::Local; 4], 0);
    let target = run_plan(&ops, vec![SitePlan::Target; 4], 0);
    let mixed = run_plan(
        &ops,
        vec![
            SitePlan::Target,
            SitePlan::Local,
            SitePlan::Peer(0),
            SitePlan::Local,
        ],
        1,
    );
    let peer = run_plan(&ops, vec![SitePlan::Peer(0); 4], 1);

    // Placement actually differed.
    assert!(local.site_local > 0 && local.site_target == 0 && local.site_peer == 0);
    assert!(target.site_target > 0 && target.site_local == 0);
    assert!(peer.site_peer > 0 && peer.site_local == 0 && peer.site_target == 0);
    assert!(mixed.site_target > 0, "mixed plan used the target");

    // Byte-identical contents and identical hierarchy, regardless of site.
    assert_eq!(local.scan, target.scan, "local vs target contents");
    assert_eq!(local.scan, mixed.scan, "local vs mixed contents");
    assert_eq!(local.scan, peer.scan, "local vs peer contents");
    assert_eq!(local.levels, target.levels, "local vs target hierarchy");
    assert_eq!(local.levels, mixed.levels, "local vs mixed hierarchy");
    assert_eq!(local.levels, peer.levels, "local vs peer hierarchy");
}

#[test]
fn target_run_reopens_locally() {
    // A store written through the target must be readable by a plain
    // local open: placement leaves no trace in the persistent format.
    let ops = gen_trace(
        31337,
        &TraceSpec {
            ops: 1200,
            key_pool: 200,
            flush_every: 200,
            maintain_every: 500,
            ..TraceSpec::default()
        },
    );
    let vol = mem_volume(64 * 1024);
    let fs = Arc::new(ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap());
    let client = inproc_engine(fs.fs_uuid(), Arc::clone(&vol) as _, "init-0");
    let cfg = DbConfig {
        offload_levels: vec![SitePlan::Target; 4],
        l0_cache_bytes: 8 * 1024,
        ..small_cfg(4)
    };
    let mut shadow = Shadow::new();
    {
        let db = Db::open(Arc::clone(&fs), cfg, vec![client]).unwrap();
        for op in &ops {
            apply_db(&db, op).unwrap();
            apply_shadow(&mut shadow, op);
        }
        db.sync().unwrap();
        assert!(db.stats().site_target > 0);
    }
    drop(fs);
    let fs = Arc::new(ExtentFs::mount(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap());
    let db = Db::open_local(Arc::clone(&fs), small_cfg(4)).unwrap();
    assert_eq!(full_scan(&db), shadow_pairs(&shadow));
}
