//! Batch preprocessing end to end: split arithmetic, site transparency,
//! read-only safety, rejection fallback, and per-item failure isolation.

use std::sync::Arc;
use std::time::Duration;

use offload_core::volume::MemVolume;
use offload_core::{
    AdmissionPolicy, BlockStore, EngineClient, EngineConfig, ExecutionSite, ExtentFs, Ino,
    OffloadEngine, TaskOffloader, VolumeGeometry,
};
use offloadprep::{
    register_prep_stub, transform, PrepBatch, PrepError, Preprocessor, SiteCounts, SplitSpec,
    TransformId,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mem_fs() -> Arc<ExtentFs> {
    let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 16 * 1024).unwrap()));
    Arc::new(ExtentFs::mkfs(vol as Arc<dyn BlockStore>).unwrap())
}

fn seeded_file(fs: &ExtentFs, name: &str, len: usize, seed: u64) -> (Ino, Vec<u8>) {
    let mut content = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut content);
    let ino = fs.create_file(name).unwrap();
    fs.write(ino, 0, &content).unwrap();
    (ino, content)
}

fn engine_for(fs: &ExtentFs, policy: AdmissionPolicy) -> Arc<OffloadEngine> {
    // The offload cache stays disabled: batch inputs stream through once,
    // so caching them would only evict blocks other workloads still want.
    let engine = OffloadEngine::new(EngineConfig {
        policy,
        cache_capacity_bytes: 0,
        executor_slots: 4,
    });
    engine.register_volume(fs.fs_uuid(), fs.volume());
    register_prep_stub(&engine).unwrap();
    engine
}

struct Rig {
    fs: Arc<ExtentFs>,
    files: Vec<(Ino, Vec<u8>)>,
    prep: Preprocessor,
    target: Arc<EngineClient>,
    peer: Arc<EngineClient>,
}

fn rig(sizes: &[usize], target_policy: AdmissionPolicy) -> Rig {
    let fs = mem_fs();
    let files: Vec<_> = sizes
        .iter()
        .enumerate()
        .map(|(i, len)| seeded_file(&fs, &format!("item-{i:03}"), *len, 1000 + i as u64))
        .collect();
    let target = Arc::new(EngineClient::in_proc(
        engine_for(&fs, target_policy),
        "init-0",
    ));
    let peer = Arc::new(EngineClient::in_proc(
        engine_for(&fs, AdmissionPolicy::AcceptAll),
        "init-0",
    ));
    let offloader = Arc::new(TaskOffloader::new(fs.clone(), vec![target.clone(), peer.clone()]));
    Rig {
        fs,
        files,
        prep: Preprocessor::new(offloader),
        target,
        peer,
    }
}

fn item_inos(rig: &Rig) -> Vec<Ino> {
    rig.files.iter().map(|(ino, _)| *ino).collect()
}

fn assert_matches_oracle(rig: &Rig, results: &[offloadprep::TransformResult], id: TransformId) {
    assert_eq!(results.len(), rig.files.len());
    for (r, (ino, content)) in results.iter().zip(&rig.files) {
        assert_eq!(r.ino, *ino, "results must come back sorted by ino");
        let (digest, output_len) = transform(content, id);
        assert_eq!(r.digest, digest, "digest for ino {}", ino.0);
        assert_eq!(r.output_len, output_len);
    }
}

#[test]
fn local_batch_matches_direct_transform() {
    // Lengths cross block boundaries both ways, include an empty file and
    // a multi-extent file.
    let rig = rig(&[0, 1, 511, 512, 513, 777, 3000, 8192], AdmissionPolicy::AcceptAll);
    let id = TransformId(5);
    let batch = PrepBatch::new(item_inos(&rig), id);

    let (results, stats) = rig.prep.preprocess_batch(&batch).unwrap();
    assert_matches_oracle(&rig, &results, id);
    assert!(results.iter().all(|r| r.site == ExecutionSite::Local));
    assert_eq!(stats.planned, SiteCounts { local: 8, peer: 0, target: 0 });
    assert_eq!(stats.ran, stats.planned);
    assert_eq!(stats.fallbacks, 0);
    assert!(stats.failures.is_empty());
    assert_eq!(stats.turnaround, stats.site_wall.max());
    assert_eq!(stats.site_wall.target, Duration::ZERO);
    assert_eq!(stats.site_wall.peer, Duration::ZERO);
}

#[test]
fn any_split_yields_identical_results() {
    let sizes: Vec<usize> = (0..64).map(|i| 800 + 37 * i).collect();
    let rig = rig(&sizes, AdmissionPolicy::AcceptAll);
    let id = TransformId(2);
    let quarter = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };

    let mut digests_per_split = Vec::new();
    for split in [
        SplitSpec::ALL_LOCAL,
        SplitSpec::ALL_TARGET,
        SplitSpec::ALL_PEER,
        quarter,
    ] {
        let batch = PrepBatch::new(item_inos(&rig), id).with_split(split, 7);
        let (results, stats) = rig.prep.preprocess_batch(&batch).unwrap();
        assert_matches_oracle(&rig, &results, id);
        assert!(stats.failures.is_empty());
        assert_eq!(stats.ran, stats.planned, "AcceptAll admits everything");
        digests_per_split.push(
            results
                .iter()
                .map(|r| (r.ino, r.digest, r.output_len))
                .collect::<Vec<_>>(),
        );
    }
    for later in &digests_per_split[1..] {
        assert_eq!(&digests_per_split[0], later);
    }
}

#[test]
fn quarter_split_dispatches_by_count_and_round_trips() {
    let sizes: Vec<usize> = (0..64).map(|i| 600 + 13 * i).collect();
    let rig = rig(&sizes, AdmissionPolicy::AcceptAll);
    let quarter = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };
    let batch = PrepBatch::new(item_inos(&rig), TransformId(1)).with_split(quarter, 11);

    let target_before = rig.target.round_trips();
    let peer_before = rig.peer.round_trips();
    let (_, stats) = rig.prep.preprocess_batch(&batch).unwrap();

    assert_eq!(stats.planned, SiteCounts { local: 32, peer: 16, target: 16 });
    assert_eq!(stats.ran, stats.planned);
    assert_eq!(rig.target.round_trips() - target_before, 16);
    assert_eq!(rig.peer.round_trips() - peer_before, 16);
}

#[test]
fn split_placement_is_reproducible() {
    let sizes: Vec<usize> = (0..32).map(|i| 500 + 29 * i).collect();
    let rig = rig(&sizes, AdmissionPolicy::AcceptAll);
    let quarter = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };
    let batch = PrepBatch::new(item_inos(&rig), TransformId(4)).with_split(quarter, 21);

    let (first, _) = rig.prep.preprocess_batch(&batch).unwrap();
    let (second, _) = rig.prep.preprocess_batch(&batch).unwrap();
    let sites: Vec<_> = first.iter().map(|r| (r.ino, r.site)).collect();
    let again: Vec<_> = second.iter().map(|r| (r.ino, r.site)).collect();
    assert_eq!(sites, again, "same seed, same per-item placement");
}

#[test]
fn batches_never_write_the_volume() {
    let sizes: Vec<usize> = (0..24).map(|i| 700 + 41 * i).collect();
    let rig = rig(&sizes, AdmissionPolicy::AcceptAll);
    let quarter = SplitSpec { local: 0.5, peer: 0.25, target: 0.25 };
    let batch = PrepBatch::new(item_inos(&rig), TransformId(6)).with_split(quarter, 5);

    let before = rig.fs.volume().io_counts();
    let (results, stats) = rig.prep.preprocess_batch(&batch).unwrap();
    let after = rig.fs.volume().io_counts();

    assert_eq!(results.len(), 24);
    assert!(stats.failures.is_empty());
    assert_eq!(after.write_ops, before.write_ops, "read-only leases never write");
    assert_eq!(after.blocks_written, before.blocks_written);
    assert!(after.read_ops > before.read_ops);
}

#[test]
fn rejection_costs_one_round_trip_then_falls_back_locally() {
    let sizes: Vec<usize> = (0..16).map(|i| 600 + 100 * i).collect();
    let rig = rig(&sizes, AdmissionPolicy::RejectAll);
    let id = TransformId(3);
    let batch = PrepBatch::new(item_inos(&rig), id).with_split(SplitSpec::ALL_TARGET, 9);

    let target_before = rig.target.round_trips();
    let peer_before = rig.peer.round_trips();
    let (results, stats) = rig.prep.preprocess_batch(&batch).unwrap();

    assert_eq!(
        rig.target.round_trips() - target_before,
        16,
        "exactly one round trip per attempted item"
    );
    assert_eq!(rig.peer.round_trips(), peer_before);
    assert_matches_oracle(&rig, &results, id);
    assert!(results.iter().all(|r| r.site == ExecutionSite::Local));
    assert_eq!(stats.planned, SiteCounts { local: 0, peer: 0, target: 16 });
    assert_eq!(stats.ran, SiteCounts { local: 16, peer: 0, target: 0 });
    assert_eq!(stats.fallbacks, 16);
    assert!(stats.failures.is_empty());
}

#[test]
fn missing_item_fails_alone() {
    let rig = rig(&[900, 1800, 2700, 3600], AdmissionPolicy::AcceptAll);
    let id = TransformId(8);
    let mut items = item_inos(&rig);
    items.push(Ino(999_999));
    let batch = PrepBatch::new(items, id);

    let (results, stats) = rig.prep.preprocess_batch(&batch).unwrap();
    assert_matches_oracle(&rig, &results, id);
    assert_eq!(stats.failures.len(), 1);
    assert_eq!(stats.failures[0].0, Ino(999_999));
}

#[test]
fn remote_fractions_require_matching_clients() {
    let fs = mem_fs();
    seeded_file(&fs, "only", 1024, 1);
    let target = Arc::new(EngineClient::in_proc(
        engine_for(&fs, AdmissionPolicy::AcceptAll),
        "init-0",
    ));
    let prep = Preprocessor::new(Arc::new(TaskOffloader::new(fs.clone(), vec![target])));

    let items: Vec<Ino> = fs.list_files().into_iter().map(|(_, i)| i).collect();
    let peer_batch = PrepBatch::new(items.clone(), TransformId(0))
        .with_split(SplitSpec::ALL_PEER, 0);
    match prep.preprocess_batch(&peer_batch) {
        Err(PrepError::InvalidBatch(msg)) => assert!(msg.contains("peer")),
        other => panic!("expected InvalidBatch, got {other:?}"),
    }

    let no_clients = Preprocessor::new(Arc::new(TaskOffloader::new(fs, vec![])));
    let target_batch = PrepBatch::new(items, TransformId(0))
        .with_split(SplitSpec::ALL_TARGET, 0);
    assert!(matches!(
        no_clients.preprocess_batch(&target_batch),
        Err(PrepError::InvalidBatch(_))
    ));
}
