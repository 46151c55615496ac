//! End-to-end file system behavior: POSIX-ish file ops, durability across
//! remounts and crashes, lease-scoped mutual exclusion, and space
//! accounting.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offload_core::extentfs::{ExtentFs, FsError, Ino, MkfsOptions};
use offload_core::volume::sim::RecordingVolume;
use offload_core::volume::{BlockAddr, BlockRange, BlockStore, MemVolume, VolumeGeometry};

fn mem_fs(block_size: u32, blocks: u64) -> (Arc<MemVolume>, ExtentFs) {
    let vol = Arc::new(MemVolume::new(
        VolumeGeometry::new(block_size, blocks).unwrap(),
    ));
    let fs = ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap();
    (vol, fs)
}

#[test]
fn first_create_gets_ino_1() {
    let (_v, fs) = mem_fs(4096, 1024);
    assert_eq!(fs.create_file("wal-000").unwrap(), Ino(1));
    assert_eq!(fs.lookup("wal-000"), Some(Ino(1)));
    let (size, mtime) = fs.stat(Ino(1)).unwrap();
    assert_eq!(size, 0);
    assert_eq!(mtime, 1);
}

#[test]
fn duplicate_name_rejected() {
    let (_v, fs) = mem_fs(4096, 1024);
    fs.create_file("a").unwrap();
    assert!(matches!(
        fs.create_file("a"),
        Err(FsError::DuplicateName(_))
    ));
}

#[test]
fn deleted_ino_is_reused() {
    let (_v, fs) = mem_fs(4096, 1024);
    let i1 = fs.create_file("f1").unwrap();
    let i2 = fs.create_file("f2").unwrap();
    let i3 = fs.create_file("f3").unwrap();
    assert_eq!((i1, i2, i3), (Ino(1), Ino(2), Ino(3)));
    fs.delete_file(i2).unwrap();
    assert_eq!(fs.create_file("f4").unwrap(), Ino(2));
}

#[test]
fn preallocate_arithmetic() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("sst").unwrap();
    let extents = fs.preallocate(ino, 8192).unwrap();
    let total: u64 = extents.iter().map(|e| e.len).sum();
    assert_eq!(total, 2);
    // Size is unchanged: reserved, not valid data.
    assert_eq!(fs.stat(ino).unwrap().0, 0);
}

#[test]
fn preallocate_block_count_matches_request() {
    let (_v, fs) = mem_fs(4096, 2048);
    let ino = fs.create_file("compaction-out").unwrap();
    // Reserve space equal to a 1 MiB victim set: 256 blocks.
    let extents = fs.preallocate(ino, 1 << 20).unwrap();
    let total: u64 = extents.iter().map(|e| e.len).sum();
    assert_eq!(total, 256);
}

#[test]
fn preallocate_out_of_space() {
    let (_v, fs) = mem_fs(512, 64);
    let ino = fs.create_file("big").unwrap();
    let free = fs.free_blocks();
    assert!(fs.preallocate(ino, (free + 1) * 512).is_err());
    // Failed allocation must not leak.
    assert_eq!(fs.free_blocks(), free);
    fs.verify_space_accounting().unwrap();
}

#[test]
fn append_allocates_and_sets_size() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("wal").unwrap();
    let entry = vec![7u8; 100];
    fs.write(ino, 0, &entry).unwrap();
    assert_eq!(fs.stat(ino).unwrap().0, 100);
    assert_eq!(fs.read(ino, 0, 100).unwrap(), entry);
    let extents = fs.file_extents(ino).unwrap();
    assert_eq!(extents.iter().map(|e| e.len).sum::<u64>(), 1);
}

#[test]
fn mtime_strictly_increases() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("f").unwrap();
    let (_, m0) = fs.stat(ino).unwrap();
    fs.write(ino, 0, b"one").unwrap();
    let (_, m1) = fs.stat(ino).unwrap();
    fs.write(ino, 3, b"two").unwrap();
    let (_, m2) = fs.stat(ino).unwrap();
    assert!(m1 > m0 && m2 > m1);
    assert!(m2 >= m0 + 2);
    fs.preallocate(ino, 4096).unwrap();
    let (_, m3) = fs.stat(ino).unwrap();
    assert!(m3 > m2);
    fs.release_tail(ino, 4096).unwrap();
    let (_, m4) = fs.stat(ino).unwrap();
    assert!(m4 > m3);
}

#[test]
fn shadow_array_oracle_random_writes() {
    let (_v, fs) = mem_fs(512, 4096);
    let ino = fs.create_file("blob").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let max_file = 200_000usize;
    let mut shadow = vec![0u8; max_file];
    let mut size = 0usize;

    for _ in 0..1000 {
        let offset = rng.gen_range(0..max_file as u64 / 2);
        let len = rng.gen_range(1..=3000usize).min(max_file - offset as usize);
        let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        fs.write(ino, offset, &data).unwrap();
        shadow[offset as usize..offset as usize + len].copy_from_slice(&data);
        size = size.max(offset as usize + len);
        assert_eq!(fs.stat(ino).unwrap().0, size as u64);
    }
    // Full-file readback, plus random windows.
    assert_eq!(fs.read(ino, 0, size).unwrap(), shadow[..size]);
    for _ in 0..200 {
        let offset = rng.gen_range(0..size as u64);
        let len = rng.gen_range(0..=2000usize).min(size - offset as usize);
        assert_eq!(
            fs.read(ino, offset, len).unwrap(),
            shadow[offset as usize..offset as usize + len]
        );
    }
    fs.verify_space_accounting().unwrap();
}

#[test]
fn holes_read_as_zeroes() {
    let (_v, fs) = mem_fs(512, 1024);
    let ino = fs.create_file("sparse").unwrap();
    fs.write(ino, 10_000, b"tail").unwrap();
    assert_eq!(fs.stat(ino).unwrap().0, 10_004);
    let head = fs.read(ino, 0, 10_000).unwrap();
    assert!(head.iter().all(|&b| b == 0));
    assert_eq!(fs.read(ino, 10_000, 4).unwrap(), b"tail");
}

#[test]
fn read_out_of_bounds() {
    let (_v, fs) = mem_fs(512, 256);
    let ino = fs.create_file("f").unwrap();
    fs.write(ino, 0, &[1u8; 100]).unwrap();
    assert!(matches!(
        fs.read(ino, 50, 51),
        Err(FsError::OutOfBounds { .. })
    ));
    assert!(fs.read(ino, 100, 0).is_ok());
}

#[test]
fn release_tail_frees_exactly_the_unused_blocks() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("out").unwrap();
    fs.preallocate(ino, 10 * 4096).unwrap();
    let freed = fs.release_tail(ino, 6 * 4096).unwrap();
    assert_eq!(freed, 4);
    let extents = fs.file_extents(ino).unwrap();
    assert_eq!(extents.iter().map(|e| e.len).sum::<u64>(), 6);
    fs.verify_space_accounting().unwrap();
}

#[test]
fn delete_returns_blocks() {
    let (_v, fs) = mem_fs(4096, 1024);
    let before = fs.free_blocks();
    let ino = fs.create_file("f").unwrap();
    fs.write(ino, 0, &vec![1u8; 5 * 4096]).unwrap();
    assert_eq!(fs.free_blocks(), before - 5);
    fs.delete_file(ino).unwrap();
    assert_eq!(fs.free_blocks(), before);
    assert!(matches!(fs.stat(ino), Err(FsError::NoSuchFile(_))));
    fs.verify_space_accounting().unwrap();
}

/// Helper: lease covering the whole extent list of a file.
fn whole_file_ranges(fs: &ExtentFs, ino: Ino) -> Vec<(Ino, BlockRange)> {
    fs.file_extents(ino)
        .unwrap()
        .into_iter()
        .map(|e| (ino, e.phys_range()))
        .collect()
}

#[test]
fn read_only_lease_keeps_initiator_reads_working() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("victim").unwrap();
    fs.write(ino, 0, &vec![9u8; 8192]).unwrap();
    let hints = fs.current_hints(&[ino]).unwrap();
    let lease = fs
        .grant_lease(&whole_file_ranges(&fs, ino), &[], hints)
        .unwrap();
    assert!(lease.is_active());
    // Reads (and even writes) by the initiator are still fine.
    assert_eq!(fs.read(ino, 0, 10).unwrap(), vec![9u8; 10]);
    fs.write(ino, 0, b"x").unwrap();
    fs.complete_lease(lease.id, &[]).unwrap();
}

#[test]
fn overlapping_write_leases_rejected() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("out").unwrap();
    fs.preallocate(ino, 4 * 4096).unwrap();
    let ranges = whole_file_ranges(&fs, ino);
    let first = fs.grant_lease(&[], &ranges, vec![]).unwrap();
    assert!(matches!(
        fs.grant_lease(&[], &ranges, vec![]),
        Err(FsError::LeaseConflict { .. })
    ));
    // Read leases over an active write set are rejected too.
    assert!(matches!(
        fs.grant_lease(&ranges, &[], vec![]),
        Err(FsError::LeaseConflict { .. })
    ));
    fs.complete_lease(first.id, &[4 * 4096]).unwrap();
    // After completion the blocks are free to lease again.
    fs.grant_lease(&[], &whole_file_ranges(&fs, ino), vec![])
        .unwrap();
}

#[test]
fn victim_read_output_write_lease_granted() {
    let (_v, fs) = mem_fs(4096, 1024);
    let victim = fs.create_file("victim").unwrap();
    fs.write(victim, 0, &vec![1u8; 2 * 4096]).unwrap();
    let out = fs.create_file("out").unwrap();
    fs.preallocate(out, 2 * 4096).unwrap();
    let lease = fs
        .grant_lease(
            &whole_file_ranges(&fs, victim),
            &whole_file_ranges(&fs, out),
            fs.current_hints(&[victim]).unwrap(),
        )
        .unwrap();
    assert_eq!(lease.read_set.len(), 1);
    assert_eq!(lease.write_set.len(), 1);
}

#[test]
fn initiator_io_to_leased_write_set_rejected() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("out").unwrap();
    fs.write(ino, 0, &vec![5u8; 3 * 4096]).unwrap();
    let lease = fs
        .grant_lease(&[], &whole_file_ranges(&fs, ino), vec![])
        .unwrap();
    assert!(matches!(
        fs.write(ino, 0, b"no"),
        Err(FsError::LeaseConflict { .. })
    ));
    assert!(matches!(
        fs.read(ino, 0, 1),
        Err(FsError::LeaseConflict { .. })
    ));
    assert!(matches!(
        fs.delete_file(ino),
        Err(FsError::LeaseConflict { .. })
    ));
    assert!(matches!(
        fs.release_tail(ino, 0),
        Err(FsError::LeaseConflict { .. })
    ));
    fs.complete_lease(lease.id, &[3 * 4096]).unwrap();
    fs.write(ino, 0, b"ok").unwrap();
}

#[test]
fn unowned_extent_rejected() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("f").unwrap();
    fs.write(ino, 0, &[1u8; 4096]).unwrap();
    let data = fs.data_region();
    // A range the file does not own.
    let bogus = BlockRange::new(data.end() - 2, 2);
    assert!(matches!(
        fs.grant_lease(&[(ino, bogus)], &[], vec![]),
        Err(FsError::UnownedExtent { .. })
    ));
}

#[test]
fn complete_lease_frees_tail_and_extends_size() {
    let (v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("sst").unwrap();
    fs.preallocate(ino, 10 * 4096).unwrap();
    let ranges = whole_file_ranges(&fs, ino);
    let lease = fs.grant_lease(&[], &ranges, vec![]).unwrap();

    // Simulate the offloaded task writing 6.5 blocks of output directly to
    // the volume through its write set.
    let ext = lease.write_set[0];
    let payload = vec![0xabu8; (6 * 4096 + 2048) as usize];
    let mut img = payload.clone();
    img.resize(7 * 4096, 0);
    v.write_blocks(BlockAddr(ext.range.start), &img).unwrap();

    let freed = fs.complete_lease(lease.id, &[payload.len() as u64]).unwrap();
    assert_eq!(freed.iter().map(|r| r.len).sum::<u64>(), 3);
    let (size, _) = fs.stat(ino).unwrap();
    assert_eq!(size, payload.len() as u64);
    assert_eq!(fs.read(ino, 0, payload.len()).unwrap(), payload);
    assert_eq!(fs.file_extents(ino).unwrap().iter().map(|e| e.len).sum::<u64>(), 7);
    fs.verify_space_accounting().unwrap();

    // Completing twice is an error.
    assert!(matches!(
        fs.complete_lease(lease.id, &[0]),
        Err(FsError::LeaseNotActive(_))
    ));
    assert!(matches!(
        fs.complete_lease(offload_core::LeaseId(999), &[]),
        Err(FsError::UnknownLease(_))
    ));
}

#[test]
fn abort_lease_frees_write_set() {
    let (_v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("out").unwrap();
    fs.preallocate(ino, 5 * 4096).unwrap();
    let free_before = fs.free_blocks();
    let lease = fs
        .grant_lease(&[], &whole_file_ranges(&fs, ino), vec![])
        .unwrap();
    fs.abort_lease(lease.id).unwrap();
    assert_eq!(fs.free_blocks(), free_before + 5);
    assert_eq!(fs.stat(ino).unwrap().0, 0);
    assert!(fs.file_extents(ino).unwrap().is_empty());
    fs.verify_space_accounting().unwrap();
}

#[test]
fn mkfs_rejects_tiny_volume() {
    let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 63).unwrap()));
    assert!(matches!(
        ExtentFs::mkfs(vol as Arc<dyn BlockStore>),
        Err(FsError::VolumeTooSmall { .. })
    ));
}

#[test]
fn remount_after_clean_sync() {
    let (v, fs) = mem_fs(4096, 1024);
    let ino = fs.create_file("keep").unwrap();
    fs.write(ino, 0, b"durable bytes").unwrap();
    fs.sync().unwrap();
    drop(fs);

    let fs2 = ExtentFs::mount(Arc::clone(&v) as Arc<dyn BlockStore>).unwrap();
    assert_eq!(fs2.replayed_records(), 0);
    let ino2 = fs2.lookup("keep").unwrap();
    assert_eq!(fs2.read(ino2, 0, 13).unwrap(), b"durable bytes");
    fs2.verify_space_accounting().unwrap();
}

#[test]
fn remount_replays_journal_tail() {
    let (v, fs) = mem_fs(4096, 1024);
    let a = fs.create_file("a").unwrap();
    fs.write(a, 0, &vec![1u8; 9000]).unwrap();
    let b = fs.create_file("b").unwrap();
    fs.preallocate(b, 3 * 4096).unwrap();
    fs.delete_file(a).unwrap();
    // No sync: everything since mkfs lives only in the journal.
    drop(fs);

    let fs2 = ExtentFs::mount(Arc::clone(&v) as Arc<dyn BlockStore>).unwrap();
    assert!(fs2.replayed_records() > 0);
    assert_eq!(fs2.lookup("a"), None);
    let b2 = fs2.lookup("b").unwrap();
    assert_eq!(fs2.file_extents(b2).unwrap().iter().map(|e| e.len).sum::<u64>(), 3);
    fs2.verify_space_accounting().unwrap();

    // The dirty mount checkpointed; a third mount replays nothing.
    drop(fs2);
    let fs3 = ExtentFs::mount(Arc::clone(&v) as Arc<dyn BlockStore>).unwrap();
    assert_eq!(fs3.replayed_records(), 0);
    assert_eq!(fs3.lookup("b").is_some(), true);
}

#[test]
fn tiny_journal_forces_checkpoints() {
    let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 2048).unwrap()));
    let fs = ExtentFs::mkfs_with(
        Arc::clone(&vol) as Arc<dyn BlockStore>,
        MkfsOptions {
            journal_blocks: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let ino = fs.create_file("churn").unwrap();
    for i in 0..200u64 {
        fs.write(ino, (i % 40) * 100, &[i as u8; 100]).unwrap();
    }
    assert!(fs.checkpoints_written() > 1);
    drop(fs);
    let fs2 = ExtentFs::mount(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap();
    let ino2 = fs2.lookup("churn").unwrap();
    assert_eq!(fs2.stat(ino2).unwrap().0, 39 * 100 + 100);
    fs2.verify_space_accounting().unwrap();
}

/// Replays every write-call prefix of a short randomized trace and checks
/// that each crash image mounts to a consistent file system whose contents
/// match the operations that had completed.
#[test]
fn crash_prefixes_mount_consistently() {
    let geom = VolumeGeometry::new(512, 2048).unwrap();
    let base = Arc::new(MemVolume::new(geom));
    let rec = Arc::new(RecordingVolume::new(
        Arc::clone(&base) as Arc<dyn BlockStore>
    ));
    let fs = ExtentFs::mkfs(Arc::clone(&rec) as Arc<dyn BlockStore>).unwrap();

    // A short mixed trace; completed-op boundaries are recorded as write
    // counts so the sweep can tell acked ops from in-flight ones.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut acked: Vec<(usize, Vec<(String, Vec<u8>)>)> = Vec::new();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let snapshot_after_mkfs = rec.write_count();
    for i in 0..30 {
        let roll: u8 = rng.gen_range(0..10);
        if roll < 6 || files.is_empty() {
            let name = format!("f{}", i);
            let ino = fs.create_file(&name).unwrap();
            let len = rng.gen_range(1..2000usize);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            fs.write(ino, 0, &data).unwrap();
            files.push((name, data));
        } else {
            let idx = rng.gen_range(0..files.len());
            let (name, _) = files.remove(idx);
            fs.delete_file(fs.lookup(&name).unwrap()).unwrap();
        }
        acked.push((rec.write_count(), files.clone()));
    }
    let log = rec.take_log();

    // Forward image replay: crash after each write call.
    let mut image = vec![0u8; geom.capacity_bytes() as usize];
    let mut next_ack = 0usize;
    for k in 0..=log.len() {
        if k > 0 {
            let w = &log[k - 1];
            let off = (w.addr * 512) as usize;
            image[off..off + w.data.len()].copy_from_slice(&w.data);
        }
        if k < snapshot_after_mkfs {
            continue;
        }
        let vol = Arc::new(MemVolume::from_bytes(geom, image.clone()));
        let fs2 = ExtentFs::mount(vol as Arc<dyn BlockStore>).unwrap();
        fs2.verify_space_accounting().unwrap();
        // Every op acked at or before this point must be fully visible.
        while next_ack < acked.len() && acked[next_ack].0 <= k {
            next_ack += 1;
        }
        if next_ack > 0 {
            let (_, expect_files) = &acked[next_ack - 1];
            for (name, data) in expect_files {
                let ino = fs2.lookup(name).unwrap_or_else(|| {
                    panic!("file {} missing after crash at write {}", name, k)
                });
                assert_eq!(&fs2.read(ino, 0, data.len()).unwrap(), data);
            }
        }
    }
}

#[test]
fn many_extents_overflow_inline_capacity_and_survive_remount() {
    let vol = Arc::new(MemVolume::new(VolumeGeometry::new(512, 4096).unwrap()));
    let fs = ExtentFs::mkfs(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap();
    // Interleave two files' appends so extents cannot coalesce.
    let a = fs.create_file("a").unwrap();
    let b = fs.create_file("b").unwrap();
    for i in 0..20u64 {
        fs.write(a, i * 512, &[1u8; 512]).unwrap();
        fs.write(b, i * 512, &[2u8; 512]).unwrap();
    }
    let ea = fs.file_extents(a).unwrap();
    assert!(ea.len() > 4, "expected fragmented file, got {:?}", ea.len());
    fs.sync().unwrap();
    drop(fs);
    let fs2 = ExtentFs::mount(Arc::clone(&vol) as Arc<dyn BlockStore>).unwrap();
    let a2 = fs2.lookup("a").unwrap();
    assert_eq!(fs2.file_extents(a2).unwrap(), ea);
    assert_eq!(fs2.read(a2, 0, 20 * 512).unwrap(), vec![1u8; 20 * 512]);
    fs2.verify_space_accounting().unwrap();
}

#[test]
fn random_trace_space_accounting() {
    let (_v, fs) = mem_fs(512, 4096);
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut live: Vec<Ino> = Vec::new();
    for i in 0..400 {
        match rng.gen_range(0..10) {
            0..=3 => {
                if let Ok(ino) = fs.create_file(&format!("t{}", i)) {
                    live.push(ino);
                }
            }
            4..=6 if !live.is_empty() => {
                let ino = live[rng.gen_range(0..live.len())];
                let off = rng.gen_range(0..50_000);
                let len = rng.gen_range(1..4000);
                match fs.write(ino, off, &vec![3u8; len]) {
                    Ok(()) | Err(FsError::NoSpace { .. }) => {}
                    Err(e) => panic!("unexpected write error: {}", e),
                }
            }
            7 if !live.is_empty() => {
                let ino = live[rng.gen_range(0..live.len())];
                let _ = fs.preallocate(ino, rng.gen_range(1..20_000));
            }
            8 if !live.is_empty() => {
                let ino = live[rng.gen_range(0..live.len())];
                let keep = rng.gen_range(0..10_000);
                let _ = fs.release_tail(ino, keep);
            }
            9 if !live.is_empty() => {
                let idx = rng.gen_range(0..live.len());
                let ino = live.remove(idx);
                fs.delete_file(ino).unwrap();
            }
            _ => {}
        }
    }
    fs.verify_space_accounting().unwrap();
}
