//! End-to-end harness checks: experiment determinism, byte accounting
//! against transport counters, the remote-target topology, and the
//! compiled binary's surface.

use std::process::Command;

use benchcli::config::{BenchConfig, BenchError, FioMode};
use benchcli::experiments::{fio_like, run_experiment, serve_target, ycsb_run};
use benchcli::metrics::{write_csv, MetricsRow, CSV_HEADER};
use benchcli::workload::WorkloadSpec;
use offload_core::volume::{create_volume, Backing};
use offload_core::VolumeGeometry;

fn small_cfg() -> BenchConfig {
    let mut cfg = BenchConfig::default();
    cfg.blocks = 32 * 1024;
    cfg.workload = WorkloadSpec { records: 200, ops: 1_000, ..WorkloadSpec::default() };
    cfg
}

#[test]
fn ycsb_same_seed_reproduces_every_deterministic_column() {
    let cfg = small_cfg();
    let a = run_experiment("ycsb", &cfg, 11).unwrap();
    let b = run_experiment("ycsb", &cfg, 11).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].deterministic_columns(), b[0].deterministic_columns());

    let c = run_experiment("ycsb", &cfg, 12).unwrap();
    assert_ne!(
        a[0].deterministic_columns(),
        c[0].deterministic_columns(),
        "a different seed should at least shuffle the byte counts"
    );
}

#[test]
fn ycsb_row_bytes_come_from_the_transport_counters() {
    let cfg = small_cfg();
    let out = ycsb_run(&cfg, cfg.db.clone(), 5, "probe").unwrap();
    assert!(out.row.tx_bytes > 0, "load + run must ship bytes to the volume");
    assert!(out.row.rx_bytes > 0);
    assert_eq!(out.row.tx_bytes, out.rig.tx_bytes());
    assert_eq!(out.row.rx_bytes, out.rig.rx_bytes());
}

#[test]
fn fio_byte_columns_are_exact_products_of_the_op_budget() {
    let geom = VolumeGeometry::new(512, 16 * 1024).unwrap();
    let vol = create_volume(&Backing::Memory, geom).unwrap();
    let dur = std::time::Duration::from_millis(50);
    let ops = 50 * 20_000 / 1000; // duration at the nominal rate

    let w = fio_like(vol.as_ref(), FioMode::RandWrite, 4096, dur, 3).unwrap();
    assert_eq!(w.tx_bytes, ops * 4096);
    assert_eq!(w.rx_bytes, 0);

    let r = fio_like(vol.as_ref(), FioMode::RandRead, 4096, dur, 3).unwrap();
    assert_eq!(r.rx_bytes, ops * 4096);
    assert_eq!(r.tx_bytes, 0);

    let r2 = fio_like(vol.as_ref(), FioMode::RandRead, 4096, dur, 3).unwrap();
    assert_eq!(r.deterministic_columns(), r2.deterministic_columns());
}

#[test]
fn offloading_maintenance_cuts_initiator_link_traffic() {
    let mut cfg = small_cfg();
    cfg.workload.ops = 4_000;
    let rows = run_experiment("offload-sweep", &cfg, 21).unwrap();
    let local = rows.iter().find(|r| r.config == "local").unwrap();
    let all = rows.iter().find(|r| r.config == "all").unwrap();
    assert!(
        all.tx_bytes < local.tx_bytes,
        "offloaded maintenance still shipped {} tx bytes vs {} local",
        all.tx_bytes,
        local.tx_bytes
    );
    assert!(all.rx_bytes < local.rx_bytes);
    assert_eq!(local.site_target, 0);
    assert!(all.site_target > 0);
}

#[test]
fn unknown_experiment_and_bad_workload_are_rejected() {
    let cfg = small_cfg();
    assert!(matches!(
        run_experiment("warp-drive", &cfg, 1),
        Err(BenchError::UnknownExperiment(_))
    ));

    let mut bad = small_cfg();
    bad.workload.read_fraction = 0.9;
    assert!(matches!(run_experiment("ycsb", &bad, 1), Err(BenchError::BadConfig(_))));
}

#[test]
fn remote_target_runs_the_same_workload_over_tcp() {
    let mut target_cfg = BenchConfig::default();
    target_cfg.blocks = 32 * 1024;
    let server = serve_target(&target_cfg, "127.0.0.1:0").unwrap();
    let addr = server.addr().to_string();

    let mut cfg = small_cfg();
    cfg.target_addr = Some(addr);
    let rows = run_experiment("ycsb", &cfg, 9).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].tx_bytes > 0, "wire traffic must be visible in the row");
    assert!(rows[0].rx_bytes > 0);
    server.shutdown();
}

#[test]
fn csv_round_trips_with_a_stable_header() {
    let rows = vec![
        MetricsRow { experiment: "x".into(), config: "a".into(), ..Default::default() },
        MetricsRow { experiment: "y".into(), config: "c".into(), seed: 4, ..Default::default() },
    ];
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(CSV_HEADER.split(',').count(), 14);
    for line in lines {
        assert!(!line.is_empty());
    }
}

#[test]
fn bench_binary_lists_runs_and_writes_csv() {
    let bin = env!("CARGO_BIN_EXE_bench");

    let list = Command::new(bin).arg("list").output().unwrap();
    assert!(list.status.success());
    let names = String::from_utf8(list.stdout).unwrap();
    assert!(names.contains("ycsb") && names.contains("fio-like"));

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bench.cfg");
    std::fs::write(&cfg_path, "blocks = 16384\nduration_ms = 10\nio_size = 2048\n").unwrap();
    let csv_path = dir.path().join("out.csv");

    let run = Command::new(bin)
        .args(["run", "--experiment", "fio-like", "--seed", "3"])
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["--out", csv_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));

    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(lines.count(), 2, "one row per fio mode");

    let bad = Command::new(bin).args(["run", "--experiment", "nope"]).output().unwrap();
    assert!(!bad.status.success());

    let mkfs = Command::new(bin)
        .args(["mkfs", "--vol", "mem", "--blocks", "4096"])
        .output()
        .unwrap();
    assert!(mkfs.status.success());
    assert!(String::from_utf8(mkfs.stdout).unwrap().contains("volume id"));
}
