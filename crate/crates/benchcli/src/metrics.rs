//! Metric rows and CSV rendering.
//!
//! One [`MetricsRow`] per experiment configuration, under a fixed
//! header. Byte counters, hit ratios, and site counts are deterministic
//! for a given seed and config; throughput, latency, and stall time are
//! wall-clock measurements and vary run to run.

use std::io::{self, Write};
use std::time::Duration;

pub const CSV_HEADER: &str = "experiment,config,seed,throughput_ops,lat_p50_us,lat_p99_us,\
tx_bytes,rx_bytes,offcache_hit,blockcache_hit,site_local,site_target,site_peer,stall_ms";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub config: String,
    pub seed: u64,
    pub throughput_ops: f64,
    pub lat_p50_us: u64,
    pub lat_p99_us: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub offcache_hit: f64,
    pub blockcache_hit: f64,
    pub site_local: u64,
    pub site_target: u64,
    pub site_peer: u64,
    pub stall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.1},{},{},{},{},{:.4},{:.4},{},{},{},{}",
            self.experiment,
            self.config,
            self.seed,
            self.throughput_ops,
            self.lat_p50_us,
            self.lat_p99_us,
            self.tx_bytes,
            self.rx_bytes,
            self.offcache_hit,
            self.blockcache_hit,
            self.site_local,
            self.site_target,
            self.site_peer,
            self.stall_ms,
        )
    }

    /// The columns that must reproduce exactly for identical seed+config.
    pub fn deterministic_columns(&self) -> (u64, u64, String, String, u64, u64, u64) {
        (
            self.tx_bytes,
            self.rx_bytes,
            format!("{:.4}", self.offcache_hit),
            format!("{:.4}", self.blockcache_hit),
            self.site_local,
            self.site_target,
            self.site_peer,
        )
    }
}

pub fn write_csv(rows: &[MetricsRow], out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.csv_line())?;
    }
    Ok(())
}

/// Collects per-op latencies and derives the row's timing columns.
#[derive(Debug, Default)]
pub struct LatencyRecorder {
    samples_us: Vec<u64>,
}

impl LatencyRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, d: Duration) {
        self.samples_us.push(d.as_micros() as u64);
    }

    pub fn merge(&mut self, other: LatencyRecorder) {
        self.samples_us.extend(other.samples_us);
    }

    pub fn len(&self) -> usize {
        self.samples_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_us.is_empty()
    }

    /// Nearest-rank percentile; 0 when nothing was recorded.
    pub fn percentile_us(&self, p: f64) -> u64 {
        if self.samples_us.is_empty() {
            return 0;
        }
        let mut sorted = self.samples_us.clone();
        sorted.sort_unstable();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    }

    pub fn throughput(&self, elapsed: Duration) -> f64 {
        if elapsed.is_zero() {
            return 0.0;
        }
        self.samples_us.len() as f64 / elapsed.as_secs_f64()
    }
}
