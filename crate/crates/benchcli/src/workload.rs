//! Seeded workload generation: op mixes over uniform or Zipfian key
//! distributions, with YCSB-style fixed-width keys and random values.
//!
//! Everything here is a pure function of (spec, seed): two calls with
//! the same arguments produce identical op sequences, which is what
//! makes experiment rows reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ZIPF_THETA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Insert every record once, in key order.
    Load,
    /// Apply the op mix over the loaded key space.
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDist {
    Uniform,
    Zipfian,
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub read_fraction: f64,
    pub update_fraction: f64,
    pub insert_fraction: f64,
    pub scan_fraction: f64,
    /// Records inserted by the load phase.
    pub records: usize,
    /// Operations issued by the run phase.
    pub ops: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub dist: KeyDist,
    pub threads: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        // YCSB-A shape: half reads, half updates, 24-byte keys, 1 KiB values.
        Self {
            read_fraction: 0.5,
            update_fraction: 0.5,
            insert_fraction: 0.0,
            scan_fraction: 0.0,
            records: 2_000,
            ops: 10_000,
            key_len: 24,
            value_len: 1_024,
            dist: KeyDist::Uniform,
            threads: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        let mix = [
            self.read_fraction,
            self.update_fraction,
            self.insert_fraction,
            self.scan_fraction,
        ];
        if mix.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(format!("op mix fractions must be non-negative: {mix:?}"));
        }
        let sum: f64 = mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("op mix sums to {sum}, expected 1"));
        }
        if self.key_len < 12 {
            return Err("key_len must be at least 12".into());
        }
        if self.records == 0 {
            return Err("records must be positive".into());
        }
        if self.threads == 0 {
            return Err("threads must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BenchOp {
    Read(Vec<u8>),
    Insert(Vec<u8>, Vec<u8>),
    Update(Vec<u8>, Vec<u8>),
    Scan(Vec<u8>, usize),
}

/// Fixed-width key: `user` followed by a zero-padded decimal index.
pub fn make_key(index: u64, key_len: usize) -> Vec<u8> {
    let digits = key_len.saturating_sub(4);
    format!("user{index:0digits$}").into_bytes()
}

/// Rejection-free Zipfian sampler over `0..n` (YCSB's generator): the
/// analytic inverse of the zeta CDF, so every draw costs one uniform
/// sample regardless of skew.
pub struct Zipfian {
    n: usize,
    theta: f64,
    alpha: f64,
    zetan: f64,
    eta: f64,
    half_pow: f64,
}

impl Zipfian {
    pub fn new(n: usize, theta: f64) -> Self {
        assert!(n > 0, "zipfian needs a non-empty key space");
        assert!(theta > 0.0 && theta < 1.0, "theta must lie in (0, 1)");
        let zetan: f64 = (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum();
        let zeta2 = 1.0 + 0.5f64.powf(theta);
        let alpha = 1.0 / (1.0 - theta);
        let eta = (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta2 / zetan);
        Self { n, theta, alpha, zetan, eta, half_pow: 0.5f64.powf(theta) }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + self.half_pow {
            return 1;
        }
        let raw = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as usize;
        raw.min(self.n - 1)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

fn random_value(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

/// Generates the deterministic op sequence for one phase. Run-phase
/// inserts extend the key space past `records`, exactly as YCSB does.
pub fn generate_ops(spec: &WorkloadSpec, seed: u64, phase: Phase) -> Vec<BenchOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match phase {
        Phase::Load => (0..spec.records)
            .map(|i| {
                BenchOp::Insert(
                    make_key(i as u64, spec.key_len),
                    random_value(&mut rng, spec.value_len),
                )
            })
            .collect(),
        Phase::Run => {
            let zipf = match spec.dist {
                KeyDist::Zipfian => Some(Zipfian::new(spec.records, ZIPF_THETA)),
                KeyDist::Uniform => None,
            };
            let mut next_insert = spec.records as u64;
            let mut ops = Vec::with_capacity(spec.ops);
            for _ in 0..spec.ops {
                let pick = rng.gen::<f64>();
                let existing = match &zipf {
                    Some(z) => z.sample(&mut rng) as u64,
                    None => rng.gen_range(0..spec.records as u64),
                };
                let key = make_key(existing, spec.key_len);
                let op = if pick < spec.read_fraction {
                    BenchOp::Read(key)
                } else if pick < spec.read_fraction + spec.update_fraction {
                    BenchOp::Update(key, random_value(&mut rng, spec.value_len))
                } else if pick < spec.read_fraction + spec.update_fraction + spec.insert_fraction {
                    let k = make_key(next_insert, spec.key_len);
                    next_insert += 1;
                    BenchOp::Insert(k, random_value(&mut rng, spec.value_len))
                } else {
                    BenchOp::Scan(key, 1 + (rng.gen::<u8>() % 32) as usize)
                };
                ops.push(op);
            }
            ops
        }
    }
}
