//! Synthetic decode workloads.
//!
//! Every workload is a function of its config alone: prefill tokens, the
//! per-step query heads and the token appended after each step all come from
//! one seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::TieredCache;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Gaussian,
    Sink,
    Needle,
    NearTie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    /// Prefill length in tokens.
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ingest_binary16: bool,
}

fn default_block_size() -> usize {
    16
}

fn default_group_size() -> usize {
    16
}

impl WorkloadConfig {
    pub fn new(kind: WorkloadKind, n: usize, d: usize, h_q: usize, h_kv: usize, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            d,
            block_size: default_block_size(),
            group_size: default_group_size().min(d),
            h_q,
            h_kv,
            steps,
            seed,
            ingest_binary16: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.d == 0 || self.block_size == 0 {
            return bad("d and block_size must be positive".into());
        }
        if self.h_kv == 0 || self.h_q == 0 || self.h_q % self.h_kv != 0 {
            return bad(format!("h_kv {} must divide h_q {}", self.h_kv, self.h_q));
        }
        if self.group_size == 0 || self.d % self.group_size != 0 {
            return bad(format!("group_size {} must divide d {}", self.group_size, self.d));
        }
        match self.kind {
            WorkloadKind::Sink | WorkloadKind::NearTie if self.n < 2 * self.block_size => {
                bad(format!("{:?} workload needs at least two full blocks", self.kind))
            }
            _ => Ok(()),
        }
    }

    /// Query heads sharing one KV head.
    pub fn group(&self) -> usize {
        self.h_q / self.h_kv
    }
}

/// A generated workload: prefilled caches, the query heads of every step and
/// the token each KV head appends after that step.
#[derive(Debug, Clone)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub caches: Vec<TieredCache>,
    /// `queries[step][head]`.
    pub queries: Vec<Vec<Vec<f32>>>,
    /// `appends[step][kv_head] = (key, value)`.
    pub appends: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
    /// Planted blocks per KV head: the sink block, the needle's block, or the
    /// near-tie pair. Empty for Gaussian workloads.
    pub planted_blocks: Vec<usize>,
}

/// Query norm along the planted direction.
const QUERY_SIGNAL: f64 = 8.0;
/// Per-channel query noise around the planted direction.
const QUERY_NOISE: f64 = 0.3;
/// Planted key component for sink tokens.
const SINK_SIGNAL: f64 = 14.0;
/// Planted key component for the needle token.
const NEEDLE_SIGNAL: f64 = 12.0;
/// Planted key component shared by both near-tie blocks.
const NEAR_TIE_SIGNAL: f64 = 4.0;
/// Independent jitter separating the second near-tie block from the first.
const NEAR_TIE_JITTER: f64 = 0.01;

fn normal_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let v = normal_vec(rng, len, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

pub fn generate_workload(config: &WorkloadConfig) -> Result<Workload> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let b = config.block_size;
    let full_blocks = config.n / b;

    // One planted direction per KV head; the heads of a group share it.
    let directions: Vec<Vec<f64>> = (0..config.h_kv).map(|_| unit_vec(&mut rng, d)).collect();

    let mut caches = Vec::with_capacity(config.h_kv);
    let mut planted_blocks = Vec::new();
    for (kv, u) in directions.iter().enumerate() {
        let mut cache = TieredCache::new(b, d, config.group_size)?.with_binary16_ingest(config.ingest_binary16);
        let mut keys: Vec<Vec<f64>> = (0..config.n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let values: Vec<Vec<f64>> = (0..config.n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let planted = match config.kind {
            WorkloadKind::Gaussian => Vec::new(),
            WorkloadKind::Sink => {
                let blk = rng.random_range(0..full_blocks);
                for key in &mut keys[blk * b..(blk + 1) * b] {
                    *key = axpy(SINK_SIGNAL, u, key);
                }
                vec![blk]
            }
            WorkloadKind::Needle => {
                let t = rng.random_range(0..config.n);
                keys[t] = axpy(NEEDLE_SIGNAL, u, &keys[t]);
                vec![t / b]
            }
            WorkloadKind::NearTie => {
                let first = rng.random_range(0..full_blocks);
                let mut second = rng.random_range(0..full_blocks - 1);
                if second >= first {
                    second += 1;
                }
                for t in 0..b {
                    let k = axpy(NEAR_TIE_SIGNAL, u, &keys[first * b + t]);
                    let jitter = normal_vec(&mut rng, d, NEAR_TIE_JITTER);
                    keys[second * b + t] = axpy(1.0, &jitter, &k);
                    keys[first * b + t] = k;
                }
                let mut pair = vec![first, second];
                pair.sort_unstable();
                pair
            }
        };
        if kv == 0 {
            planted_blocks = planted;
        }
        for (k, v) in keys.iter().zip(&values) {
            cache.append_token(&to_f32(k), &to_f32(v))?;
        }
        caches.push(cache);
    }

    let group = config.group();
    let mut queries = Vec::with_capacity(config.steps);
    let mut appends = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let heads = (0..config.h_q)
            .map(|h| {
                let q = match config.kind {
                    WorkloadKind::Gaussian => normal_vec(&mut rng, d, 1.0),
                    _ => {
                        let noise = normal_vec(&mut rng, d, QUERY_NOISE);
                        axpy(QUERY_SIGNAL, &directions[h / group], &noise)
                    }
                };
                to_f32(&q)
            })
            .collect();
        queries.push(heads);
        let step_appends = (0..config.h_kv)
            .map(|_| {
                (
                    to_f32(&normal_vec(&mut rng, d, 1.0)),
                    to_f32(&normal_vec(&mut rng, d, 1.0)),
                )
            })
            .collect();
        appends.push(step_appends);
    }

    Ok(Workload {
        config: config.clone(),
        caches,
        queries,
        appends,
        planted_blocks,
    })
}
