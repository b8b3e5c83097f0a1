//! Randomised property suites behind `certkv verify`.
//!
//! Each property runs a number of seeded trials against a brute-force `f64`
//! oracle and counts violations. Suites: `bounds`, `fallback`, `storage`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cache::{StorageReport, TieredCache};
use crate::certify::{brute_force_tv, tv_vertex_construction, ExponentMode};
use crate::engine::{dense_attention, phase1_score};
use crate::error::{Error, Result};
use crate::harness::{gqa_union, run_decode_step, KvScratch};
use crate::ladder::{rung3_per_head, rung4_all_heads, FallbackCause, PolicyConfig, Rung1Mode};
use crate::quantizer::{quantize_key_block, quantize_value_block, reconstruction_residual, residual_within};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Bounds,
    Fallback,
    Storage,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bounds" => Ok(Suite::Bounds),
            "fallback" => Ok(Suite::Fallback),
            "storage" => Ok(Suite::Storage),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite `{other}` (bounds|fallback|storage|all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub trials: u64,
    pub violations: u64,
    /// First violation, if any.
    pub example: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Tally {
    name: &'static str,
    trials: u64,
    violations: u64,
    example: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            violations: 0,
            example: None,
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.violations += 1;
            if self.example.is_none() {
                self.example = Some(detail());
            }
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name.to_string(),
            trials: self.trials,
            violations: self.violations,
            example: self.example,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random `rows × dim` data with per-channel scale and shift, as `f32`.
fn random_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<f32> {
    let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..3.0)).collect();
    let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    (0..rows * dim)
        .map(|i| (shift[i % dim] + scale[i % dim] * normal(rng)) as f32)
        .collect()
}

fn random_cache<R: Rng>(rng: &mut R, tokens: usize, dim: usize, group: usize) -> Result<TieredCache> {
    let mut cache = TieredCache::new(16, dim, group)?;
    let keys = random_rows(rng, tokens, dim);
    let values = random_rows(rng, tokens, dim);
    for t in 0..tokens {
        cache.append_token(&keys[t * dim..(t + 1) * dim], &values[t * dim..(t + 1) * dim])?;
    }
    Ok(cache)
}

fn random_query<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    let s = rng.random_range(0.1..2.5);
    (0..dim).map(|_| (s * normal(rng)) as f32).collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn dims<R: Rng>(rng: &mut R) -> (usize, usize) {
    let d = [16, 32, 64, 128][rng.random_range(0..4)];
    let g = [4, 8, 16, 32][rng.random_range(0..4)].min(d);
    (d, g)
}

fn key_reconstruction(trials: u64, seed: u64) -> Result<PropertyResult> {
    let mut t = Tally::new("key_reconstruction");
    let mut rng = rng_for(seed, 1);
    for _ in 0..trials {
        let (d, _) = dims(&mut rng);
        let keys = random_rows(&mut rng, 16, d);
        let q = quantize_key_block(&keys, d, 0)?;
        let bad = (0..16 * d).find(|&i| {
            let c = i % d;
            let r = reconstruction_residual(
                f64::from(keys[i]),
                f64::from(q.code(i / d, c)),
                q.scales()[c],
                q.offsets()[c],
            );
            !residual_within(r, q.scales()[c] / 2.0)
        });
        t.check(bad.is_none(), || {
            format!("element {bad:?} outside half a step at d={d}")
        });
    }
    Ok(t.finish())
}

fn value_reconstruction(trials: u64, seed: u64) -> Result<PropertyResult> {
    let mut t = Tally::new("value_reconstruction");
    let mut rng = rng_for(seed, 2);
    for _ in 0..trials {
        let (d, g) = dims(&mut rng);
        let values = random_rows(&mut rng, 16, d);
        let (q, _) = quantize_value_block(&values, d, g)?;
        let bad = (0..16 * d).find(|&i| {
            let gi = q.group_of(i / d, i % d);
            let (scale, offset) = (q.group_scales()[gi], q.group_offsets()[gi]);
            let r = reconstruction_residual(f64::from(values[i]), f64::from(q.codes()[i]), scale, offset);
            !residual_within(r, scale / 2.0)
        });
        t.check(bad.is_none(), || {
            format!("element {bad:?} outside half a step at d={d} g={g}")
        });
    }
    Ok(t.finish())
}

/// Logits, a perturbation of at most `delta` on the tokens in `perturbed`,
/// and both softmaxes.
fn perturbed_pair<R: Rng>(rng: &mut R, only_tail: bool) -> (Vec<f64>, Vec<f64>, f64, Vec<bool>) {
    let n = rng.random_range(1..=64);
    let delta = rng.random_range(0.0..=1.0);
    let spread = rng.random_range(0.1..8.0);
    let s: Vec<f64> = (0..n).map(|_| spread * normal(rng)).collect();
    let tail: Vec<bool> = (0..n).map(|_| !only_tail || rng.random_bool(0.5)).collect();
    let s2: Vec<f64> = s
        .iter()
        .zip(&tail)
        .map(|(&x, &t)| {
            if !t {
                return x;
            }
            // Half the draws sit on the extremes.
            let e = match rng.random_range(0..4) {
                0 => delta,
                1 => -delta,
                _ => rng.random_range(-delta..=delta),
            };
            x + e
        })
        .collect();
    (softmax(&s), softmax(&s2), delta, tail)
}

const REL: f64 = 1e-12;

fn perturbation_bounds(trials: u64, seed: u64) -> Result<Vec<PropertyResult>> {
    let mut ratio = Tally::new("probability_ratio");
    let mut tv = Tally::new("full_sequence_tv");
    let mut tail_tv = Tally::new("tail_restricted_tv");
    let mut rng = rng_for(seed, 3);
    for _ in 0..trials {
        let (a, b, delta, _) = perturbed_pair(&mut rng, false);
        let (lo, hi) = ((-2.0 * delta).exp(), (2.0 * delta).exp());
        let ok = a.iter().zip(&b).all(|(x, y)| {
            if *x == 0.0 {
                return *y == 0.0;
            }
            let r = y / x;
            r >= lo * (1.0 - REL) && r <= hi * (1.0 + REL)
        });
        ratio.check(ok, || format!("ratio outside e^±2Δ at Δ={delta}"));
        let d = brute_force_tv(&a, &b)?;
        tv.check(d <= delta.tanh() + REL, || format!("TV {d} > tanh({delta})"));

        let (a, b, delta, tail) = perturbed_pair(&mut rng, true);
        let alpha: f64 = a.iter().zip(&tail).filter(|(_, t)| **t).map(|(p, _)| p).sum();
        let d = brute_force_tv(&a, &b)?;
        let bound = alpha * (2.0 * delta).exp_m1();
        tail_tv.check(d <= bound + REL, || format!("tail TV {d} > {bound}"));
    }
    let mut vertex = Tally::new("tv_vertex_construction");
    for delta in [0.1, 0.18, 0.5, 1.0] {
        let (a, b) = tv_vertex_construction(delta);
        let d = brute_force_tv(&a, &b)?;
        vertex.check((d - delta.tanh()).abs() <= 1e-9, || {
            format!("vertex TV {d} vs tanh({delta})")
        });
    }
    Ok(vec![ratio.finish(), tv.finish(), tail_tv.finish(), vertex.finish()])
}

fn mass_bounds(trials: u64, seed: u64) -> Result<Vec<PropertyResult>> {
    let mut block = Tally::new("block_mass_upper_bound");
    let mut subset = Tally::new("subset_probability_bound");
    let mut rng = rng_for(seed, 4);
    for _ in 0..trials {
        let (d, g) = dims(&mut rng);
        let blocks = rng.random_range(1..=8);
        let cache = random_cache(&mut rng, blocks * 16, d, g)?;
        let q = random_query(&mut rng, d);
        let p1 = phase1_score(&q, &cache)?;
        let (_, delta) = crate::certify::compute_delta_all(&q, &cache)?;
        let keys = cache.original_keys()?;
        let inv = 1.0 / (d as f64).sqrt();
        let exact: Vec<f64> = keys
            .chunks_exact(d)
            .map(|k| {
                k.iter()
                    .zip(&q)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>()
                    * inv
            })
            .collect();
        let m_true = exact.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m_est = p1.global_max();
        let mut worst = f64::NEG_INFINITY;
        for (b, stat) in p1.blocks.iter().enumerate() {
            let truth: f64 = exact[b * 16..(b + 1) * 16].iter().map(|s| (s - m_true).exp()).sum();
            let bound = crate::certify::mass_upper_bound(stat.sum, stat.max, m_est, delta, ExponentMode::Tight);
            worst = worst.max(truth / bound - 1.0);
        }
        block.check(worst <= REL, || format!("block mass exceeds bound by {worst:e}"));

        let p_true = softmax(&exact);
        let est_all: Vec<f64> = p1.token_scores.iter().flatten().copied().collect();
        let p_est = softmax(&est_all);
        let pick: Vec<usize> = (0..blocks).filter(|_| rng.random_bool(0.5)).collect();
        let sum = |p: &[f64]| -> f64 { pick.iter().flat_map(|&b| p[b * 16..(b + 1) * 16].iter()).sum() };
        let (t, e) = (sum(&p_true), sum(&p_est));
        subset.check(t <= (2.0 * delta).exp() * e * (1.0 + REL) + 1e-300, || {
            format!("subset {t} > e^2Δ × {e}")
        });
    }
    Ok(vec![block.finish(), subset.finish()])
}

fn random_policy<R: Rng>(rng: &mut R) -> PolicyConfig {
    let k_max = rng.random_range(0..=16);
    PolicyConfig {
        tau_cov: rng.random_range(0.5..=0.999),
        k_min: rng.random_range(0..=k_max.min(2)),
        k_max,
        rung1: if rng.random_bool(0.5) {
            Rung1Mode::Always
        } else {
            Rung1Mode::Off
        },
        rung2: rng.random_bool(0.5),
        rung3: false,
        rung4: false,
        score_canary: false,
        exploration_rate: 0.0,
        ..PolicyConfig::default()
    }
}

/// One randomised step: 64-bit recomputation of `O_quant` from the step's
/// decisions, 64-bit `O_ref`, and the emitted certificate.
fn soundness(trials: u64, seed: u64, max_tokens: usize) -> Result<Vec<PropertyResult>> {
    let mut total = Tally::new("end_to_end_soundness");
    let mut value = Tally::new("value_error_chain");
    let mut rng = rng_for(seed, 5);
    for _ in 0..trials {
        let (d, g) = dims(&mut rng);
        let n = rng.random_range(1..=max_tokens);
        let cache = random_cache(&mut rng, n, d, g)?;
        let q = random_query(&mut rng, d);
        let policy = random_policy(&mut rng);
        let mut scratch = vec![KvScratch::new(&policy)];
        let step = run_decode_step(
            0,
            std::slice::from_ref(&q),
            std::slice::from_ref(&cache),
            &mut scratch,
            &policy,
            seed,
        )?;
        let head = &step.heads[0];
        if head.certificate.returned_kind.is_dense() {
            continue;
        }
        let oracle = QuantOracle::new(&q, &cache, &head.decision.promoted, &head.value_promotions)?;
        let err = oracle
            .quant_output
            .iter()
            .zip(&oracle.ref_output)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = head.certificate.total_bound();
        total.check(err <= bound, || format!("‖ΔO‖ {err:e} > {bound:e} (n={n}, d={d})"));

        let (lhs, mid, max_eta) = oracle.value_chain(&cache);
        value.check(lhs <= mid * (1.0 + REL) + 1e-15 && mid <= max_eta, || {
            format!("value chain {lhs:e} ≤ {mid:e} ≤ {max_eta:e} broken")
        });
    }
    Ok(vec![total.finish(), value.finish()])
}

/// Independent `f64` recomputation of the mixed-precision step.
struct QuantOracle {
    weights: Vec<f64>,
    quant_output: Vec<f64>,
    ref_output: Vec<f64>,
    deq_values: Vec<f64>,
    orig_values: Vec<f64>,
    dim: usize,
}

impl QuantOracle {
    fn new(query: &[f32], cache: &TieredCache, promoted: &[usize], value_promoted: &BTreeSet<usize>) -> Result<Self> {
        let d = cache.head_dim();
        let b = cache.block_size();
        let inv = 1.0 / (d as f64).sqrt();
        let keys = cache.original_keys()?;
        let values = cache.original_values()?;
        let n = cache.len();
        let mut deq_keys: Vec<f64> = keys.iter().map(|&x| f64::from(x)).collect();
        let mut deq_values: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        let mut used_values = deq_values.clone();
        for (blk, qb) in cache.blocks().iter().enumerate() {
            for t in 0..b {
                for c in 0..d {
                    let i = (blk * b + t) * d + c;
                    if !promoted.contains(&blk) {
                        deq_keys[i] = qb.keys.reconstruct(t, c);
                    }
                    deq_values[i] = qb.values.reconstruct(t, c);
                    if !value_promoted.contains(&blk) {
                        used_values[i] = deq_values[i];
                    }
                }
            }
        }
        let qf: Vec<f64> = query.iter().map(|&x| f64::from(x)).collect();
        let score = |k: &dyn Fn(usize) -> f64, t: usize| (0..d).map(|c| qf[c] * k(t * d + c)).sum::<f64>() * inv;
        let s_ref: Vec<f64> = (0..n).map(|t| score(&|i| f64::from(keys[i]), t)).collect();
        let s_q: Vec<f64> = (0..n).map(|t| score(&|i| deq_keys[i], t)).collect();
        let a = softmax(&s_ref);
        let w = softmax(&s_q);
        let combine =
            |p: &[f64], v: &[f64]| -> Vec<f64> { (0..d).map(|c| (0..n).map(|t| p[t] * v[t * d + c]).sum()).collect() };
        let orig_values: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        Ok(Self {
            quant_output: combine(&w, &used_values),
            ref_output: combine(&a, &orig_values),
            weights: w,
            deq_values,
            orig_values,
            dim: d,
        })
    }

    /// `(‖Σ a_t (V̂_t − V_t)‖, Σ_b ρ_b η_b, max_b η_b)` over full blocks,
    /// with every full block on INT4 values.
    fn value_chain(&self, cache: &TieredCache) -> (f64, f64, f64) {
        let d = self.dim;
        let b = cache.block_size();
        let full = cache.full_blocks() * b;
        let lhs = (0..d)
            .map(|c| {
                (0..full)
                    .map(|t| self.weights[t] * (self.deq_values[t * d + c] - self.orig_values[t * d + c]))
                    .sum::<f64>()
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let mut mid = 0.0;
        let mut max_eta: f64 = 0.0;
        for (blk, qb) in cache.blocks().iter().enumerate() {
            let rho: f64 = self.weights[blk * b..(blk + 1) * b].iter().sum();
            mid += rho * qb.annotations.eta;
            max_eta = max_eta.max(qb.annotations.eta);
        }
        (lhs, mid, max_eta)
    }
}

pub fn bounds_suite(trials: u64, seed: u64) -> Result<Vec<PropertyResult>> {
    let mut out = vec![key_reconstruction(trials, seed)?, value_reconstruction(trials, seed)?];
    out.extend(perturbation_bounds(trials, seed)?);
    out.extend(mass_bounds(trials, seed)?);
    out.extend(soundness(trials, seed, 512)?);
    Ok(out)
}

pub fn fallback_suite(trials: u64, seed: u64) -> Result<Vec<PropertyResult>> {
    let mut rung3 = Tally::new("rung3_equals_dense");
    let mut rung4 = Tally::new("rung4_equals_dense");
    let mut canary = Tally::new("corruption_triggers_canary");
    let mut tier2 = Tally::new("missing_tier2_is_error");
    let mut rng = rng_for(seed, 6);
    for _ in 0..trials {
        let (d, g) = dims(&mut rng);
        let n = rng.random_range(1..=256);
        let caches = vec![random_cache(&mut rng, n, d, g)?, random_cache(&mut rng, n, d, g)?];
        let queries: Vec<Vec<f32>> = (0..4).map(|_| random_query(&mut rng, d)).collect();
        let dense: Vec<Vec<f32>> = queries
            .iter()
            .enumerate()
            .map(|(h, q)| dense_attention(q, &caches[h / 2]))
            .collect::<Result<_>>()?;
        let ok3 = queries
            .iter()
            .enumerate()
            .all(|(h, q)| rung3_per_head(q, &caches[h / 2]).ok().as_ref() == Some(&dense[h]));
        rung3.check(ok3, || format!("rung3 differs from dense (n={n}, d={d})"));
        let out = rung4_all_heads(&queries, &caches)?;
        rung4.check(out.outputs == dense, || {
            format!("rung4 differs from dense (n={n}, d={d})")
        });

        if caches[0].full_blocks() > 0 {
            let mut corrupted = caches.clone();
            let blk = rng.random_range(0..corrupted[0].full_blocks());
            // The channel with the largest |q_c| σ_c: a jump of at least 128
            // codes there moves the score by more than Δ can absorb.
            let scales = corrupted[0].block(blk)?.keys.scales().to_vec();
            let ch = (0..d)
                .max_by(|&a, &b| {
                    let w = |c: usize| f64::from(queries[0][c]).abs() * scales[c];
                    w(a).total_cmp(&w(b))
                })
                .expect("d > 0");
            let row = rng.random_range(0..16);
            let code = corrupted[0].block(blk)?.keys.code(row, ch);
            corrupted[0].inject_key_code_fault(blk, row, ch, if code >= 0 { -128 } else { 127 })?;
            // Promote everything so the corrupted block is compared against
            // its original.
            let policy = PolicyConfig {
                tau_cov: 1.0,
                k_min: usize::MAX / 4,
                k_max: usize::MAX / 4,
                ..PolicyConfig::default()
            };
            let mut scratch: Vec<KvScratch> = (0..2).map(|_| KvScratch::new(&policy)).collect();
            let step = run_decode_step(0, &queries, &corrupted, &mut scratch, &policy, seed)?;
            let fired = step.events().any(|e| e.rung == 4 && e.cause == FallbackCause::Canary);
            let all_dense = step.heads.iter().enumerate().all(|(h, hs)| hs.output == dense[h]);
            canary.check(fired && all_dense, || {
                format!("fault at block {blk} row {row} channel {ch} not caught")
            });
        }

        let mut dropped = caches.clone();
        dropped[1].drop_tier2();
        let policy = PolicyConfig::default();
        let mut scratch: Vec<KvScratch> = (0..2).map(|_| KvScratch::new(&policy)).collect();
        let res = run_decode_step(0, &queries, &dropped, &mut scratch, &policy, seed);
        let r4 = rung4_all_heads(&queries, &dropped);
        let ok = matches!(&r4, Err(e) if e.is_tier2_failure())
            && matches!(&res, Err(e) if e.is_tier2_failure())
            && rung3_per_head(&queries[3], &dropped[1]).is_err();
        tier2.check(ok, || "output produced without Tier 2".to_string());
    }
    Ok(vec![rung3.finish(), rung4.finish(), canary.finish(), tier2.finish()])
}

pub fn storage_suite() -> Vec<PropertyResult> {
    let mut table = Tally::new("storage_table");
    let r = StorageReport::new(128, 16, 16);
    let got = (
        r.keys_int8,
        r.key_metadata,
        r.values_int4,
        r.value_metadata,
        r.tier1_total_rounded,
        r.ratio_vs_dense,
        r.dense_total,
    );
    table.check(
        got == (128.0, 64.0, 64.0, 32.0, 288.0, 0.5625, 512.0) && r.annotations < 1.0,
        || format!("{got:?}"),
    );

    let mut union = Tally::new("gqa_union_table");
    for (tokens, expected) in [
        (8_192, 1.0),
        (32_768, 0.99),
        (65_536, 0.87),
        (131_072, 0.64),
        (262_144, 0.39),
    ] {
        let u = gqa_union(tokens, 16, 128, 32, true);
        union.check((u.fraction - expected).abs() <= 0.01, || {
            format!("{tokens}: {} vs {expected}", u.fraction)
        });
    }
    vec![table.finish(), union.finish()]
}

/// Runs `suite` with `trials` per randomised property.
pub fn run_suite(suite: Suite, trials: u64, seed: u64) -> Result<Vec<PropertyResult>> {
    if trials == 0 && suite != Suite::Storage {
        return Err(Error::InvalidConfig("trials must be positive".into()));
    }
    Ok(match suite {
        Suite::Bounds => bounds_suite(trials, seed)?,
        Suite::Fallback => fallback_suite(trials, seed)?,
        Suite::Storage => storage_suite(),
        Suite::All => {
            let mut all = bounds_suite(trials, seed)?;
            all.extend(fallback_suite(trials, seed)?);
            all.extend(storage_suite());
            all
        }
    })
}
