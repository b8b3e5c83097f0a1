//! The certified attention pipeline for one query head.
//!
//! Phase 1 scores every token on dequantized Tier-1 keys and reduces each
//! block to a globally comparable log-mass. The adaptive selector turns those
//! into a promoted set `F`. Phase 2 is a single online-softmax pass in which
//! each block's keys come from the full-precision scratch (`b ∈ F`) or from
//! Tier 1, and each block's values come from the value scratch (Rung-2
//! promotions) or from the INT4 payload.
//!
//! Scores are formed in `f64`; the online-softmax state `(m, ℓ, o)` is `f32`.
//! The trailing partial block is always scored and attended at reference
//! precision.

use std::collections::{BTreeMap, BTreeSet};

use crate::cache::{ScratchCache, TieredCache};
use crate::error::{Error, Result};
use crate::quantizer::{KeyBlockQuant, ValueBlockQuant};

/// Phase-1 statistics of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStat {
    /// `m_b = max_t s_t`.
    pub max: f64,
    /// `S_b = Σ_t exp(s_t - m_b)`.
    pub sum: f64,
    /// `ℓ_b = m_b + ln S_b`.
    pub log_mass: f64,
}

impl BlockStat {
    pub fn from_scores(scores: &[f64]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        Self {
            max,
            sum,
            log_mass: max + sum.ln(),
        }
    }
}

/// Phase-1 output: per-block statistics and the per-token scores behind them.
#[derive(Debug, Clone)]
pub struct BlockScores {
    pub blocks: Vec<BlockStat>,
    pub token_scores: Vec<Vec<f64>>,
    /// Reference-precision statistics of the trailing partial block.
    pub partial: Option<BlockStat>,
    pub partial_scores: Vec<f64>,
}

impl BlockScores {
    pub fn full_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `max_b m_b` over every scored block, partial included.
    pub fn global_max(&self) -> f64 {
        self.blocks
            .iter()
            .chain(self.partial.iter())
            .map(|b| b.max)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Log-sum-exp of all block log-masses.
    pub fn log_normalizer(&self) -> f64 {
        log_sum_exp(self.blocks.iter().chain(self.partial.iter()).map(|b| b.log_mass))
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Outcome of the adaptive top-K selector.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDecision {
    /// Promoted full blocks, ascending.
    pub promoted: Vec<usize>,
    /// Full blocks by descending estimated mass, ties by ascending index.
    pub ranking: Vec<usize>,
    pub k_star: usize,
    /// `α̂_T`: estimated mass of full blocks left on quantized keys.
    pub est_tail_mass: f64,
    pub clamped: bool,
    /// `p_b` for every full block.
    pub normalized_masses: Vec<f64>,
    /// Estimated mass of the partial block, which is always promoted.
    pub partial_mass: f64,
}

impl SelectionDecision {
    pub fn is_promoted(&self, block: usize) -> bool {
        self.promoted.binary_search(&block).is_ok()
    }

    /// Full blocks left on quantized keys, ascending.
    pub fn tail(&self) -> Vec<usize> {
        (0..self.normalized_masses.len())
            .filter(|b| !self.is_promoted(*b))
            .collect()
    }

    /// Promote the top `k` blocks of the existing ranking and recompute `α̂_T`.
    pub(crate) fn with_k(&self, k: usize) -> Self {
        let k = k.min(self.ranking.len());
        let mut promoted: Vec<usize> = self.ranking[..k].to_vec();
        promoted.sort_unstable();
        let mut next = Self {
            promoted,
            k_star: k,
            ..self.clone()
        };
        next.est_tail_mass = tail_mass(&next.normalized_masses, &next.promoted);
        next
    }
}

/// Slack on the coverage comparison so that masses which sum to the
/// threshold up to rounding still count as covering it.
pub const COVERAGE_EPSILON: f64 = 1e-12;

fn tail_mass(masses: &[f64], promoted: &[usize]) -> f64 {
    masses
        .iter()
        .enumerate()
        .filter(|(b, _)| promoted.binary_search(b).is_err())
        .fold(0.0, |acc, (_, p)| acc + p)
        .clamp(0.0, 1.0)
}

/// Output of the Phase-2 attend pass.
#[derive(Debug, Clone)]
pub struct AttendResult {
    pub output: Vec<f32>,
    /// `ρ_b` for every full block under the Phase-2 distribution.
    pub block_masses: Vec<f64>,
    /// Phase-2 mass of the partial block.
    pub partial_mass: f64,
    /// `ℓ_b` from full-precision keys, for every promoted block.
    pub promoted_log_masses: BTreeMap<usize, f64>,
    /// Full-precision token scores of every promoted block.
    pub promoted_scores: BTreeMap<usize, Vec<f64>>,
    /// Final online-softmax running max and normaliser.
    pub accumulator: (f32, f32),
}

#[derive(Clone, Copy)]
enum KeySource<'a> {
    Original(&'a [f32]),
    Quantized(&'a KeyBlockQuant),
}

#[derive(Clone, Copy)]
enum ValueSource<'a> {
    Original(&'a [f32]),
    Quantized(&'a ValueBlockQuant),
}

fn check_query(query: &[f32], cache: &TieredCache) -> Result<Vec<f64>> {
    if query.len() != cache.head_dim() {
        return Err(Error::Shape {
            context: "query",
            expected: cache.head_dim(),
            actual: query.len(),
        });
    }
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    Ok(query.iter().map(|&x| f64::from(x)).collect())
}

#[inline]
fn dot_original(q: &[f64], k: &[f32]) -> f64 {
    q.iter().zip(k).fold(0.0, |acc, (a, &b)| acc + a * f64::from(b))
}

fn score_rows(q: &[f64], src: KeySource<'_>, rows: usize, inv_sqrt_d: f64) -> Vec<f64> {
    let d = q.len();
    (0..rows)
        .map(|t| {
            let s = match src {
                KeySource::Original(k) => dot_original(q, &k[t * d..(t + 1) * d]),
                KeySource::Quantized(kq) => (0..d).fold(0.0, |acc, c| acc + q[c] * kq.reconstruct(t, c)),
            };
            s * inv_sqrt_d
        })
        .collect()
}

/// Phase 1: score every token on dequantized Tier-1 keys (partial block on
/// originals) and reduce each block to `(m_b, S_b, ℓ_b)`.
pub fn phase1_score(query: &[f32], cache: &TieredCache) -> Result<BlockScores> {
    let q = check_query(query, cache)?;
    let inv = 1.0 / (cache.head_dim() as f64).sqrt();
    let b = cache.block_size();

    let token_scores: Vec<Vec<f64>> = cache
        .blocks()
        .iter()
        .map(|blk| score_rows(&q, KeySource::Quantized(&blk.keys), b, inv))
        .collect();
    let blocks = token_scores.iter().map(|s| BlockStat::from_scores(s)).collect();

    let partial_scores = score_rows(&q, KeySource::Original(cache.partial_keys()), cache.partial_len(), inv);
    let partial = (!partial_scores.is_empty()).then(|| BlockStat::from_scores(&partial_scores));

    Ok(BlockScores {
        blocks,
        token_scores,
        partial,
        partial_scores,
    })
}

/// Token scores of one full block computed directly on its Tier-2 originals.
pub fn reference_block_scores(query: &[f32], cache: &TieredCache, block: usize) -> Result<Vec<f64>> {
    let q = check_query(query, cache)?;
    let keys = cache.tier2_keys(block)?;
    let inv = 1.0 / (cache.head_dim() as f64).sqrt();
    Ok(score_rows(&q, KeySource::Original(keys), cache.block_size(), inv))
}

/// Scores of one quantized block via the scaled-query expansion
/// `q·k̂ = Σ_c (q_c σ_c) code_{t,c} + Σ_c q_c z_c`, divided by `√d`.
pub fn scaled_query_score(query: &[f32], block: &KeyBlockQuant) -> Vec<f64> {
    let d = block.dim();
    let scaled: Vec<f64> = (0..d).map(|c| f64::from(query[c]) * block.scales()[c]).collect();
    let constant: f64 = (0..d).map(|c| f64::from(query[c]) * block.offsets()[c]).sum();
    let inv = 1.0 / (d as f64).sqrt();
    (0..block.rows())
        .map(|t| {
            let modified: f64 = (0..d).map(|c| scaled[c] * f64::from(block.code(t, c))).sum();
            (modified + constant) * inv
        })
        .collect()
}

/// Adaptive top-K: promote the fewest highest-mass blocks whose estimated
/// mass reaches `tau_cov`, then clamp to `[k_min, min(k_max, blocks)]`.
pub fn adaptive_topk(scores: &BlockScores, tau_cov: f64, k_min: usize, k_max: usize) -> SelectionDecision {
    let n = scores.blocks.len();
    let lse = scores.log_normalizer();
    let normalized_masses: Vec<f64> = scores.blocks.iter().map(|b| (b.log_mass - lse).exp()).collect();
    let partial_mass = scores.partial.map(|p| (p.log_mass - lse).exp()).unwrap_or(0.0);

    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| normalized_masses[b].total_cmp(&normalized_masses[a]).then(a.cmp(&b)));

    let mut covered = partial_mass;
    let mut raw = None;
    if covered + COVERAGE_EPSILON >= tau_cov {
        raw = Some(0);
    } else {
        for (k, &b) in ranking.iter().enumerate() {
            covered += normalized_masses[b];
            if covered + COVERAGE_EPSILON >= tau_cov {
                raw = Some(k + 1);
                break;
            }
        }
    }
    let unclamped = raw.unwrap_or(n);
    let k_star = unclamped.max(k_min).min(k_max.min(n));

    let mut promoted: Vec<usize> = ranking[..k_star].to_vec();
    promoted.sort_unstable();
    let est_tail_mass = tail_mass(&normalized_masses, &promoted);

    SelectionDecision {
        promoted,
        ranking,
        k_star,
        est_tail_mass,
        clamped: raw.is_none() || k_star != unclamped,
        normalized_masses,
        partial_mass,
    }
}

fn attend_core<'a>(
    q: &[f64],
    cache: &'a TieredCache,
    key_for: impl Fn(usize) -> Result<(KeySource<'a>, bool)>,
    value_for: impl Fn(usize) -> Result<ValueSource<'a>>,
) -> Result<AttendResult> {
    let d = cache.head_dim();
    let bs = cache.block_size();
    let inv = 1.0 / (d as f64).sqrt();
    let n_full = cache.full_blocks();

    let mut m = f32::NEG_INFINITY;
    let mut l = 0.0f32;
    let mut o = vec![0.0f32; d];
    let mut value_row = vec![0.0f32; d];

    let mut stats: Vec<BlockStat> = Vec::with_capacity(n_full + 1);
    let mut promoted_log_masses = BTreeMap::new();
    let mut promoted_scores = BTreeMap::new();

    let blocks = (0..n_full).map(Some).chain((cache.partial_len() > 0).then_some(None));
    for block in blocks {
        let (keys, rows, promoted, values) = match block {
            Some(b) => {
                let (k, promoted) = key_for(b)?;
                (k, bs, promoted, value_for(b)?)
            }
            None => (
                KeySource::Original(cache.partial_keys()),
                cache.partial_len(),
                false,
                ValueSource::Original(cache.partial_values()),
            ),
        };
        let scores = score_rows(q, keys, rows, inv);
        let stat = BlockStat::from_scores(&scores);
        stats.push(stat);

        let block_max = scores.iter().map(|&s| s as f32).fold(f32::NEG_INFINITY, f32::max);
        let m_new = m.max(block_max);
        let rescale = if m == f32::NEG_INFINITY { 0.0 } else { (m - m_new).exp() };
        l *= rescale;
        for x in o.iter_mut() {
            *x *= rescale;
        }
        for (t, &s) in scores.iter().enumerate() {
            let w = (s as f32 - m_new).exp();
            l += w;
            match values {
                ValueSource::Original(v) => value_row.copy_from_slice(&v[t * d..(t + 1) * d]),
                ValueSource::Quantized(vq) => {
                    for (c, x) in value_row.iter_mut().enumerate() {
                        *x = vq.reconstruct(t, c) as f32;
                    }
                }
            }
            for (acc, &v) in o.iter_mut().zip(&value_row) {
                *acc += w * v;
            }
        }
        m = m_new;

        if let (Some(b), true) = (block, promoted) {
            promoted_log_masses.insert(b, stat.log_mass);
            promoted_scores.insert(b, scores);
        }
    }

    let output = o.iter().map(|&x| x / l).collect();
    let lse = log_sum_exp(stats.iter().map(|s| s.log_mass));
    let mut block_masses: Vec<f64> = stats.iter().map(|s| (s.log_mass - lse).exp()).collect();
    let partial_mass = if cache.partial_len() > 0 {
        block_masses.pop().unwrap_or(0.0)
    } else {
        0.0
    };

    Ok(AttendResult {
        output,
        block_masses,
        partial_mass,
        promoted_log_masses,
        promoted_scores,
        accumulator: (m, l),
    })
}

/// Phase 2: one online-softmax pass over every block with mask-gated key
/// precision. Promoted key blocks and promoted value blocks must already be
/// resident in their scratch caches.
pub fn phase2_attend(
    query: &[f32],
    cache: &TieredCache,
    decision: &SelectionDecision,
    value_promotions: &BTreeSet<usize>,
    key_scratch: &ScratchCache,
    value_scratch: &ScratchCache,
) -> Result<AttendResult> {
    let q = check_query(query, cache)?;
    attend_core(
        &q,
        cache,
        |b| {
            let blk = &cache.blocks()[b];
            if decision.is_promoted(b) {
                Ok((KeySource::Original(key_scratch.require(b)?), true))
            } else {
                Ok((KeySource::Quantized(&blk.keys), false))
            }
        },
        |b| {
            if value_promotions.contains(&b) {
                Ok(ValueSource::Original(value_scratch.require(b)?))
            } else {
                Ok(ValueSource::Quantized(&cache.blocks()[b].values))
            }
        },
    )
}

/// `O_ref`: the Phase-2 kernel with every block on Tier-2 keys and values.
pub fn ref_attention(query: &[f32], cache: &TieredCache) -> Result<Vec<f32>> {
    Ok(ref_attend(query, cache)?.output)
}

/// [`ref_attention`] with the Phase-2 byproducts.
pub fn ref_attend(query: &[f32], cache: &TieredCache) -> Result<AttendResult> {
    let q = check_query(query, cache)?;
    attend_core(
        &q,
        cache,
        |b| Ok((KeySource::Original(cache.tier2_keys(b)?), true)),
        |b| Ok(ValueSource::Original(cache.tier2_values(b)?)),
    )
}

/// `O_dense`: plain softmax attention over the Tier-2 originals with `f64`
/// intermediates. This is the fallback output and the test oracle.
pub fn dense_attention(query: &[f32], cache: &TieredCache) -> Result<Vec<f32>> {
    let q = check_query(query, cache)?;
    let keys = cache.original_keys()?;
    let values = cache.original_values()?;
    let d = cache.head_dim();
    let inv = 1.0 / (d as f64).sqrt();

    let scores: Vec<f64> = keys.chunks_exact(d).map(|k| dot_original(&q, k) * inv).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();

    let mut out = vec![0.0f64; d];
    for (w, v) in weights.iter().zip(values.chunks_exact(d)) {
        for (acc, &x) in out.iter_mut().zip(v) {
            *acc += w * f64::from(x);
        }
    }
    Ok(out.into_iter().map(|x| (x / z) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::PayloadKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_cache(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TieredCache {
        let mut cache = TieredCache::new(16, d, 4.min(d)).unwrap();
        for _ in 0..n {
            let k: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            cache.append_token(&k, &v).unwrap();
        }
        cache
    }

    fn scores_from_log_masses(log_masses: &[f64]) -> BlockScores {
        BlockScores {
            blocks: log_masses
                .iter()
                .map(|&l| BlockStat {
                    max: l,
                    sum: 1.0,
                    log_mass: l,
                })
                .collect(),
            token_scores: vec![],
            partial: None,
            partial_scores: vec![],
        }
    }

    #[test]
    fn one_token_block_stats() {
        let s = BlockStat::from_scores(&[0.7]);
        assert_eq!((s.max, s.sum, s.log_mass), (0.7, 1.0, 0.7));
    }

    #[test]
    fn two_equal_scores_give_ln2() {
        let s = BlockStat::from_scores(&[0.0, 0.0]);
        assert_eq!(s.sum, 2.0);
        assert!((s.log_mass - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_cache_is_rejected() {
        let cache = TieredCache::new(16, 4, 4).unwrap();
        assert_eq!(phase1_score(&[0.0; 4], &cache).unwrap_err(), Error::EmptyCache);
    }

    #[test]
    fn selector_cumulative_coverage() {
        let masses: [f64; 4] = [0.6, 0.3, 0.08, 0.02];
        let scores = scores_from_log_masses(&masses.map(f64::ln));
        let d = adaptive_topk(&scores, 0.9, 1, 4);
        assert_eq!(d.k_star, 2);
        assert_eq!(d.promoted, vec![0, 1]);
        assert!((d.est_tail_mass - 0.10).abs() < 1e-12);
        assert!(!d.clamped);
    }

    #[test]
    fn selector_floor_clamp() {
        let scores = scores_from_log_masses(&[0.0, -1.0, -2.0]);
        let d = adaptive_topk(&scores, 0.0, 2, 8);
        assert_eq!(d.k_star, 2);
        assert!(d.clamped);
    }

    #[test]
    fn selector_single_dominant_block() {
        let masses: [f64; 3] = [0.999, 0.0006, 0.0004];
        let scores = scores_from_log_masses(&masses.map(f64::ln));
        let d = adaptive_topk(&scores, 0.995, 1, 8);
        assert_eq!(d.k_star, 1);
        assert!((d.est_tail_mass - 0.001).abs() < 1e-12);
    }

    #[test]
    fn selector_ties_prefer_lower_index() {
        let scores = scores_from_log_masses(&[0.0, 0.0, 0.0, 0.0]);
        let d = adaptive_topk(&scores, 0.5, 1, 4);
        assert_eq!(d.promoted, vec![0, 1]);
        assert_eq!(d.ranking, vec![0, 1, 2, 3]);
    }

    #[test]
    fn scaled_query_matches_phase1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cache = random_cache(&mut rng, 64, 32);
        let q: Vec<f32> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let p1 = phase1_score(&q, &cache).unwrap();
        for (b, blk) in cache.blocks().iter().enumerate() {
            let alt = scaled_query_score(&q, &blk.keys);
            for (x, y) in alt.iter().zip(&p1.token_scores[b]) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
        assert!(scaled_query_score(&[0.0; 32], &cache.blocks()[0].keys)
            .iter()
            .all(|&s| s == 0.0));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut cache = TieredCache::new(16, 4, 2).unwrap();
        let v = [0.5f32, -1.25, 3.0, 0.0];
        cache.append_token(&[1.0, 2.0, 3.0, 4.0], &v).unwrap();
        let q = [0.3f32, 0.1, -0.2, 0.9];
        assert_eq!(ref_attention(&q, &cache).unwrap(), v);
        assert_eq!(dense_attention(&q, &cache).unwrap(), v);
        let r = ref_attend(&q, &cache).unwrap();
        assert_eq!(r.partial_mass, 1.0);
    }

    #[test]
    fn full_promotion_is_reference_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cache = random_cache(&mut rng, 100, 16);
        let q: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let scores = phase1_score(&q, &cache).unwrap();
        let decision = adaptive_topk(&scores, 1.0, 0, usize::MAX);
        assert_eq!(decision.k_star, cache.full_blocks());
        let all: Vec<usize> = (0..cache.full_blocks()).collect();
        let mut ks = ScratchCache::new(PayloadKind::Keys, 16);
        let mut vs = ScratchCache::new(PayloadKind::Values, 16);
        ks.promote(&cache, &all).unwrap();
        vs.promote(&cache, &all).unwrap();
        let values: BTreeSet<usize> = all.iter().copied().collect();
        let fast = phase2_attend(&q, &cache, &decision, &values, &ks, &vs).unwrap();
        assert_eq!(fast.output, ref_attention(&q, &cache).unwrap());
        let total: f64 = fast.block_masses.iter().sum::<f64>() + fast.partial_mass;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_scratch_block_is_a_precondition_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cache = random_cache(&mut rng, 48, 8);
        let q = vec![0.1f32; 8];
        let scores = phase1_score(&q, &cache).unwrap();
        let decision = adaptive_topk(&scores, 0.9, 1, 3);
        let empty = ScratchCache::new(PayloadKind::Keys, 4);
        let err = phase2_attend(&q, &cache, &decision, &BTreeSet::new(), &empty, &empty).unwrap_err();
        assert!(matches!(err, Error::ScratchMiss { kind: "key", .. }));
    }

    #[test]
    fn reference_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let cache = random_cache(&mut rng, 300, 32);
            let q: Vec<f32> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
            let r = ref_attention(&q, &cache).unwrap();
            let dn = dense_attention(&q, &cache).unwrap();
            let norm = dn.iter().map(|x| x * x).sum::<f32>().sqrt();
            let diff = r.iter().zip(&dn).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
            assert!(diff <= 1e-5 * norm.max(1e-3), "{diff} vs {norm}");
        }
    }
}
