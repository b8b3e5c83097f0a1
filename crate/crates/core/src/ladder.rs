//! Runtime monitors and the four-rung escalation policy.
//!
//! Rung 1 doubles key coverage, Rung 2 promotes value blocks, Rung 3
//! recomputes one head densely and Rung 4 recomputes every head of the step
//! densely. The monitors here are pure functions; the per-step orchestration
//! lives in [`crate::harness::decode`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::TieredCache;
use crate::certify::ExponentMode;
use crate::engine::{dense_attention, reference_block_scores, BlockScores, SelectionDecision};
use crate::error::{Error, Result};

/// When Rung 1 fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rung1Mode {
    /// Every step, before Δ and the certificate are computed.
    #[default]
    Always,
    /// Only when the pre-expansion `E_key` exceeds `rung1_threshold`.
    OnThreshold,
    Off,
}

/// Certificate policy. Unknown fields
/// are rejected when deserialising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub tau_cov: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub v_tol: f64,
    #[serde(rename = "r")]
    pub ranking_depth: usize,
    pub epsilon_guard: f64,
    pub exploration_rate: f64,
    pub exponent_mode: ExponentMode,
    pub greedy_value_budget: Option<f64>,
    pub rung1: Rung1Mode,
    /// `E_key` threshold used by [`Rung1Mode::OnThreshold`].
    pub rung1_threshold: f64,
    pub rung2: bool,
    pub rung3: bool,
    pub rung4: bool,
    pub score_canary: bool,
    /// Key scratch capacity in blocks, per KV head.
    pub key_scratch_blocks: usize,
    /// Value scratch capacity in blocks, per KV head.
    pub value_scratch_blocks: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tau_cov: 0.995,
            k_min: 2,
            k_max: 128,
            v_tol: 0.05,
            ranking_depth: 1,
            epsilon_guard: 1e-6,
            exploration_rate: 0.02,
            exponent_mode: ExponentMode::Implementation,
            greedy_value_budget: None,
            rung1: Rung1Mode::Always,
            rung1_threshold: 0.0,
            rung2: true,
            rung3: true,
            rung4: true,
            score_canary: true,
            key_scratch_blocks: 2048,
            value_scratch_blocks: 2048,
        }
    }
}

impl PolicyConfig {
    /// Every certification mechanism disabled: quantized keys everywhere,
    /// no value promotion, no ranking checks, no dense fallback.
    pub fn naive() -> Self {
        Self {
            k_min: 0,
            k_max: 0,
            exploration_rate: 0.0,
            rung1: Rung1Mode::Off,
            rung2: false,
            rung3: false,
            rung4: false,
            score_canary: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.tau_cov) {
            return bad(format!("tau_cov must lie in [0, 1], got {}", self.tau_cov));
        }
        if self.k_min > self.k_max {
            return bad(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max));
        }
        if self.v_tol.is_nan() || self.v_tol < 0.0 {
            return bad(format!("v_tol must be non-negative, got {}", self.v_tol));
        }
        if self.ranking_depth == 0 {
            return bad("r must be at least 1".into());
        }
        if self.epsilon_guard.is_nan() || self.epsilon_guard < 0.0 {
            return bad(format!(
                "epsilon_guard must be non-negative, got {}",
                self.epsilon_guard
            ));
        }
        if !(0.0..=0.05).contains(&self.exploration_rate) {
            return bad(format!(
                "exploration_rate must lie in [0, 0.05], got {}",
                self.exploration_rate
            ));
        }
        if let Some(budget) = self.greedy_value_budget {
            if budget.is_nan() || budget < 0.0 {
                return bad(format!("greedy_value_budget must be non-negative, got {budget}"));
            }
        }
        if self.rung1_threshold.is_nan() || self.rung1_threshold < 0.0 {
            return bad(format!(
                "rung1_threshold must be non-negative, got {}",
                self.rung1_threshold
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackCause {
    CoverageExpand,
    ValueTol,
    RankingDisagree,
    Boundary,
    Canary,
    Precondition,
}

impl FallbackCause {
    pub fn as_str(self) -> &'static str {
        match self {
            FallbackCause::CoverageExpand => "coverage_expand",
            FallbackCause::ValueTol => "value_tol",
            FallbackCause::RankingDisagree => "ranking_disagree",
            FallbackCause::Boundary => "boundary",
            FallbackCause::Canary => "canary",
            FallbackCause::Precondition => "precondition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackEvent {
    pub rung: u8,
    pub head: usize,
    pub step: usize,
    pub cause: FallbackCause,
}

impl FallbackEvent {
    /// Builds an event, rejecting cause/rung pairs the ladder never emits.
    pub fn new(rung: u8, head: usize, step: usize, cause: FallbackCause) -> Result<Self> {
        use FallbackCause::*;
        let ok = match rung {
            1 => cause == CoverageExpand,
            2 => cause == ValueTol,
            3 => matches!(cause, RankingDisagree | Boundary),
            4 => matches!(cause, Canary | Precondition),
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "rung {rung} cannot carry cause {}",
                cause.as_str()
            )));
        }
        Ok(Self {
            rung,
            head,
            step,
            cause,
        })
    }
}

/// Rung 1: double `K*` once, clamped to the block count, and recompute `α̂_T`.
pub fn rung1_expand(decision: &SelectionDecision) -> SelectionDecision {
    let mut next = decision.with_k(decision.k_star.saturating_mul(2));
    next.clamped = decision.clamped || next.k_star < decision.k_star.saturating_mul(2);
    next
}

/// Rung 2: value blocks to serve from full precision.
///
/// Without a greedy budget this is `{b : ρ̂_b·η_b > v_tol}`. With one, blocks
/// are promoted in descending `ρ̂_b·η_b` (ties by index) until the residual
/// `Σ ρ̂_b·η_b` over the rest is within the budget.
pub fn rung2_value_promotions(est_masses: &[f64], etas: &[f64], policy: &PolicyConfig) -> BTreeSet<usize> {
    let contrib: Vec<f64> = est_masses.iter().zip(etas).map(|(p, e)| p * e).collect();
    match policy.greedy_value_budget {
        None => contrib
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > policy.v_tol)
            .map(|(b, _)| b)
            .collect(),
        Some(budget) => {
            let mut order: Vec<usize> = (0..contrib.len()).collect();
            order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
            let mut residual: f64 = contrib.iter().sum();
            let mut out = BTreeSet::new();
            for b in order {
                if residual <= budget || contrib[b] <= 0.0 {
                    break;
                }
                residual -= contrib[b];
                out.insert(b);
            }
            out
        }
    }
}

/// Top `r` keys of a log-mass map: descending value, ties by ascending key.
pub fn top_r(log_masses: &BTreeMap<usize, f64>, r: usize) -> Vec<usize> {
    let mut entries: Vec<(usize, f64)> = log_masses.iter().map(|(&b, &l)| (b, l)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.into_iter().take(r).map(|(b, _)| b).collect()
}

/// Whether the top-`r` orderings under full-precision and quantized keys agree.
pub fn ranking_consistency(fp16: &BTreeMap<usize, f64>, int8: &BTreeMap<usize, f64>, r: usize) -> Result<bool> {
    if !fp16.keys().eq(int8.keys()) {
        return Err(Error::Shape {
            context: "ranking maps",
            expected: fp16.len(),
            actual: int8.len(),
        });
    }
    if fp16.len() < r {
        return Err(Error::RankingDepth {
            depth: r,
            promoted: fp16.len(),
        });
    }
    Ok(top_r(fp16, r) == top_r(int8, r))
}

/// Passes iff no tail block's upper-bounded log-mass `ℓ + Δ` exceeds the
/// `r`-th promoted full-precision log-mass.
pub fn boundary_check(tail_int8: &[f64], delta_h: f64, rth_fp16: f64) -> bool {
    tail_int8.iter().all(|&l| l + delta_h <= rth_fp16)
}

/// Passes iff every token's score moved by at most `Δ + ε_guard`.
pub fn score_canary(fp16: &[f64], int8: &[f64], delta_h: f64, epsilon_guard: f64) -> bool {
    fp16.len() == int8.len()
        && fp16
            .iter()
            .zip(int8)
            .all(|(a, b)| (a - b).abs() <= delta_h + epsilon_guard)
}

/// Draws the exploration subset: each candidate is selected independently
/// with probability `rate`, in the order given. No draws happen at rate 0.
pub fn exploration_select<R: Rng + ?Sized>(rng: &mut R, blocks: &[usize], rate: f64) -> Vec<usize> {
    if rate <= 0.0 {
        return Vec::new();
    }
    blocks.iter().copied().filter(|_| rng.random::<f64>() < rate).collect()
}

/// Spot-checks a random subset of tail blocks: each selected block is scored
/// on its originals and compared with its Phase-1 scores as in
/// [`score_canary`]. Returns `(block, passed)` per selected block.
#[allow(clippy::too_many_arguments)]
pub fn exploration_spot_check<R: Rng + ?Sized>(
    rng: &mut R,
    blocks: &[usize],
    rate: f64,
    query: &[f32],
    cache: &TieredCache,
    phase1: &BlockScores,
    delta_h: f64,
    epsilon_guard: f64,
) -> Result<Vec<(usize, bool)>> {
    exploration_select(rng, blocks, rate)
        .into_iter()
        .map(|b| {
            let reference = reference_block_scores(query, cache, b)?;
            let quantized = phase1.token_scores.get(b).ok_or(Error::BlockOutOfRange {
                index: b,
                full_blocks: phase1.full_blocks(),
            })?;
            Ok((b, score_canary(&reference, quantized, delta_h, epsilon_guard)))
        })
        .collect()
}

/// Rung 3: dense recomputation of one head on the Tier-2 originals.
pub fn rung3_per_head(query: &[f32], cache: &TieredCache) -> Result<Vec<f32>> {
    dense_attention(query, cache)
}

/// Transient bytes to stage one layer's binary16 K and V for `kv_heads`
/// caches of `tokens` tokens.
pub fn rung4_staging_bytes(tokens: usize, head_dim: usize, kv_heads: usize) -> u64 {
    2 * tokens as u64 * head_dim as u64 * 2 * kv_heads as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rung4Outcome {
    pub outputs: Vec<Vec<f32>>,
    pub staging_bytes: u64,
}

/// Rung 4: dense recomputation of every query head. Query head `h` reads
/// cache `h / (H_Q / H_KV)`.
pub fn rung4_all_heads(queries: &[Vec<f32>], caches: &[TieredCache]) -> Result<Rung4Outcome> {
    if caches.is_empty() || queries.len() % caches.len() != 0 {
        return Err(Error::Shape {
            context: "query heads per KV head",
            expected: caches.len(),
            actual: queries.len(),
        });
    }
    if let Some(missing) = caches.iter().position(|c| !c.tier2_available()) {
        return Err(Error::Tier2Unavailable(format!("KV head {missing}")));
    }
    let group = queries.len() / caches.len();
    let outputs = queries
        .iter()
        .enumerate()
        .map(|(h, q)| dense_attention(q, &caches[h / group]))
        .collect::<Result<Vec<_>>>()?;
    let staging_bytes = caches
        .iter()
        .map(|c| rung4_staging_bytes(c.len(), c.head_dim(), 1))
        .sum();
    Ok(Rung4Outcome { outputs, staging_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{adaptive_topk, phase1_score};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decision_with(k: usize, n: usize) -> SelectionDecision {
        let masses: Vec<f64> = (0..n).map(|b| (n - b) as f64).collect();
        let total: f64 = masses.iter().sum();
        let normalized: Vec<f64> = masses.iter().map(|m| m / total).collect();
        SelectionDecision {
            promoted: (0..k).collect(),
            ranking: (0..n).collect(),
            k_star: k,
            est_tail_mass: normalized[k..].iter().sum(),
            clamped: false,
            normalized_masses: normalized,
            partial_mass: 0.0,
        }
    }

    #[test]
    fn rung1_doubles_and_clamps() {
        let d = rung1_expand(&decision_with(2, 10));
        assert_eq!(d.k_star, 4);
        assert_eq!(d.promoted, vec![0, 1, 2, 3]);
        let d = rung1_expand(&decision_with(8, 10));
        assert_eq!(d.k_star, 10);
        assert!(d.clamped);
        assert_eq!(d.est_tail_mass, 0.0);
    }

    #[test]
    fn rung2_threshold_examples() {
        let p = PolicyConfig::default();
        assert_eq!(rung2_value_promotions(&[0.9], &[0.06], &p).len(), 1);
        assert!(rung2_value_promotions(&[0.5], &[0.06], &p).is_empty());
        assert!(rung2_value_promotions(&[0.5, 0.5], &[0.0, 0.0], &p).is_empty());
    }

    #[test]
    fn rung2_greedy_meets_budget() {
        let p = PolicyConfig {
            greedy_value_budget: Some(0.01),
            ..PolicyConfig::default()
        };
        let masses = [0.4, 0.3, 0.2, 0.1];
        let etas = [0.02, 0.05, 0.01, 0.03];
        // contributions 0.008, 0.015, 0.002, 0.003; total 0.028
        let set = rung2_value_promotions(&masses, &etas, &p);
        assert_eq!(set, BTreeSet::from([0, 1]));
    }

    #[test]
    fn ranking_examples() {
        let a = BTreeMap::from([(0, 2.0), (1, 1.9)]);
        let b = BTreeMap::from([(0, 1.9), (1, 2.0)]);
        assert!(ranking_consistency(&a, &a, 1).unwrap());
        assert!(!ranking_consistency(&b, &a, 1).unwrap());
        assert!(matches!(
            ranking_consistency(&a, &a, 3),
            Err(Error::RankingDepth { depth: 3, promoted: 2 })
        ));
    }

    #[test]
    fn ranking_ties_break_by_index() {
        let a = BTreeMap::from([(3, 1.0), (5, 1.0), (7, 0.0)]);
        assert_eq!(top_r(&a, 2), vec![3, 5]);
    }

    #[test]
    fn boundary_examples() {
        assert!(boundary_check(&[1.9], 0.05, 2.0));
        assert!(!boundary_check(&[1.9], 0.2, 2.0));
        assert!(boundary_check(&[], 10.0, 2.0));
    }

    #[test]
    fn canary_examples() {
        assert!(score_canary(&[1.0, 2.0], &[1.0, 2.0], 0.0, 0.0));
        assert!(score_canary(&[1.0], &[1.1], 0.1, 1e-6));
        assert!(!score_canary(&[1.0], &[1.2], 0.1, 1e-6));
    }

    #[test]
    fn exploration_rate_zero_draws_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        assert!(exploration_select(&mut rng, &[0, 1, 2], 0.0).is_empty());
        assert_eq!(rng, before);
    }

    #[test]
    fn exploration_replays_under_seed() {
        let blocks: Vec<usize> = (0..100).collect();
        let a = exploration_select(&mut ChaCha8Rng::seed_from_u64(9), &blocks, 0.02);
        let b = exploration_select(&mut ChaCha8Rng::seed_from_u64(9), &blocks, 0.02);
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let expected: Vec<usize> = blocks.iter().copied().filter(|_| rng.random::<f64>() < 0.02).collect();
        assert_eq!(a, expected);
    }

    fn random_cache(seed: u64, tokens: usize) -> TieredCache {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = TieredCache::new(16, 16, 4).unwrap();
        for _ in 0..tokens {
            let k: Vec<f32> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v: Vec<f32> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            cache.append_token(&k, &v).unwrap();
        }
        cache
    }

    #[test]
    fn honest_exploration_passes() {
        let cache = random_cache(3, 16 * 20 + 5);
        let q: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).sin()).collect();
        let p1 = phase1_score(&q, &cache).unwrap();
        let (_, delta) = crate::certify::compute_delta_all(&q, &cache).unwrap();
        let blocks: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let verdicts = exploration_spot_check(&mut rng, &blocks, 0.05, &q, &cache, &p1, delta, 1e-6).unwrap();
        assert!(verdicts.iter().all(|(_, ok)| *ok));
    }

    #[test]
    fn rung_outputs_are_dense() {
        let caches = vec![random_cache(5, 40), random_cache(6, 40)];
        let queries: Vec<Vec<f32>> = (0..4)
            .map(|h| (0..16).map(|i| ((h * 16 + i) as f32).cos()).collect())
            .collect();
        let out = rung4_all_heads(&queries, &caches).unwrap();
        for (h, q) in queries.iter().enumerate() {
            let dense = dense_attention(q, &caches[h / 2]).unwrap();
            assert_eq!(out.outputs[h], dense);
            assert_eq!(rung3_per_head(q, &caches[h / 2]).unwrap(), dense);
        }
        assert_eq!(out.staging_bytes, 2 * rung4_staging_bytes(40, 16, 1));
    }

    #[test]
    fn staging_at_long_context() {
        let bytes = rung4_staging_bytes(131_072, 128, 8);
        assert_eq!(bytes, 536_870_912);
        assert!((bytes as f64 / 1e9 - 0.5).abs() < 0.05);
    }

    #[test]
    fn missing_tier2_is_hard_error() {
        let mut cache = random_cache(7, 40);
        cache.drop_tier2();
        let q = vec![0.1f32; 16];
        assert!(rung3_per_head(&q, &cache).unwrap_err().is_tier2_failure());
        assert!(rung4_all_heads(&[q], &[cache]).unwrap_err().is_tier2_failure());
    }

    #[test]
    fn event_rung_cause_pairs() {
        assert!(FallbackEvent::new(4, 0, 0, FallbackCause::Canary).is_ok());
        assert!(FallbackEvent::new(4, 0, 0, FallbackCause::Boundary).is_err());
        assert!(FallbackEvent::new(3, 0, 0, FallbackCause::Boundary).is_ok());
        assert!(FallbackEvent::new(5, 0, 0, FallbackCause::Canary).is_err());
    }

    #[test]
    fn policy_rejects_unknown_fields() {
        let err = serde_json::from_str::<PolicyConfig>(r#"{"tau_cov":0.9,"kmax":3}"#).unwrap_err();
        assert!(err.to_string().contains("kmax"));
        let p: PolicyConfig = serde_json::from_str(r#"{"r":2,"exponent_mode":2}"#).unwrap();
        assert_eq!(p.ranking_depth, 2);
        assert_eq!(p.exponent_mode, ExponentMode::Tight);
    }

    #[test]
    fn policy_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        assert!(PolicyConfig::naive().validate().is_ok());
        let p = PolicyConfig {
            exploration_rate: 0.2,
            ..PolicyConfig::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn selection_feeds_rung1() {
        let cache = random_cache(8, 16 * 12);
        let q = vec![0.2f32; 16];
        let p1 = phase1_score(&q, &cache).unwrap();
        let dec = adaptive_topk(&p1, 0.5, 1, 128);
        let expanded = rung1_expand(&dec);
        assert!(expanded.est_tail_mass <= dec.est_tail_mass);
        assert!(dec.promoted.iter().all(|b| expanded.is_promoted(*b)));
    }
}
