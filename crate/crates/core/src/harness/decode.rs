//! Per-step decode orchestration.
//!
//! Order within a step, per head: selection, Rung 1, Δ, Rung 2, page-in,
//! Phase 2, ranking and boundary checks (Rung 3), score canary and
//! exploration. Rung 4 is decided once every head of the step has run.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{PageInReport, PayloadKind, ScratchCache, TieredCache};
use crate::certify::{
    assemble_certificate, compute_delta_all, e_key_bound, e_val_exact, Certificate, CertificateInputs, ReturnedKind,
};
use crate::engine::{adaptive_topk, phase1_score, phase2_attend, reference_block_scores, BlockStat, SelectionDecision};
use crate::error::{Error, Result};
use crate::ladder::{
    boundary_check, exploration_select, ranking_consistency, rung1_expand, rung2_value_promotions, rung3_per_head,
    rung4_all_heads, score_canary, top_r, FallbackCause, FallbackEvent, PolicyConfig, Rung1Mode,
};

/// Identifier of the generator behind exploration draws.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/seed_from_u64+stream(step<<32|head)";

/// Exploration generator for one head-step.
pub fn head_rng(seed: u64, step: usize, head: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | head as u64);
    rng
}

/// Key and value scratch caches of one KV head.
#[derive(Debug, Clone)]
pub struct KvScratch {
    pub keys: ScratchCache,
    pub values: ScratchCache,
}

impl KvScratch {
    pub fn new(policy: &PolicyConfig) -> Self {
        Self {
            keys: ScratchCache::new(PayloadKind::Keys, policy.key_scratch_blocks),
            values: ScratchCache::new(PayloadKind::Values, policy.value_scratch_blocks),
        }
    }
}

/// Everything one head produced at one step.
#[derive(Debug, Clone)]
pub struct HeadStep {
    pub head: usize,
    pub output: Vec<f32>,
    pub certificate: Certificate,
    pub events: Vec<FallbackEvent>,
    pub key_page_in: PageInReport,
    pub value_page_in: PageInReport,
    pub decision: SelectionDecision,
    pub value_promotions: BTreeSet<usize>,
    /// Argmax of the Phase-2 block masses; the partial block is index
    /// `full_blocks`.
    pub attended_top1: usize,
    /// Top promoted block under full-precision keys, when both the ranking
    /// and the boundary checks passed.
    pub certified_top1: Option<usize>,
    pub exploration_checks: usize,
    pub canary_failed: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub step: usize,
    pub heads: Vec<HeadStep>,
    /// Transient staging charged by Rung 4 at this step.
    pub staging_bytes: u64,
}

impl StepOutcome {
    pub fn events(&self) -> impl Iterator<Item = &FallbackEvent> {
        self.heads.iter().flat_map(|h| h.events.iter())
    }
}

struct Pending {
    head: HeadStep,
    rung_flags: [bool; 4],
    inputs: CertificateInputs,
    rung4_cause: Option<FallbackCause>,
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn event(rung: u8, head: usize, step: usize, cause: FallbackCause) -> FallbackEvent {
    FallbackEvent::new(rung, head, step, cause).expect("ladder emits valid rung/cause pairs")
}

#[allow(clippy::too_many_arguments)]
fn decode_head(
    step: usize,
    head: usize,
    query: &[f32],
    cache: &TieredCache,
    scratch: &mut KvScratch,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<Pending> {
    let n_full = cache.full_blocks();
    let mut events = Vec::new();
    let mut flags = [false; 4];

    let p1 = phase1_score(query, cache)?;
    let mut decision = adaptive_topk(&p1, policy.tau_cov, policy.k_min, policy.k_max);
    let (_, delta_h) = compute_delta_all(query, cache)?;
    let v_max = cache.v_max_all();

    let expand = match policy.rung1 {
        Rung1Mode::Always => true,
        Rung1Mode::OnThreshold => {
            e_key_bound(v_max, delta_h, decision.est_tail_mass, policy.exponent_mode) > policy.rung1_threshold
        }
        Rung1Mode::Off => false,
    };
    if expand {
        let expanded = rung1_expand(&decision);
        if expanded.k_star > decision.k_star {
            flags[0] = true;
            events.push(event(1, head, step, FallbackCause::CoverageExpand));
        }
        decision = expanded;
    }

    let etas: Vec<f64> = cache.blocks().iter().map(|b| b.annotations.eta).collect();
    let value_promotions = if policy.rung2 {
        rung2_value_promotions(&decision.normalized_masses, &etas, policy)
    } else {
        BTreeSet::new()
    };
    if !value_promotions.is_empty() {
        flags[1] = true;
        events.push(event(2, head, step, FallbackCause::ValueTol));
    }

    let pending = |head_step: HeadStep, flags: [bool; 4], e_val: f64, rung4_cause| Pending {
        inputs: CertificateInputs {
            delta_h,
            est_tail_mass: head_step.decision.est_tail_mass,
            v_max,
            e_val,
            k_star: head_step.decision.k_star,
            exponent_mode: policy.exponent_mode,
            rung_flags: flags,
        },
        head: head_step,
        rung_flags: flags,
        rung4_cause,
    };

    // A head-step whose working set cannot be resident at once violates the
    // scratch precondition; it is served densely.
    let shortfall =
        decision.promoted.len() > scratch.keys.capacity() || value_promotions.len() > scratch.values.capacity();
    if shortfall {
        if !(policy.rung4 || policy.rung3) {
            return Err(Error::InvalidConfig(format!(
                "head {head} needs {} key and {} value scratch blocks with no dense rung enabled",
                decision.promoted.len(),
                value_promotions.len()
            )));
        }
        let output = rung3_per_head(query, cache)?;
        let hs = HeadStep {
            head,
            output,
            certificate: assemble_certificate(CertificateInputs {
                delta_h,
                est_tail_mass: decision.est_tail_mass,
                v_max,
                e_val: 0.0,
                k_star: decision.k_star,
                exponent_mode: policy.exponent_mode,
                rung_flags: flags,
            }),
            events,
            key_page_in: PageInReport::default(),
            value_page_in: PageInReport::default(),
            attended_top1: 0,
            certified_top1: None,
            decision,
            value_promotions,
            exploration_checks: 0,
            canary_failed: false,
        };
        let cause = if policy.rung4 {
            Some(FallbackCause::Precondition)
        } else {
            None
        };
        let mut p = pending(hs, flags, 0.0, cause);
        if !policy.rung4 {
            p.rung_flags[2] = true;
            p.inputs.rung_flags[2] = true;
            p.head.events.push(event(3, head, step, FallbackCause::RankingDisagree));
        }
        return Ok(p);
    }

    let mut key_page_in = scratch.keys.promote(cache, &decision.promoted)?;
    let value_list: Vec<usize> = value_promotions.iter().copied().collect();
    let value_page_in = scratch.values.promote(cache, &value_list)?;

    let attended = phase2_attend(
        query,
        cache,
        &decision,
        &value_promotions,
        &scratch.keys,
        &scratch.values,
    )?;
    let e_val = e_val_exact(&attended.block_masses, &etas, &value_promotions);
    let attended_top1 = argmax(
        attended
            .block_masses
            .iter()
            .copied()
            .chain((cache.partial_len() > 0).then_some(attended.partial_mass)),
    );

    // Ranking maps over F plus the always-promoted partial block.
    let mut fp16: BTreeMap<usize, f64> = attended.promoted_log_masses.clone();
    let mut int8: BTreeMap<usize, f64> = decision.promoted.iter().map(|&b| (b, p1.blocks[b].log_mass)).collect();
    if let Some(partial) = p1.partial {
        fp16.insert(n_full, BlockStat::from_scores(&p1.partial_scores).log_mass);
        int8.insert(n_full, partial.log_mass);
    }

    let mut certified_top1 = None;
    let mut rung3_cause = None;
    if policy.rung3 && n_full > 0 {
        // Fewer than r promoted entries: no ranking certificate can be issued.
        if fp16.len() < policy.ranking_depth || !ranking_consistency(&fp16, &int8, policy.ranking_depth)? {
            rung3_cause = Some(FallbackCause::RankingDisagree);
        } else {
            let top = top_r(&fp16, policy.ranking_depth);
            let rth = fp16[top.last().expect("r >= 1")];
            let tail: Vec<f64> = decision.tail().iter().map(|&b| p1.blocks[b].log_mass).collect();
            if boundary_check(&tail, delta_h, rth) {
                certified_top1 = Some(top[0]);
            } else {
                rung3_cause = Some(FallbackCause::Boundary);
            }
        }
    }

    let output = match rung3_cause {
        Some(cause) => {
            flags[2] = true;
            events.push(event(3, head, step, cause));
            rung3_per_head(query, cache)?
        }
        None => attended.output,
    };

    let mut canary_failed = false;
    let mut exploration_checks = 0;
    if policy.score_canary {
        for (b, scores) in &attended.promoted_scores {
            if !score_canary(scores, &p1.token_scores[*b], delta_h, policy.epsilon_guard) {
                canary_failed = true;
            }
        }
    }
    if policy.exploration_rate > 0.0 {
        let mut rng = head_rng(seed, step, head);
        let picks = exploration_select(&mut rng, &decision.tail(), policy.exploration_rate);
        key_page_in += scratch.keys.promote(cache, &picks)?;
        for b in picks {
            exploration_checks += 1;
            let reference = reference_block_scores(query, cache, b)?;
            if !score_canary(&reference, &p1.token_scores[b], delta_h, policy.epsilon_guard) {
                canary_failed = true;
            }
        }
    }

    let hs = HeadStep {
        head,
        output,
        certificate: assemble_certificate(CertificateInputs {
            delta_h,
            est_tail_mass: decision.est_tail_mass,
            v_max,
            e_val,
            k_star: decision.k_star,
            exponent_mode: policy.exponent_mode,
            rung_flags: flags,
        }),
        events,
        key_page_in,
        value_page_in,
        decision,
        value_promotions,
        attended_top1,
        certified_top1,
        exploration_checks,
        canary_failed,
    };
    let cause = (canary_failed && policy.rung4).then_some(FallbackCause::Canary);
    Ok(pending(hs, flags, e_val, cause))
}

/// Runs one decode step for every query head. Query head `h` reads KV head
/// `h / (H_Q / H_KV)`; heads run in index order so that shared scratch
/// caches see a deterministic access sequence.
pub fn run_decode_step(
    step: usize,
    queries: &[Vec<f32>],
    caches: &[TieredCache],
    scratch: &mut [KvScratch],
    policy: &PolicyConfig,
    seed: u64,
) -> Result<StepOutcome> {
    if caches.is_empty() || queries.len() % caches.len() != 0 || scratch.len() != caches.len() {
        return Err(Error::Shape {
            context: "query heads per KV head",
            expected: caches.len(),
            actual: queries.len(),
        });
    }
    // Without the originals no fallback is possible, so no output is issued.
    if let Some(kv) = caches.iter().position(|c| !c.tier2_available()) {
        return Err(Error::Tier2Unavailable(format!("KV head {kv}")));
    }
    let group = queries.len() / caches.len();
    let mut pending = Vec::with_capacity(queries.len());
    for (h, q) in queries.iter().enumerate() {
        let kv = h / group;
        pending.push(decode_head(step, h, q, &caches[kv], &mut scratch[kv], policy, seed)?);
    }

    let rung4 = pending.iter().any(|p| p.rung4_cause.is_some());
    let mut staging_bytes = 0;
    let mut dense_all = None;
    if rung4 {
        let out = rung4_all_heads(queries, caches)?;
        staging_bytes = out.staging_bytes;
        dense_all = Some(out.outputs);
    }

    let heads = pending
        .into_iter()
        .enumerate()
        .map(|(h, mut p)| {
            if let Some(outputs) = &dense_all {
                p.head.output = outputs[h].clone();
                p.rung_flags[3] = true;
                p.inputs.rung_flags = p.rung_flags;
                if let Some(cause) = p.rung4_cause {
                    p.head.events.push(event(4, h, step, cause));
                }
            }
            p.head.certificate = assemble_certificate(p.inputs);
            debug_assert!(!rung4 || p.head.certificate.returned_kind == ReturnedKind::DenseAllHeads);
            p.head
        })
        .collect();

    Ok(StepOutcome {
        step,
        heads,
        staging_bytes,
    })
}

/// Exact top-1 block by log-mass on the originals; the partial block is
/// index `full_blocks`. Ties go to the lower index.
pub fn oracle_top1(query: &[f32], cache: &TieredCache) -> Result<usize> {
    let mut masses = Vec::with_capacity(cache.full_blocks() + 1);
    for b in 0..cache.full_blocks() {
        masses.push(BlockStat::from_scores(&reference_block_scores(query, cache, b)?).log_mass);
    }
    let p1 = phase1_score(query, cache)?;
    if let Some(partial) = p1.partial {
        masses.push(partial.log_mass);
    }
    Ok(argmax(masses.into_iter()))
}
