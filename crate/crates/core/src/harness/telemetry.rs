//! Per-step telemetry records and the run summary.
//!
//! Candidate `E_key` is the pre-fallback bound under the configured exponent
//! mode; returned `E_key` is what the output actually carries, zero for
//! dense head-steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::decode::StepOutcome;
use crate::cache::PageInReport;
use crate::certify::Certificate;

const RUNG_KEYS: [&str; 4] = ["rung1", "rung2", "rung3", "rung4"];

fn rung_map() -> BTreeMap<String, u64> {
    RUNG_KEYS.iter().map(|k| (k.to_string(), 0)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub e_key_step_mean: f64,
    pub e_key_step_max: f64,
    pub returned_e_key_step_mean: f64,
    pub returned_e_key_step_max: f64,
    pub e_val_step_mean: f64,
    pub e_val_step_max: f64,
    pub delta_h_max: f64,
    pub k_star_mean: f64,
    pub est_tail_mass_mean: f64,
    /// Head-step event counts keyed `rung1`..`rung4`.
    pub rungs: BTreeMap<String, u64>,
    pub causes: BTreeMap<String, u64>,
    pub dense_heads: usize,
    pub key_hit_rate: f64,
    pub value_hit_rate: f64,
    pub bytes_paged_in: u64,
    pub staging_bytes: u64,
    pub exploration_checks: usize,
    /// One certificate per query head, in head order.
    pub certificates: Vec<Certificate>,
}

impl StepRecord {
    pub fn from_outcome(outcome: &StepOutcome) -> Self {
        let certs: Vec<_> = outcome.heads.iter().map(|h| &h.certificate).collect();
        let cand: Vec<f64> = certs.iter().map(|c| c.e_key()).collect();
        let ret: Vec<f64> = certs.iter().map(|c| c.returned_e_key()).collect();
        let e_val: Vec<f64> = certs.iter().map(|c| c.e_val).collect();
        let k: Vec<f64> = certs.iter().map(|c| c.k_star as f64).collect();
        let tail: Vec<f64> = certs.iter().map(|c| c.est_tail_mass).collect();
        let delta: Vec<f64> = certs.iter().map(|c| c.delta_h).collect();

        let mut rungs = rung_map();
        let mut causes = BTreeMap::new();
        for e in outcome.events() {
            *rungs
                .get_mut(RUNG_KEYS[usize::from(e.rung) - 1])
                .expect("rung in 1..=4") += 1;
            *causes.entry(e.cause.as_str().to_string()).or_insert(0) += 1;
        }

        let mut keys = PageInReport::default();
        let mut values = PageInReport::default();
        for h in &outcome.heads {
            keys += h.key_page_in;
            values += h.value_page_in;
        }

        Self {
            step: outcome.step,
            e_key_step_mean: mean(&cand),
            e_key_step_max: max(&cand),
            returned_e_key_step_mean: mean(&ret),
            returned_e_key_step_max: max(&ret),
            e_val_step_mean: mean(&e_val),
            e_val_step_max: max(&e_val),
            delta_h_max: max(&delta),
            k_star_mean: mean(&k),
            est_tail_mass_mean: mean(&tail),
            rungs,
            causes,
            dense_heads: certs.iter().filter(|c| c.returned_kind.is_dense()).count(),
            key_hit_rate: keys.hit_rate(),
            value_hit_rate: values.hit_rate(),
            bytes_paged_in: keys.bytes + values.bytes,
            staging_bytes: outcome.staging_bytes,
            exploration_checks: outcome.heads.iter().map(|h| h.exploration_checks).sum(),
            certificates: certs.into_iter().cloned().collect(),
        }
    }
}

/// Rung counts with both denominators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungSummary {
    /// Head-steps with an event at this rung.
    pub head_steps: u64,
    /// Steps with at least one such event.
    pub steps: u64,
    pub per_head_step: f64,
    pub per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub head_steps: usize,
    pub e_key_mean: f64,
    pub e_key_max: f64,
    pub returned_e_key_mean: f64,
    pub returned_e_key_max: f64,
    pub e_val_mean: f64,
    pub e_val_max: f64,
    pub k_star_mean: f64,
    pub est_tail_mass_mean: f64,
    pub rungs: BTreeMap<String, RungSummary>,
    pub causes: BTreeMap<String, u64>,
    pub dense_head_steps: usize,
    pub key_hit_rate: f64,
    pub value_hit_rate: f64,
    pub bytes_paged_in: u64,
    pub peak_staging_bytes: u64,
    pub exploration_checks: usize,
    pub eta_mean: f64,
    pub eta_max: f64,
    pub rng: String,
}

/// Folds step records into a run summary. Means are over head-steps.
pub fn aggregate_telemetry(
    records: &[StepRecord],
    heads: usize,
    key_totals: PageInReport,
    value_totals: PageInReport,
    etas: &[f64],
    rng: &str,
) -> RunSummary {
    let steps = records.len();
    let head_steps = steps * heads;
    let weighted = |f: fn(&StepRecord) -> f64| mean(&records.iter().map(f).collect::<Vec<_>>());
    let peak = |f: fn(&StepRecord) -> f64| max(&records.iter().map(f).collect::<Vec<_>>());

    let mut rungs = BTreeMap::new();
    for key in RUNG_KEYS {
        let hs: u64 = records.iter().map(|r| r.rungs[key]).sum();
        let st = records.iter().filter(|r| r.rungs[key] > 0).count() as u64;
        let rate = |num: u64, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        rungs.insert(
            key.to_string(),
            RungSummary {
                head_steps: hs,
                steps: st,
                per_head_step: rate(hs, head_steps),
                per_step: rate(st, steps),
            },
        );
    }
    let mut causes = BTreeMap::new();
    for r in records {
        for (k, v) in &r.causes {
            *causes.entry(k.clone()).or_insert(0) += v;
        }
    }

    RunSummary {
        steps,
        head_steps,
        e_key_mean: weighted(|r| r.e_key_step_mean),
        e_key_max: peak(|r| r.e_key_step_max),
        returned_e_key_mean: weighted(|r| r.returned_e_key_step_mean),
        returned_e_key_max: peak(|r| r.returned_e_key_step_max),
        e_val_mean: weighted(|r| r.e_val_step_mean),
        e_val_max: peak(|r| r.e_val_step_max),
        k_star_mean: weighted(|r| r.k_star_mean),
        est_tail_mass_mean: weighted(|r| r.est_tail_mass_mean),
        rungs,
        causes,
        dense_head_steps: records.iter().map(|r| r.dense_heads).sum(),
        key_hit_rate: key_totals.hit_rate(),
        value_hit_rate: value_totals.hit_rate(),
        bytes_paged_in: records.iter().map(|r| r.bytes_paged_in).sum(),
        peak_staging_bytes: records.iter().map(|r| r.staging_bytes).max().unwrap_or(0),
        exploration_checks: records.iter().map(|r| r.exploration_checks).sum(),
        eta_mean: mean(etas),
        eta_max: max(etas),
        rng: rng.to_string(),
    }
}

/// Head-step denominator over `layers` layers.
pub fn head_step_denominator(query_heads: usize, layers: usize, steps: usize) -> usize {
    query_heads * layers * steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denominator_example() {
        assert_eq!(head_step_denominator(8, 32, 500), 128_000);
    }

    #[test]
    fn empty_run_summary() {
        let s = aggregate_telemetry(&[], 4, PageInReport::default(), PageInReport::default(), &[], "x");
        assert_eq!(s.head_steps, 0);
        assert_eq!(s.rungs["rung3"].per_step, 0.0);
    }
}
