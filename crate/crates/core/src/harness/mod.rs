//! Workloads, the decode loop, telemetry and analytic reports.

pub mod decode;
pub mod gqa;
pub mod telemetry;
pub mod workload;

use serde::{Deserialize, Serialize};

use crate::cache::PageInReport;
use crate::error::Result;
use crate::ladder::PolicyConfig;

pub use decode::{head_rng, oracle_top1, run_decode_step, HeadStep, KvScratch, StepOutcome, RNG_ALGORITHM};
pub use gqa::{gqa_union, UnionReport};
pub use telemetry::{aggregate_telemetry, head_step_denominator, RunSummary, RungSummary, StepRecord};
pub use workload::{generate_workload, Workload, WorkloadConfig, WorkloadKind};

/// Output of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTelemetry {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Generates the workload and decodes every step, appending one token per KV
/// head after each step. `on_step` sees every outcome before its token is
/// appended.
pub fn run_workload_with(
    config: &WorkloadConfig,
    policy: &PolicyConfig,
    mut on_step: impl FnMut(&Workload, &StepOutcome) -> Result<()>,
) -> Result<RunTelemetry> {
    policy.validate()?;
    let mut workload = generate_workload(config)?;
    let mut scratch: Vec<KvScratch> = (0..config.h_kv).map(|_| KvScratch::new(policy)).collect();
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let outcome = run_decode_step(
            step,
            &workload.queries[step],
            &workload.caches,
            &mut scratch,
            policy,
            config.seed,
        )?;
        on_step(&workload, &outcome)?;
        records.push(StepRecord::from_outcome(&outcome));
        for (kv, (k, v)) in workload.appends[step].clone().into_iter().enumerate() {
            workload.caches[kv].append_token(&k, &v)?;
        }
    }

    let mut keys = PageInReport::default();
    let mut values = PageInReport::default();
    for s in &scratch {
        keys += s.keys.totals();
        values += s.values.totals();
    }
    let etas: Vec<f64> = workload
        .caches
        .iter()
        .flat_map(|c| c.blocks().iter().map(|b| b.annotations.eta))
        .collect();
    let summary = aggregate_telemetry(&records, config.h_q, keys, values, &etas, RNG_ALGORITHM);
    Ok(RunTelemetry {
        steps: records,
        summary,
    })
}

pub fn run_workload(config: &WorkloadConfig, policy: &PolicyConfig) -> Result<RunTelemetry> {
    run_workload_with(config, policy, |_, _| Ok(()))
}

/// The telemetry document: the caller's header followed by the run body.
#[derive(Debug, Clone, Serialize)]
pub struct TelemetryDocument<'a, H: Serialize> {
    pub header: &'a H,
    pub steps: &'a [StepRecord],
    pub summary: &'a RunSummary,
}

/// Pretty-printed telemetry JSON. Contains no timestamps, so identical
/// inputs give identical bytes.
pub fn telemetry_json<H: Serialize>(header: &H, run: &RunTelemetry) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&TelemetryDocument {
        header,
        steps: &run.steps,
        summary: &run.summary,
    })
}
