use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use certkv::harness::{gqa_union, run_workload, telemetry_json, UnionReport, WorkloadConfig};
use certkv::verify::{run_suite, Suite};
use certkv::{PolicyConfig, StorageReport};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "certkv", version, about = "Certified quantized KV-cache attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and write per-step telemetry as JSON.
    Run {
        /// JSON file with a `workload` object and an optional `policy` object.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the workload seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Policy override as `field=value`, value parsed as JSON. Repeatable.
        #[arg(long = "set", value_name = "FIELD=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the randomized bound-verification suite.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an analytic table.
    Report {
        #[command(subcommand)]
        kind: Report,
    },
}

#[derive(Subcommand)]
enum Report {
    /// Expected union of promoted blocks across the query heads of a KV group.
    Union {
        #[arg(long, value_delimiter = ',', default_values_t = [8192usize, 32768, 65536, 131072, 262144])]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        block_size: usize,
        #[arg(long, default_value_t = 128)]
        k_max: usize,
        #[arg(long, default_value_t = 32)]
        query_heads: usize,
        /// Use K_max instead of the Rung-1 doubled 2·K_max.
        #[arg(long)]
        no_rung1: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token storage of each tier.
    Storage {
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 16)]
        block_size: usize,
        #[arg(long, default_value_t = 16)]
        group_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Violation(String),
    Tier2(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error: {m}"),
            Failure::Violation(m) => write!(f, "verification failed: {m}"),
            Failure::Tier2(m) => write!(f, "hard error: {m}"),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Violation(_) => 1,
            Failure::Tier2(_) => 3,
        }
    }
}

impl From<certkv::Error> for Failure {
    fn from(e: certkv::Error) -> Self {
        if e.is_tier2_failure() {
            Failure::Tier2(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    workload: WorkloadConfig,
    #[serde(default)]
    policy: PolicyConfig,
}

/// Everything that determines a run, echoed into the telemetry header.
#[derive(Serialize)]
struct RunManifest<'a> {
    config_path: String,
    out_path: String,
    seed: u64,
    overrides: &'a [String],
    workload: &'a WorkloadConfig,
    policy: &'a PolicyConfig,
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn apply_overrides(policy: PolicyConfig, overrides: &[String]) -> Result<PolicyConfig, Failure> {
    if overrides.is_empty() {
        return Ok(policy);
    }
    let mut doc = serde_json::to_value(policy).expect("policy serialises");
    let fields = doc.as_object_mut().expect("policy is an object");
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override `{o}` is not FIELD=VALUE")))?;
        // Bare words such as `on_threshold` are taken as strings.
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        fields.insert(key.to_string(), value);
    }
    serde_json::from_value(doc).map_err(|e| Failure::Usage(format!("policy override: {e}")))
}

fn write_json(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, overrides: &[String]) -> Result<(), Failure> {
    let RunConfig { mut workload, policy } = load_config(config)?;
    if let Some(s) = seed {
        workload.seed = s;
    }
    let policy = apply_overrides(policy, overrides)?;
    workload.validate()?;
    policy.validate()?;

    let run = run_workload(&workload, &policy)?;
    let manifest = RunManifest {
        config_path: config.display().to_string(),
        out_path: out.display().to_string(),
        seed: workload.seed,
        overrides,
        workload: &workload,
        policy: &policy,
    };
    let text = telemetry_json(&manifest, &run).map_err(|e| Failure::Usage(e.to_string()))?;
    write_json(out, &text)?;

    let s = &run.summary;
    println!(
        "{} steps, {} query heads: e_key mean {:.3e} max {:.3e}, rungs {}/{}/{}/{}, dense head-steps {}",
        s.steps,
        workload.h_q,
        s.e_key_mean,
        s.e_key_max,
        s.rungs["rung1"].head_steps,
        s.rungs["rung2"].head_steps,
        s.rungs["rung3"].head_steps,
        s.rungs["rung4"].head_steps,
        s.dense_head_steps,
    );
    Ok(())
}

fn cmd_verify(suite: Suite, trials: u64, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let results = run_suite(suite, trials, seed)?;
    println!("{:<32} {:>10} {:>10}", "property", "trials", "violations");
    for r in &results {
        println!("{:<32} {:>10} {:>10}", r.name, r.trials, r.violations);
        if let Some(ex) = &r.example {
            println!("    first violation: {ex}");
        }
    }
    if let Some(path) = out {
        write_json(
            path,
            &serde_json::to_string_pretty(&results).expect("results serialise"),
        )?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(failed.join(", ")))
    }
}

fn union_table(rows: &[UnionReport], query_heads: usize) {
    println!("query heads {query_heads}");
    println!(
        "{:>10} {:>8} {:>6} {:>12} {:>9}",
        "tokens", "blocks", "k_eff", "union", "fraction"
    );
    for u in rows {
        println!(
            "{:>10} {:>8} {:>6} {:>12.1} {:>8.1}%",
            u.tokens,
            u.blocks,
            u.k_eff,
            u.union_blocks,
            u.fraction * 100.0
        );
    }
}

fn storage_table(r: &StorageReport) {
    println!(
        "d={} B={} g={} (bytes per token per KV head)",
        r.head_dim, r.block_size, r.group_size
    );
    let rows = [
        ("dense keys", r.dense_keys),
        ("dense values", r.dense_values),
        ("dense total", r.dense_total),
        ("int8 keys", r.keys_int8),
        ("key scale/offset", r.key_metadata),
        ("int4 values", r.values_int4),
        ("value scale/offset", r.value_metadata),
        ("block annotations", r.annotations),
        ("tier-1 total", r.tier1_total),
        ("tier-1 total (rounded)", r.tier1_total_rounded),
        ("tier-2 originals", r.tier2_total),
    ];
    for (name, v) in rows {
        println!("{name:<24} {v:>10.4}");
    }
    println!("{:<24} {:>10.4}", "tier-1 / dense", r.ratio_vs_dense);
}

fn cmd_report(kind: Report) -> Result<(), Failure> {
    match kind {
        Report::Union {
            tokens,
            block_size,
            k_max,
            query_heads,
            no_rung1,
            out,
        } => {
            if block_size == 0 || query_heads == 0 {
                return Err(Failure::Usage("block size and query heads must be positive".into()));
            }
            let rows: Vec<UnionReport> = tokens
                .iter()
                .map(|&n| gqa_union(n, block_size, k_max, query_heads, !no_rung1))
                .collect();
            union_table(&rows, query_heads);
            if let Some(path) = out {
                write_json(&path, &serde_json::to_string_pretty(&rows).expect("rows serialise"))?;
            }
        }
        Report::Storage {
            head_dim,
            block_size,
            group_size,
            out,
        } => {
            if head_dim == 0 || block_size == 0 || group_size == 0 || head_dim % group_size != 0 {
                return Err(Failure::Usage(format!(
                    "need positive sizes with group size dividing head dim (d={head_dim}, g={group_size})"
                )));
            }
            let r = StorageReport::new(head_dim, block_size, group_size);
            storage_table(&r);
            if let Some(path) = out {
                write_json(&path, &serde_json::to_string_pretty(&r).expect("report serialises"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            overrides,
        } => cmd_run(&config, &out, seed, &overrides),
        Command::Verify {
            suite,
            trials,
            seed,
            out,
        } => cmd_verify(suite, trials, seed, out.as_deref()),
        Command::Report { kind } => cmd_report(kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
