//! `sidp`: capacity planning and job simulation from scenario files.

mod sweep;
mod table;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};
use sidp_core::capacity::kv_capacity;
use sidp_core::catalog::{ConfigError, Scenario, WeightMode};
use sidp_core::engine::{run_job_with, sidp_threshold, RunOptions};
use sidp_core::report::{IterMode, JobReport, RunStatus};
use sidp_core::timing::CostModel;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use sweep::Axis;
use table::{Format, Table};

#[derive(Parser)]
#[command(name = "sidp", version, about = "Shared-weight data-parallel inference simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the workload seed of every scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Subcommand)]
enum Cmd {
    /// Memory plan per scenario: weights, slots, KV tokens, B_e, B_th.
    Plan {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run one scenario and emit its report.
    Simulate {
        scenario: PathBuf,
        /// Also write an event trace (JSON lines) next to the report.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// json emits the report document; table and csv emit per-iteration rows.
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Vary one axis of a base scenario; one row per value, in the given order.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; the ladder and weight_mode axes have defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Side-by-side throughput with a ratio against the first scenario.
    Compare {
        #[arg(required = true, num_args = 2..)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Failures mapped onto process exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Infeasible(String),
    Aborted(String),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Aborted(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Infeasible(m) => write!(f, "infeasible: {m}"),
            Failure::Aborted(m) => write!(f, "simulation aborted: {m}"),
            Failure::Io(e) => write!(f, "{e:#}"),
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut sc = Scenario::from_file(path).map_err(|e| {
        Failure::Config(match e {
            // already names the path
            ConfigError::Io { .. } => anyhow::anyhow!("{e}"),
            other => anyhow::anyhow!("{}: {other}", path.display()),
        })
    })?;
    if let Some(s) = seed {
        sc.workload.seed = s;
    }
    Ok(sc)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::Io),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn status_str(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Infeasible => "infeasible",
        RunStatus::Aborted => "aborted",
    }
}

fn plan(paths: &[PathBuf], c: &Common) -> Result<(), Failure> {
    let scenarios = paths.iter().map(|p| load(p, c.seed)).collect::<Result<Vec<_>, _>>()?;
    let mut t = Table::new(vec![
        "scenario",
        "model",
        "hardware",
        "weight_mode",
        "dp",
        "tp",
        "pp",
        "weight_bytes_per_gpu",
        "slot_bytes_per_gpu",
        "kv_tokens_per_gpu",
        "kv_tokens_per_node",
        "b_e",
        "b_th",
        "feasible",
    ]);
    for sc in &scenarios {
        let cap = kv_capacity(sc);
        let cm = CostModel::new(&sc.stats(), &sc.hardware, &sc.layout);
        let b_th = (sc.layout.weight_mode == WeightMode::Sidp).then(|| sidp_threshold(sc));
        t.push(vec![
            json!(sc.name),
            json!(sc.model.name),
            json!(sc.hardware.name),
            json!(sc.layout.weight_mode.as_str()),
            json!(sc.layout.dp),
            json!(sc.layout.tp),
            json!(sc.layout.pp),
            json!(cap.weight_bytes_per_gpu),
            json!(cap.cache_slot_bytes_per_gpu),
            json!(cap.kv_tokens_per_gpu),
            json!(cap.kv_tokens_per_node),
            json!(cm.saturation_batch()),
            b_th.map_or(Value::Null, |b| json!(b)),
            json!(cap.feasible),
        ]);
    }
    emit(c.out.as_deref(), &t.render(c.format).map_err(Failure::Io)?)
}

fn trace_path(out: Option<&Path>, sc: &Scenario) -> PathBuf {
    match out {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".trace.jsonl");
            PathBuf::from(s)
        }
        None => {
            let safe: String = sc
                .name
                .chars()
                .map(|ch| {
                    if ch.is_ascii_alphanumeric() || "-_.".contains(ch) {
                        ch
                    } else {
                        '_'
                    }
                })
                .collect();
            PathBuf::from(format!("{safe}.trace.jsonl"))
        }
    }
}

fn iteration_table(r: &JobReport) -> Table {
    let mut t = Table::new(vec![
        "engine",
        "iter",
        "mode",
        "start_s",
        "end_s",
        "decode_rows",
        "prefill_tokens",
        "dummy",
        "stall_s",
    ]);
    for it in &r.iterations {
        t.push(vec![
            json!(it.engine),
            json!(it.iter),
            json!(it.mode.as_str()),
            json!(it.start_s),
            json!(it.end_s),
            json!(it.decode_rows),
            json!(it.prefill_tokens),
            json!(it.dummy),
            json!(it.stall_s),
        ]);
    }
    t
}

fn simulate(path: &Path, trace: bool, seed: Option<u64>, out: Option<&Path>, format: Format) -> Result<(), Failure> {
    let sc = load(path, seed)?;
    let opts = RunOptions {
        trace,
        ..RunOptions::default()
    };
    let output = run_job_with(&sc, &opts);
    let r = &output.report;
    eprintln!("{}", r.summary_line());
    let body = match format {
        Format::Json => {
            let mut s = r.to_json();
            s.push('\n');
            s
        }
        f => iteration_table(r).render(f).map_err(Failure::Io)?,
    };
    emit(out, &body)?;
    if let Some(lines) = &output.trace {
        let tp = trace_path(out, &sc);
        let mut text = lines.join("\n");
        text.push('\n');
        std::fs::write(&tp, text)
            .with_context(|| format!("writing {}", tp.display()))
            .map_err(Failure::Io)?;
        eprintln!("trace: {}", tp.display());
    }
    match r.status {
        RunStatus::Ok => Ok(()),
        RunStatus::Infeasible => Err(Failure::Infeasible(r.message.clone().unwrap_or_default())),
        RunStatus::Aborted => Err(Failure::Aborted(r.message.clone().unwrap_or_default())),
    }
}

fn mode_shares(r: &JobReport) -> [f64; 4] {
    [IterMode::Local, IterMode::Was, IterMode::Cas, IterMode::Fsdp].map(|m| r.mode_share(m))
}

fn sweep(path: &Path, axis: Axis, values: &[String], c: &Common) -> Result<(), Failure> {
    let base = load(path, c.seed)?;
    let values: Vec<String> = if values.is_empty() {
        axis.default_values()
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("--values is required for axis {}", axis.name())))?
    } else {
        values.to_vec()
    };
    // Each point is an isolated run; collect() keeps the input order.
    let rows: Vec<Vec<Value>> = values
        .par_iter()
        .map(|v| match sweep::apply(&base, axis, v) {
            Err(e) => {
                let mut row = vec![json!(v), json!("config_error"), json!(format!("{e:#}"))];
                row.extend(std::iter::repeat_n(Value::Null, 10));
                row
            }
            Ok(sc) => {
                let r = run_job_with(&sc, &RunOptions::default()).report;
                let [local, was, cas, fsdp] = mode_shares(&r);
                vec![
                    json!(v),
                    json!(status_str(r.status)),
                    r.message.as_ref().map_or(Value::Null, |m| json!(m)),
                    json!(r.throughput_tok_s),
                    json!(r.makespan_s),
                    json!(r.mean_decode_iteration_s()),
                    json!(r.total_stall_s()),
                    json!(local),
                    json!(was),
                    json!(cas),
                    json!(fsdp),
                    json!(r.switch_count),
                    json!(r.peak_readers_per_owner.iter().copied().max().unwrap_or(0)),
                ]
            }
        })
        .collect();
    let mut t = Table::new(vec![
        axis.name(),
        "status",
        "message",
        "throughput_tok_s",
        "makespan_s",
        "mean_decode_iter_s",
        "stall_s",
        "share_local",
        "share_was",
        "share_cas",
        "share_fsdp",
        "switches",
        "peak_readers",
    ]);
    for r in rows {
        t.push(r);
    }
    emit(c.out.as_deref(), &t.render(c.format).map_err(Failure::Io)?)
}

fn compare(paths: &[PathBuf], c: &Common) -> Result<(), Failure> {
    let scenarios = paths.iter().map(|p| load(p, c.seed)).collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<JobReport> = scenarios
        .par_iter()
        .map(|sc| run_job_with(sc, &RunOptions::default()).report)
        .collect();
    let base = reports[0].throughput_tok_s;
    let mut t = Table::new(vec![
        "scenario",
        "status",
        "weight_mode",
        "dp",
        "tp",
        "throughput_tok_s",
        "makespan_s",
        "total_tokens",
        "throughput_ratio",
    ]);
    for r in &reports {
        let ratio = if base > 0.0 {
            json!(r.throughput_tok_s / base)
        } else {
            Value::Null
        };
        t.push(vec![
            json!(r.scenario),
            json!(status_str(r.status)),
            json!(r.weight_mode),
            json!(r.dp),
            json!(r.tp),
            json!(r.throughput_tok_s),
            json!(r.makespan_s),
            json!(r.total_tokens),
            ratio,
        ]);
    }
    emit(c.out.as_deref(), &t.render(c.format).map_err(Failure::Io)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Plan { scenarios, common } => plan(scenarios, common),
        Cmd::Simulate {
            scenario,
            trace,
            seed,
            out,
            format,
        } => simulate(scenario, *trace, *seed, out.as_deref(), *format),
        Cmd::Sweep {
            scenario,
            axis,
            values,
            common,
        } => sweep(scenario, *axis, values, common),
        Cmd::Compare { scenarios, common } => compare(scenarios, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sidp: {f}");
            ExitCode::from(f.code())
        }
    }
}
