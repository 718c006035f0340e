//! `dorasim`: run, compare, sweep and audit simulated RL post-training pipelines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dorasim::config::{self, RunConfig};
use dorasim::metrics;
use dorasim::paradigms::{ParadigmKind, RunOutput};
use dorasim::report::{self, Comparison, RunReport};
use dorasim::simengine::{Trace, TraceEvent};
use dorasim::sweep;
use dorasim::SimError;

const EXIT_AUDIT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DEADLOCK: u8 = 3;

#[derive(Parser)]
#[command(name = "dorasim", version, about = "Discrete-event simulator for RL rollout/training pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate each configured paradigm and write a report bundle.
    Run(RunArgs),
    /// Run several paradigms on the same workload and compare them.
    Compare(RunArgs),
    /// Run every point of a parameter grid.
    Sweep(SweepArgs),
    /// Recompute the constraint audit from a trace file.
    Audit(AuditArgs),
    /// Print a built-in preset as a config file.
    Preset {
        /// One of: paper64, paper128
        name: String,
    },
    /// Print the JSON Schema of the config format.
    Schema,
    /// Write small golden traces, one per paradigm, plus their hashes.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (JSON) or a preset name.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated paradigm names.
    #[arg(long, value_delimiter = ',')]
    paradigms: Vec<String>,
    /// Override one config key, `dotted.key=json`. Repeatable.
    #[arg(long = "param")]
    params: Vec<String>,
    /// Parallel simulations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, env = "DORASIM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Exit 1 when a paradigm breaks a guarantee it claims.
    #[arg(long)]
    strict_audit: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Config file (JSON) or a preset name.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    paradigms: Vec<String>,
    /// Grid axis, `key=a..b` or `key=v1,v2`. Repeatable; axes multiply.
    #[arg(long = "param")]
    params: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = "DORASIM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    trace: PathBuf,
    /// Staleness bound to check; defaults to the one recorded in the trace.
    #[arg(long)]
    staleness_k: Option<u32>,
}

/// Config as given plus the resolved form used for the run.
struct Loaded {
    cfg: RunConfig,
    source: Value,
}

fn load_config(spec: &str, seed: Option<u64>, paradigms: &[String], overrides: &[String]) -> anyhow::Result<Loaded> {
    let path = Path::new(spec);
    let (mut cfg, source) = if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let source: Value = serde_json::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        cfg.resolve(path.parent())?;
        (cfg, source)
    } else if config::PRESETS.contains(&spec) {
        let cfg = config::preset(spec)?;
        let source = serde_json::to_value(&cfg)?;
        (cfg, source)
    } else {
        return Err(SimError::Config(format!(
            "--config {spec:?} is neither a file nor a preset ({})",
            config::PRESETS.join(", ")
        ))
        .into());
    };
    for o in overrides {
        cfg.set_param(o)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !paradigms.is_empty() {
        cfg.paradigms = paradigms
            .iter()
            .map(|p| p.parse())
            .collect::<Result<_, SimError>>()?;
    }
    cfg.validate()?;
    Ok(Loaded { cfg, source })
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dorasim-out"))
}

fn embedded(l: &Loaded, overrides: &[String]) -> anyhow::Result<Value> {
    Ok(json!({
        "source": l.source,
        "overrides": overrides,
        "resolved": serde_json::to_value(&l.cfg)?,
    }))
}

fn simulate(cfg: &RunConfig, jobs: usize) -> anyhow::Result<Vec<RunOutput>> {
    let work: Vec<(RunConfig, ParadigmKind)> =
        cfg.paradigms.iter().map(|&k| (cfg.clone(), k)).collect();
    let mut outs = Vec::with_capacity(work.len());
    for r in sweep::run_many(&work, jobs)? {
        outs.push(r?);
    }
    Ok(outs)
}

fn build_reports(l: &Loaded, outs: &[RunOutput], config: &Value) -> anyhow::Result<Vec<RunReport>> {
    outs.iter()
        .map(|o| {
            let file = format!("trace_{}.jsonl", o.kind.name());
            Ok(RunReport::build(
                o,
                l.cfg.stop.warmup_steps,
                l.cfg.orchestrator.staleness_k,
                config.clone(),
                &file,
            )?)
        })
        .collect()
}

fn audit_gate(reports: &[RunReport], strict: bool) -> anyhow::Result<()> {
    let mut bad = Vec::new();
    for r in reports {
        for v in &r.violations {
            eprintln!("audit: {}: {v}", r.paradigm);
            bad.push(format!("{}: {v}", r.paradigm));
        }
    }
    if strict && !bad.is_empty() {
        return Err(AuditFailed(bad).into());
    }
    Ok(())
}

fn print_row(r: &RunReport) {
    let s = &r.summary;
    println!(
        "{:<20} step {:>9.2}s  rollout-only {:>5.1}%  throughput {:>9.0} tok/s  staleness {}  c1 {}  c2 {}  hash {}",
        r.paradigm,
        s.mean_step_time,
        100.0 * s.rollout_only_fraction,
        s.throughput,
        s.audit.max_staleness,
        s.audit.c1_violations,
        s.audit.c2_dropped,
        &r.trace_hash[..12]
    );
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let l = load_config(&c.config, c.seed, &c.paradigms, &c.params)?;
    let dir = out_dir(&c.out, &l.cfg);
    let config = embedded(&l, &c.params)?;
    let outs = simulate(&l.cfg, c.jobs)?;
    let reports = build_reports(&l, &outs, &config)?;
    let single = reports.len() == 1;
    for (mut r, o) in reports.clone().into_iter().zip(&outs) {
        let sub = if single { dir.clone() } else { dir.join(o.kind.name()) };
        r.trace_file = "trace.jsonl".into();
        report::write_run_bundle(&sub, &r, &o.trace)?;
        print_row(&r);
    }
    println!("wrote {}", dir.display());
    audit_gate(&reports, a.strict_audit)
}

fn cmd_compare(a: RunArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let l = load_config(&c.config, c.seed, &c.paradigms, &c.params)?;
    let dir = out_dir(&c.out, &l.cfg);
    let config = embedded(&l, &c.params)?;
    let outs = simulate(&l.cfg, c.jobs)?;
    let reports = build_reports(&l, &outs, &config)?;
    let issued = outs
        .iter()
        .flat_map(|o| o.trace.iter())
        .filter_map(|r| match &r.event {
            TraceEvent::Dispatch(d) => Some(d.prompt + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let fp = sweep::workload_fingerprint(&l.cfg, issued)?;
    let cmp = Comparison::build(&reports, fp, config);
    let traces: Vec<&Trace> = outs.iter().map(|o| &o.trace).collect();
    report::write_comparison(&dir, &cmp, &reports, &traces)?;
    for r in &reports {
        print_row(r);
    }
    println!("wrote {}", dir.join("comparison.json").display());
    audit_gate(&reports, a.strict_audit)
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    if a.params.is_empty() {
        return Err(SimError::Config("sweep needs at least one --param axis".into()).into());
    }
    let l = load_config(&a.config, a.seed, &a.paradigms, &[])?;
    let axes = a
        .params
        .iter()
        .map(|p| sweep::parse_axis(p))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = sweep::sweep(&l.cfg, &axes, a.jobs)?;
    let dir = out_dir(&a.out, &l.cfg);
    report::write_atomic(&dir.join("sweep.csv"), sweep::sweep_csv(&rows).as_bytes())?;
    report::write_atomic(
        &dir.join("sweep.json"),
        &serde_json::to_vec_pretty(&json!({
            "axes": a.params,
            "config": serde_json::to_value(&l.cfg)?,
            "source": l.source,
            "rows": rows,
        }))?,
    )?;
    for r in &rows {
        println!(
            "{:<40} {:<20} step {:>9.2}s  staleness {}",
            r.point, r.paradigm, r.mean_step_time, r.max_staleness
        );
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_audit(a: AuditArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.trace)
        .with_context(|| format!("reading {}", a.trace.display()))?;
    let trace = Trace::from_jsonl(&text)?;
    let info = match trace.records().first().map(|r| &r.event) {
        Some(TraceEvent::RunStart(i)) => i.clone(),
        _ => return Err(anyhow!("{} does not start with run_start", a.trace.display())),
    };
    let audit = metrics::audit(&trace)?;
    let k = a.staleness_k.or(info.staleness_k);
    let violations = audit.violations(&info.paradigm, k);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "paradigm": info.paradigm,
            "audit": audit,
            "violations": violations,
        }))?
    );
    if violations.is_empty() {
        Ok(())
    } else {
        Err(AuditFailed(violations).into())
    }
}

fn cmd_fixtures(out: &Path) -> anyhow::Result<()> {
    let cfg = fixture_config();
    report::write_atomic(&out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    let mut hashes = String::new();
    for kind in ParadigmKind::ALL {
        let o = dorasim::paradigms::run(&cfg, kind)?;
        let name = format!("{}.jsonl", kind.name());
        report::write_atomic(&out.join(&name), &o.trace.to_jsonl())?;
        hashes.push_str(&format!("{}  {name}\n", o.trace.hash()));
    }
    report::write_atomic(&out.join("SHA256SUMS"), hashes.as_bytes())?;
    print!("{hashes}");
    Ok(())
}

/// Small long-tail workload that exercises every paradigm in well under a
/// second.
fn fixture_config() -> RunConfig {
    let mut cfg = config::preset("paper64").expect("preset exists");
    cfg.seed = 11;
    cfg.paradigms = ParadigmKind::ALL.to_vec();
    cfg.workload.group_size = 4;
    cfg.workload.tbs_prompts = 4;
    cfg.workload.input = dorasim::workload::LengthDistribution::uniform(16, 128);
    cfg.workload.output = dorasim::workload::LengthDistribution::lognormal_with_mean(300.0, 1.0, 3000);
    cfg.paradigm.dora_rbs_prompts = Some(8);
    cfg.paradigm.partial_rbs_prompts = Some(5);
    cfg.paradigm.segment_tokens = 3000;
    cfg.cluster.n_devices = 4;
    cfg.cluster.slots_per_device = 4;
    cfg.cluster.kv_capacity_tokens = 20_000;
    cfg.orchestrator.staleness_k = 2;
    cfg.stop.n_steps = 4;
    cfg.stop.warmup_steps = 1;
    cfg
}

#[derive(Debug)]
struct AuditFailed(Vec<String>);

impl std::fmt::Display for AuditFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "audit failed: {}", self.0.join("; "))
    }
}

impl std::error::Error for AuditFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<AuditFailed>().is_some() {
        return EXIT_AUDIT;
    }
    match e.downcast_ref::<SimError>() {
        Some(SimError::Config(_)) => EXIT_CONFIG,
        Some(SimError::Deadlock { .. }) => EXIT_DEADLOCK,
        _ => EXIT_AUDIT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Audit(a) => cmd_audit(a),
        Cmd::Preset { name } => config::preset(&name)
            .map_err(Into::into)
            .and_then(|c| Ok(println!("{}", serde_json::to_string_pretty(&c)?))),
        Cmd::Schema => serde_json::to_string_pretty(&RunConfig::json_schema())
            .map(|s| println!("{s}"))
            .map_err(Into::into),
        Cmd::Fixtures { out } => cmd_fixtures(&out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
