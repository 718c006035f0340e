//! Parameter grids and parallel batches of independent runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::metrics;
use crate::paradigms::{self, ParadigmKind, RunOutput};
use crate::workload::PromptStream;

/// One swept key and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

fn canonical_key(key: &str) -> &str {
    match key {
        "K" | "k" | "staleness_k" => "orchestrator.staleness_k",
        "n_devices" => "cluster.n_devices",
        "seed" => "seed",
        other => other,
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parse `key=a..b` (inclusive integer range) or `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, rhs) = spec
        .split_once('=')
        .ok_or_else(|| SimError::config(format!("--param {spec:?} needs key=values")))?;
    let key = canonical_key(key.trim()).to_string();
    if key.is_empty() {
        return Err(SimError::config(format!("--param {spec:?} has an empty key")));
    }
    let values: Vec<Value> = if let Some((lo, hi)) = rhs.split_once("..") {
        let lo: i64 = lo
            .trim()
            .parse()
            .map_err(|_| SimError::config(format!("{key}: bad range start {lo:?}")))?;
        let hi: i64 = hi
            .trim()
            .parse()
            .map_err(|_| SimError::config(format!("{key}: bad range end {hi:?}")))?;
        (lo..=hi).map(Value::from).collect()
    } else {
        rhs.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_value)
            .collect()
    };
    if values.is_empty() {
        return Err(SimError::config(format!("{key}: grid has no values")));
    }
    Ok(Axis { key, values })
}

/// Cartesian product of the axes, first axis slowest.
pub fn expand(axes: &[Axis]) -> Result<Vec<Vec<(String, Value)>>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(SimError::config("sweep grid is empty"));
    }
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((a.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

pub fn apply_point(base: &RunConfig, point: &[(String, Value)]) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (k, v) in point {
        cfg.set_param(&format!("{k}={v}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run `jobs` in parallel on at most `threads` workers. Results keep input
/// order and each simulation stays single-threaded, so output is identical
/// for any thread count.
pub fn run_many(
    jobs: &[(RunConfig, ParadigmKind)],
    threads: usize,
) -> Result<Vec<Result<RunOutput>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SimError::config(format!("--jobs: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, kind)| paradigms::run(cfg, *kind))
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub paradigm: String,
    pub seed: u64,
    pub mean_step_time: f64,
    pub rollout_only_fraction: f64,
    pub throughput: f64,
    pub max_staleness: u32,
    pub c1_violations: u64,
    pub c2_dropped: u64,
    pub reprefill_tokens: u64,
    pub trace_hash: String,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "point,paradigm,seed,mean_step_time,rollout_only_fraction,throughput,max_staleness,c1_violations,c2_dropped,reprefill_tokens,trace_hash";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.point,
            self.paradigm,
            self.seed,
            self.mean_step_time,
            self.rollout_only_fraction,
            self.throughput,
            self.max_staleness,
            self.c1_violations,
            self.c2_dropped,
            self.reprefill_tokens,
            self.trace_hash
        )
    }
}

fn point_label(point: &[(String, Value)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Every grid point crossed with every configured paradigm.
pub fn sweep(base: &RunConfig, axes: &[Axis], threads: usize) -> Result<Vec<SweepRow>> {
    let points = expand(axes)?;
    let mut jobs = Vec::new();
    let mut labels = Vec::new();
    for p in &points {
        let cfg = apply_point(base, p)?;
        for &kind in &cfg.paradigms {
            labels.push(point_label(p));
            jobs.push((cfg.clone(), kind));
        }
    }
    let outs = run_many(&jobs, threads)?;
    let mut rows = Vec::with_capacity(outs.len());
    for ((label, (cfg, _)), out) in labels.into_iter().zip(&jobs).zip(outs) {
        let out = out?;
        let s = metrics::summarize(&out.trace, cfg.stop.warmup_steps)?;
        rows.push(SweepRow {
            point: label,
            paradigm: out.kind.name().to_string(),
            seed: cfg.seed,
            mean_step_time: s.mean_step_time,
            rollout_only_fraction: s.rollout_only_fraction,
            throughput: s.throughput,
            max_staleness: s.audit.max_staleness,
            c1_violations: s.audit.c1_violations,
            c2_dropped: s.audit.c2_dropped,
            reprefill_tokens: s.audit.reprefill_tokens,
            trace_hash: out.trace.hash(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SweepRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Hash of the first `n_prompts` prompts' true input and output lengths.
/// Equal across paradigms that share a seed and workload.
pub fn workload_fingerprint(cfg: &RunConfig, n_prompts: u64) -> Result<String> {
    let w = &cfg.workload;
    let mut stream = PromptStream::new(
        cfg.seed,
        w.group_size,
        w.input.clone(),
        w.output.clone(),
        w.reward.clone(),
    )?;
    let mut h = Sha256::new();
    for _ in 0..n_prompts {
        let (_, reqs) = stream.next_group(0.0);
        for r in reqs {
            h.update(r.request_id.to_le_bytes());
            h.update(r.input_tokens.to_le_bytes());
            h.update(r.true_output_tokens.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
