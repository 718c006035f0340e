//! Report bundles: `report.json`, `steps.csv`, `bubbles.csv`, traces and
//! two-column plot-data files. Every file is written to a temporary sibling
//! and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SimError};
use crate::metrics::{self, BubbleReport, StepRecord, Summary};
use crate::paradigms::RunOutput;
use crate::simengine::Trace;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SimError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub paradigm: String,
    pub seed: u64,
    pub trace_hash: String,
    pub trace_file: String,
    pub summary: Summary,
    pub steps: Vec<StepRecord>,
    pub bubbles: Vec<BubbleReport>,
    /// Audit guarantees this paradigm claims but broke.
    pub violations: Vec<String>,
    pub config: Value,
}

impl RunReport {
    pub fn build(
        out: &RunOutput,
        warmup: u64,
        staleness_k: u32,
        config: Value,
        trace_file: &str,
    ) -> Result<Self> {
        let summary = metrics::summarize(&out.trace, warmup)?;
        let k = (out.kind == crate::paradigms::ParadigmKind::Dora).then_some(staleness_k);
        Ok(RunReport {
            paradigm: out.kind.name().to_string(),
            seed: summary.seed,
            trace_hash: out.trace.hash(),
            trace_file: trace_file.to_string(),
            violations: summary.audit.violations(out.kind.name(), k),
            steps: metrics::step_decomposition(&out.trace)?,
            bubbles: metrics::all_bubbles(&out.trace)?,
            summary,
            config,
        })
    }
}

pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from(StepRecord::CSV_HEADER);
    s.push('\n');
    for r in steps {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn bubbles_csv(bubbles: &[BubbleReport]) -> String {
    let mut s = String::from("step,device,intra,inter\n");
    for b in bubbles {
        for d in &b.devices {
            s.push_str(&format!("{},{},{},{}\n", b.step, d.device, d.intra, d.inter));
        }
    }
    s
}

fn xy<X: std::fmt::Display>(rows: impl IntoIterator<Item = (X, f64)>) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in rows {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

/// Write one run's bundle into `dir`; returns the files written.
pub fn write_run_bundle(dir: &Path, report: &RunReport, trace: &Trace) -> Result<Vec<PathBuf>> {
    let files: Vec<(PathBuf, Vec<u8>)> = vec![
        (dir.join(&report.trace_file), trace.to_jsonl()),
        (dir.join("report.json"), serde_json::to_vec_pretty(report)?),
        (dir.join("steps.csv"), steps_csv(&report.steps).into_bytes()),
        (dir.join("bubbles.csv"), bubbles_csv(&report.bubbles).into_bytes()),
        (
            dir.join("plot_step_time.csv"),
            xy(report.steps.iter().map(|s| (s.step, s.t_total))).into_bytes(),
        ),
        (
            dir.join("plot_bubbles.csv"),
            bubble_stack(std::slice::from_ref(report)).into_bytes(),
        ),
    ];
    write_all(files)
}

fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(files.len());
    for (p, bytes) in files {
        write_atomic(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

fn bubble_stack(reports: &[RunReport]) -> String {
    let mut s = String::from("x,intra,inter\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{}\n",
            r.paradigm, r.summary.total_intra_bubble, r.summary.total_inter_bubble
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub paradigm: String,
    pub mean_step_time: f64,
    pub rollout_only_fraction: f64,
    pub throughput: f64,
    pub produced_throughput: f64,
    pub max_staleness: u32,
    pub c1_violations: u64,
    pub c2_dropped: u64,
    pub reprefill_tokens: u64,
    pub trace_file: String,
    pub trace_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    /// SHA-256 over every request's true lengths; equal across paradigms.
    pub workload_fingerprint: String,
    pub rows: Vec<ComparisonRow>,
    pub config: Value,
}

impl Comparison {
    pub fn build(reports: &[RunReport], workload_fingerprint: String, config: Value) -> Self {
        Comparison {
            seed: reports.first().map_or(0, |r| r.seed),
            workload_fingerprint,
            rows: reports
                .iter()
                .map(|r| ComparisonRow {
                    paradigm: r.paradigm.clone(),
                    mean_step_time: r.summary.mean_step_time,
                    rollout_only_fraction: r.summary.rollout_only_fraction,
                    throughput: r.summary.throughput,
                    produced_throughput: r.summary.produced_throughput,
                    max_staleness: r.summary.audit.max_staleness,
                    c1_violations: r.summary.audit.c1_violations,
                    c2_dropped: r.summary.audit.c2_dropped,
                    reprefill_tokens: r.summary.audit.reprefill_tokens,
                    trace_file: r.trace_file.clone(),
                    trace_hash: r.trace_hash.clone(),
                })
                .collect(),
            config,
        }
    }
}

/// Traces, per-paradigm reports, `comparison.json` and bar-chart data.
pub fn write_comparison(
    dir: &Path,
    cmp: &Comparison,
    reports: &[RunReport],
    traces: &[&Trace],
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (r, t) in reports.iter().zip(traces) {
        files.push((dir.join(&r.trace_file), t.to_jsonl()));
        files.push((
            dir.join(format!("report_{}.json", r.paradigm)),
            serde_json::to_vec_pretty(r)?,
        ));
        files.push((
            dir.join(format!("steps_{}.csv", r.paradigm)),
            steps_csv(&r.steps).into_bytes(),
        ));
    }
    files.push((dir.join("comparison.json"), serde_json::to_vec_pretty(cmp)?));
    files.push((
        dir.join("plot_step_time.csv"),
        xy(cmp.rows.iter().map(|r| (r.paradigm.clone(), r.mean_step_time))).into_bytes(),
    ));
    files.push((
        dir.join("plot_throughput.csv"),
        xy(cmp.rows.iter().map(|r| (r.paradigm.clone(), r.throughput))).into_bytes(),
    ));
    files.push((dir.join("plot_bubbles.csv"), bubble_stack(reports).into_bytes()));
    write_all(files)
}
