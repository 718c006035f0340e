//! Everything reported about a run, recomputed from its trace alone.
//!
//! A replay pass turns the event stream into slot occupancy segments, prefill
//! intervals and trainer busy intervals; every metric is a measure over those.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::simengine::{BatchInfo, OffloadDirection, RunInfo, Trace, TraceEvent};

/// Half-open wall interval `[start, end)`.
type Span = (f64, f64);

#[derive(Debug, Clone, Copy)]
struct Segment {
    device: u32,
    slot: u32,
    start: f64,
    end: f64,
}

#[derive(Debug, Clone)]
struct StepMark {
    batch_ready: f64,
    train_done: f64,
    batch: BatchInfo,
}

/// Intermediate form shared by all metrics.
#[derive(Debug, Clone)]
struct Replay {
    info: RunInfo,
    end: f64,
    segments: Vec<Segment>,
    prefill: Vec<Span>,
    steps: Vec<StepMark>,
    discards: Vec<f64>,
    reprefill: Vec<(f64, u64)>,
    load_balancing_s: f64,
    request_transfer_s: f64,
    free_cache_s: f64,
    produced_tokens: u64,
}

#[derive(Default)]
struct Occupancy {
    open: HashMap<u64, (u32, u32, f64)>,
    prefill_open: HashMap<u64, f64>,
    segments: Vec<Segment>,
    prefill: Vec<Span>,
}

impl Occupancy {
    fn close(&mut self, id: u64, t: f64) {
        if let Some((device, slot, start)) = self.open.remove(&id) {
            self.segments.push(Segment {
                device,
                slot,
                start,
                end: t.max(start),
            });
        }
        if let Some(p) = self.prefill_open.remove(&id) {
            self.prefill.push((p, t.max(p)));
        }
    }
}

fn replay(trace: &Trace) -> Result<Replay> {
    let mut recs = trace.iter();
    let info = match recs.next().map(|r| &r.event) {
        Some(TraceEvent::RunStart(i)) => i.clone(),
        _ => return Err(SimError::pre("trace does not start with run_start")),
    };
    let end = trace.end_time();
    let mut occ = Occupancy::default();
    let mut steps = Vec::new();
    let mut pending_batch: Option<(f64, BatchInfo)> = None;
    let mut r = Replay {
        info,
        end,
        segments: Vec::new(),
        prefill: Vec::new(),
        steps: Vec::new(),
        discards: Vec::new(),
        reprefill: Vec::new(),
        load_balancing_s: 0.0,
        request_transfer_s: 0.0,
        free_cache_s: 0.0,
        produced_tokens: 0,
    };

    for rec in recs {
        let t = rec.t;
        match &rec.event {
            TraceEvent::Dispatch(d) => {
                occ.close(d.request, t);
                occ.open.insert(d.request, (d.device, d.slot, t));
                if d.prefill_tokens > 0 || !d.resume {
                    occ.prefill_open.insert(d.request, d.prefill_start);
                }
                if d.reprefill {
                    r.reprefill.push((t, d.prefill_tokens));
                }
            }
            TraceEvent::PrefillDone { request, .. } => {
                if let Some(p) = occ.prefill_open.remove(request) {
                    occ.prefill.push((p, t));
                }
            }
            TraceEvent::RequestComplete(c) => {
                occ.close(c.request, t);
                r.produced_tokens += c.input_tokens + c.output_tokens;
            }
            TraceEvent::Preempt { request, .. }
            | TraceEvent::Requeue { request, .. }
            | TraceEvent::SegmentEnd { request, .. } => {
                occ.close(*request, t);
            }
            TraceEvent::Discard(d) => {
                occ.close(d.request, t);
                r.discards.push(t);
                if !d.completed {
                    r.produced_tokens += d.generated_tokens;
                }
            }
            TraceEvent::OffloadDone(o) if o.direction == OffloadDirection::Offload => {
                occ.close(o.request, o.started_at);
            }
            TraceEvent::BatchReady(b) => {
                if pending_batch.is_some() {
                    return Err(SimError::pre("batch_ready while the trainer is busy"));
                }
                pending_batch = Some((t, b.clone()));
            }
            TraceEvent::TrainDone { .. } => {
                let (batch_ready, batch) = pending_batch
                    .take()
                    .ok_or_else(|| SimError::pre("train_done without batch_ready"))?;
                steps.push(StepMark {
                    batch_ready,
                    train_done: t,
                    batch,
                });
            }
            TraceEvent::RebalanceTrigger(rb) => {
                r.load_balancing_s += rb.load_balancing_s;
                r.request_transfer_s += rb.request_transfer_s;
                r.free_cache_s += rb.free_cache_s;
            }
            _ => {}
        }
    }
    let ids: Vec<u64> = occ.open.keys().copied().collect();
    for id in ids {
        occ.close(id, end);
    }
    let Occupancy {
        mut segments,
        mut prefill,
        ..
    } = occ;
    segments.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.device.cmp(&b.device)));
    prefill.sort_by(|a, b| a.0.total_cmp(&b.0));
    r.segments = segments;
    r.prefill = prefill;
    r.steps = steps;
    Ok(r)
}

/// Sorted, disjoint union of intervals.
fn union(mut spans: Vec<Span>) -> Vec<Span> {
    spans.retain(|s| s.1 > s.0);
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.0 <= last.1 => last.1 = last.1.max(s.1),
            _ => out.push(s),
        }
    }
    out
}

fn measure(spans: &[Span], window: Span) -> f64 {
    spans
        .iter()
        .map(|s| (s.1.min(window.1) - s.0.max(window.0)).max(0.0))
        .sum()
}

/// Measure of `a \ b` inside `window`; both inputs already unions.
fn measure_minus(a: &[Span], b: &[Span], window: Span) -> f64 {
    let mut total = 0.0;
    for &x in a {
        let (lo, hi) = (x.0.max(window.0), x.1.min(window.1));
        if hi <= lo {
            continue;
        }
        total += (hi - lo) - measure(b, (lo, hi));
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub t_prefill: f64,
    pub t_decode: f64,
    pub t_train: f64,
    pub t_rollout_only: f64,
    pub t_total: f64,
    pub trained: u64,
    pub discarded: u64,
    pub reprefill_tokens: u64,
    pub max_staleness: u32,
    /// `(request, behavior version)` of every trajectory trained this step.
    pub trained_versions: Vec<(u64, u32)>,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,t_prefill,t_decode,t_train,t_rollout_only,t_total,trained,discarded,reprefill_tokens,max_staleness";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.t_prefill,
            self.t_decode,
            self.t_train,
            self.t_rollout_only,
            self.t_total,
            self.trained,
            self.discarded,
            self.reprefill_tokens,
            self.max_staleness
        )
    }
}

fn batch_staleness(b: &BatchInfo) -> u32 {
    b.members
        .iter()
        .map(|m| b.trainer_version.saturating_sub(m.oldest_version))
        .max()
        .unwrap_or(0)
}

fn decompose(r: &Replay) -> Vec<StepRecord> {
    let active = union(r.segments.iter().map(|s| (s.start, s.end)).collect());
    let prefill = union(r.prefill.clone());
    let trainer = union(r.steps.iter().map(|s| (s.batch_ready, s.train_done)).collect());
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(r.steps.len());
    for (i, s) in r.steps.iter().enumerate() {
        let w = (prev, s.train_done);
        let busy = measure(&active, w);
        let t_prefill = measure(&prefill, w);
        let in_step = |t: f64| t > w.0 && t <= w.1 || (i == 0 && t == 0.0);
        out.push(StepRecord {
            step: s.batch.step,
            t_start: w.0,
            t_end: w.1,
            t_prefill,
            t_decode: (busy - t_prefill).max(0.0),
            t_train: measure(&trainer, w),
            t_rollout_only: measure_minus(&active, &trainer, w),
            t_total: w.1 - w.0,
            trained: s.batch.members.len() as u64,
            discarded: r.discards.iter().filter(|&&t| in_step(t)).count() as u64,
            reprefill_tokens: r
                .reprefill
                .iter()
                .filter(|(t, _)| in_step(*t))
                .map(|(_, n)| n)
                .sum(),
            max_staleness: batch_staleness(&s.batch),
            trained_versions: s
                .batch
                .members
                .iter()
                .map(|m| (m.request, m.version))
                .collect(),
        });
        prev = s.train_done;
    }
    out
}

/// Per-step wall-time breakdown. Step `s` covers `(train_done(s-1), train_done(s)]`,
/// so the totals telescope to the time of the last `train_done`.
pub fn step_decomposition(trace: &Trace) -> Result<Vec<StepRecord>> {
    Ok(decompose(&replay(trace)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceBubble {
    pub device: u32,
    pub intra: f64,
    pub inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleReport {
    pub step: u64,
    pub span_start: f64,
    pub span_end: f64,
    pub devices: Vec<DeviceBubble>,
    pub total_intra: f64,
    pub total_inter: f64,
}

fn bubbles_for(r: &Replay, idx: usize) -> BubbleReport {
    let mark = &r.steps[idx];
    let start = if idx == 0 { 0.0 } else { r.steps[idx - 1].train_done };
    let end = mark.batch_ready;
    // last busy instant of each (device, slot) inside the span
    let mut slot_last: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for s in &r.segments {
        if s.end <= start || s.start >= end {
            continue;
        }
        let e = s.end.min(end);
        let v = slot_last.entry((s.device, s.slot)).or_insert(e);
        *v = v.max(e);
    }
    let mut devices = Vec::with_capacity(r.info.rollout_devices.len());
    for &(device, _) in &r.info.rollout_devices {
        let lasts: Vec<f64> = slot_last
            .range((device, 0)..=(device, u32::MAX))
            .map(|(_, &t)| t)
            .collect();
        let dev_last = lasts.iter().copied().fold(start, f64::max);
        devices.push(DeviceBubble {
            device,
            intra: lasts.iter().map(|l| dev_last - l).sum(),
            inter: (end - dev_last).max(0.0),
        });
    }
    BubbleReport {
        step: mark.batch.step,
        span_start: start,
        span_end: end,
        total_intra: devices.iter().map(|d| d.intra).sum(),
        total_inter: devices.iter().map(|d| d.inter).sum(),
        devices,
    }
}

/// Idle slot time inside step `step`'s rollout span, which runs from the
/// previous `train_done` to this step's `batch_ready`.
pub fn compute_bubbles(trace: &Trace, step: u64) -> Result<BubbleReport> {
    let r = replay(trace)?;
    let idx = r
        .steps
        .iter()
        .position(|s| s.batch.step == step)
        .ok_or_else(|| SimError::pre(format!("step {step} never trained")))?;
    Ok(bubbles_for(&r, idx))
}

pub fn all_bubbles(trace: &Trace) -> Result<Vec<BubbleReport>> {
    let r = replay(trace)?;
    Ok((0..r.steps.len()).map(|i| bubbles_for(&r, i)).collect())
}

fn consumed_tokens(r: &Replay) -> u64 {
    r.steps
        .iter()
        .flat_map(|s| &s.batch.members)
        .map(|m| m.input_tokens + m.output_tokens)
        .sum()
}

/// Tokens of trained trajectories (prompt and response) per wall second.
pub fn throughput(trace: &Trace) -> Result<f64> {
    let r = replay(trace)?;
    throughput_of(&r)
}

fn throughput_of(r: &Replay) -> Result<f64> {
    let tokens = consumed_tokens(r);
    if tokens == 0 {
        return Err(SimError::pre("no trajectory was trained"));
    }
    if r.end <= 0.0 {
        return Err(SimError::pre("run has zero duration"));
    }
    Ok(tokens as f64 / r.end)
}

/// Like [`throughput`] but counting every generated token, trained or not.
pub fn produced_throughput(trace: &Trace) -> Result<f64> {
    let r = replay(trace)?;
    if r.end <= 0.0 {
        return Err(SimError::pre("run has zero duration"));
    }
    Ok(r.produced_tokens as f64 / r.end)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    pub load_balancing: f64,
    pub request_transfer: f64,
    pub free_cache: f64,
}

fn overheads_of(r: &Replay) -> Overheads {
    if r.end <= 0.0 {
        return Overheads::default();
    }
    Overheads {
        load_balancing: r.load_balancing_s / r.end,
        request_transfer: r.request_transfer_s / r.end,
        free_cache: r.free_cache_s / r.end,
    }
}

/// Rebalance costs as fractions of the run's wall time.
pub fn overhead_fractions(trace: &Trace) -> Result<Overheads> {
    Ok(overheads_of(&replay(trace)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Trained trajectories whose tokens came from more than one version.
    pub c1_violations: u64,
    /// Requests abandoned before training.
    pub c2_dropped: u64,
    pub max_staleness: u32,
    /// Every trained prompt contributes exactly its full group, once.
    pub group_integrity: bool,
    pub reprefill_tokens: u64,
}

fn audit_of(r: &Replay) -> Audit {
    let g = r.info.group_size;
    let mut seen = std::collections::HashSet::new();
    let mut integrity = true;
    let mut c1 = 0;
    let mut stale = 0;
    for s in &r.steps {
        let mut per_prompt: BTreeMap<u64, usize> = BTreeMap::new();
        for m in &s.batch.members {
            if m.n_versions > 1 {
                c1 += 1;
            }
            integrity &= seen.insert(m.request);
            *per_prompt.entry(m.prompt).or_default() += 1;
        }
        integrity &= per_prompt.values().all(|&n| n == g);
        stale = stale.max(batch_staleness(&s.batch));
    }
    Audit {
        c1_violations: c1,
        c2_dropped: r.discards.len() as u64,
        max_staleness: stale,
        group_integrity: integrity,
        reprefill_tokens: r.reprefill.iter().map(|(_, n)| n).sum(),
    }
}

pub fn audit(trace: &Trace) -> Result<Audit> {
    Ok(audit_of(&replay(trace)?))
}

impl Audit {
    /// Guarantees the named paradigm claims but this run broke.
    pub fn violations(&self, paradigm: &str, staleness_k: Option<u32>) -> Vec<String> {
        let (c1, c2, bound) = match paradigm {
            "synchronous" => (true, true, Some(0)),
            "one_step_off_policy" => (true, true, Some(1)),
            "dora" => (true, true, staleness_k),
            "replication" => (true, false, Some(0)),
            _ => (false, true, None),
        };
        let mut v = Vec::new();
        if c1 && self.c1_violations > 0 {
            v.push(format!("{} trajectories mix policy versions", self.c1_violations));
        }
        if c2 && self.c2_dropped > 0 {
            v.push(format!("{} requests dropped", self.c2_dropped));
        }
        if let Some(k) = bound {
            if self.max_staleness > k {
                v.push(format!("staleness {} exceeds {k}", self.max_staleness));
            }
        }
        if !self.group_integrity {
            v.push("group integrity broken".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub paradigm: String,
    pub seed: u64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub end_time: f64,
    /// Mean step time after warmup.
    pub mean_step_time: f64,
    /// Share of post-warmup time with rollout running and the trainer idle.
    pub rollout_only_fraction: f64,
    pub throughput: f64,
    pub produced_throughput: f64,
    pub overheads: Overheads,
    pub audit: Audit,
    pub total_intra_bubble: f64,
    pub total_inter_bubble: f64,
}

/// Every per-run metric in one pass. Steps before `warmup` are left out of
/// the step-time averages.
pub fn summarize(trace: &Trace, warmup: u64) -> Result<Summary> {
    let warmup = warmup as usize;
    let r = replay(trace)?;
    let steps = decompose(&r);
    if steps.is_empty() {
        return Err(SimError::pre("no step completed"));
    }
    let tail = if steps.len() > warmup { &steps[warmup..] } else { &steps[..] };
    let total: f64 = tail.iter().map(|s| s.t_total).sum();
    let ro: f64 = tail.iter().map(|s| s.t_rollout_only).sum();
    let bubbles: Vec<BubbleReport> = (0..r.steps.len()).map(|i| bubbles_for(&r, i)).collect();
    Ok(Summary {
        paradigm: r.info.paradigm.clone(),
        seed: r.info.seed,
        steps: steps.len(),
        warmup_steps: warmup.min(steps.len()),
        end_time: r.end,
        mean_step_time: total / tail.len() as f64,
        rollout_only_fraction: if total > 0.0 { ro / total } else { 0.0 },
        throughput: throughput_of(&r)?,
        produced_throughput: if r.end > 0.0 {
            r.produced_tokens as f64 / r.end
        } else {
            0.0
        },
        overheads: overheads_of(&r),
        audit: audit_of(&r),
        total_intra_bubble: bubbles.iter().map(|b| b.total_intra).sum(),
        total_inter_bubble: bubbles.iter().map(|b| b.total_inter).sum(),
    })
}
