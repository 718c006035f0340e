//! Deterministic discrete-event core: virtual clock, `(time, seq)` ordered
//! queue and an append-only trace.
//!
//! Nothing in here reads the wall clock. Two events at the same instant run in
//! the order they were scheduled.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::orchestrator::TriggerKind;

struct Scheduled<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap: invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct Engine<E> {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
    pub trace: Trace,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            trace: Trace::default(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue `event` at `time`, returning its sequence number.
    pub fn schedule(&mut self, time: f64, event: E) -> Result<u64> {
        if !(time >= self.now) {
            return Err(SimError::protocol(format!(
                "event scheduled in the past: t={time} < now={}",
                self.now
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { time, seq, event });
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) -> Result<u64> {
        self.schedule(self.now + delay.max(0.0), event)
    }

    /// Pop the next event and advance the clock to it.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let s = self.queue.pop()?;
        self.now = s.time;
        Some((s.time, s.event))
    }

    pub fn record(&mut self, event: TraceEvent) {
        self.trace.push(self.now, event);
    }
}

/// Callbacks driven by [`run_until`].
pub trait Handler<E> {
    fn handle(&mut self, engine: &mut Engine<E>, time: f64, event: E) -> Result<()>;
    fn done(&self) -> bool;
    /// Human-readable dump of stuck work, used in deadlock errors.
    fn diagnose(&self) -> String;
}

/// Execute events until `handler.done()`. An exhausted queue before that is a
/// deadlock.
pub fn run_until<E, H: Handler<E>>(engine: &mut Engine<E>, handler: &mut H) -> Result<()> {
    while !handler.done() {
        let Some((t, ev)) = engine.pop() else {
            return Err(SimError::Deadlock {
                time: engine.now(),
                diagnostic: handler.diagnose(),
            });
        };
        handler.handle(engine, t, ev)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub paradigm: String,
    pub seed: u64,
    /// `(device id, dp group id)` for every rollout device.
    pub rollout_devices: Vec<(u32, u32)>,
    pub slots_per_device: usize,
    pub train_devices: usize,
    pub colocated: bool,
    pub group_size: usize,
    pub tbs_trajectories: usize,
    pub rbs_trajectories: usize,
    pub staleness_k: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchInfo {
    pub request: u64,
    pub prompt: u64,
    pub version: u32,
    pub device: u32,
    pub slot: u32,
    pub prefill_start: f64,
    pub prefill_tokens: u64,
    /// Prefill rebuilds KV for tokens generated earlier.
    pub reprefill: bool,
    /// Arrival with KV already in place (migration or onload); no prefill.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionInfo {
    pub request: u64,
    pub prompt: u64,
    pub device: u32,
    pub slot: u32,
    pub versions: Vec<u32>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMember {
    pub request: u64,
    pub prompt: u64,
    pub version: u32,
    pub oldest_version: u32,
    pub n_versions: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchInfo {
    pub step: u64,
    pub trainer_version: u32,
    pub group_size: usize,
    pub train_seconds: f64,
    pub members: Vec<BatchMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceInfo {
    pub trigger: TriggerKind,
    pub partition_before: BTreeMap<u32, u32>,
    pub partition_after: BTreeMap<u32, u32>,
    pub n_flashed: u32,
    pub n_moved: u32,
    pub n_offloaded: u32,
    pub kv_bytes_moved: u64,
    pub n_injected_latest: u64,
    pub n_injected_legacy: u64,
    pub load_balancing_s: f64,
    pub request_transfer_s: f64,
    pub free_cache_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationInfo {
    pub request: u64,
    pub src_device: u32,
    pub src_slot: u32,
    pub dst_device: u32,
    pub departed_at: f64,
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadDirection {
    Offload,
    Onload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadInfo {
    pub request: u64,
    pub device: u32,
    pub slot: u32,
    pub direction: OffloadDirection,
    pub started_at: f64,
    pub tokens: u64,
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardInfo {
    pub request: u64,
    pub prompt: u64,
    pub true_output_tokens: u64,
    pub generated_tokens: u64,
    pub completed: bool,
    pub device: Option<u32>,
    pub slot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    /// Active versions, newest first.
    pub window: Vec<u32>,
    /// Pending + in-flight requests per version.
    pub active: BTreeMap<u32, u64>,
    pub queued: u64,
    pub trainer_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart(RunInfo),
    Dispatch(DispatchInfo),
    PrefillDone {
        request: u64,
        device: u32,
    },
    DecodeTickBatch {
        device: u32,
        resident_tokens: u64,
        capacity: u64,
    },
    RequestComplete(CompletionInfo),
    /// KV dropped; the request goes back to pending and must re-prefill.
    Preempt {
        request: u64,
        device: u32,
        slot: u32,
        generated: u64,
    },
    /// Prefill interrupted by a weight flash; the request waits again with
    /// nothing lost.
    Requeue {
        request: u64,
        device: u32,
        slot: u32,
    },
    /// Decode budget used up; the request keeps its slot and KV but stops.
    SegmentEnd {
        request: u64,
        device: u32,
        slot: u32,
        generated: u64,
    },
    BatchReady(BatchInfo),
    TrainDone {
        step: u64,
        new_version: u32,
    },
    WeightSyncDone {
        version: u32,
        groups: Vec<u32>,
    },
    RebalanceTrigger(RebalanceInfo),
    MigrationDone(MigrationInfo),
    OffloadDone(OffloadInfo),
    Discard(DiscardInfo),
    QueueSnapshot(QueueSnapshot),
    WindowAdvance {
        new_version: u32,
        evicted: Option<u32>,
        window: Vec<u32>,
    },
    WindowBlocked {
        new_version: u32,
        oldest: u32,
        pending: u64,
        in_flight: u64,
        queued: u64,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::RunStart(_) => "run_start",
            TraceEvent::Dispatch(_) => "dispatch",
            TraceEvent::PrefillDone { .. } => "prefill_done",
            TraceEvent::DecodeTickBatch { .. } => "decode_tick_batch",
            TraceEvent::RequestComplete(_) => "request_complete",
            TraceEvent::Preempt { .. } => "preempt",
            TraceEvent::Requeue { .. } => "requeue",
            TraceEvent::SegmentEnd { .. } => "segment_end",
            TraceEvent::BatchReady(_) => "batch_ready",
            TraceEvent::TrainDone { .. } => "train_done",
            TraceEvent::WeightSyncDone { .. } => "weight_sync_done",
            TraceEvent::RebalanceTrigger(_) => "rebalance_trigger",
            TraceEvent::MigrationDone(_) => "migration_done",
            TraceEvent::OffloadDone(_) => "offload_done",
            TraceEvent::Discard(_) => "discard",
            TraceEvent::QueueSnapshot(_) => "queue_snapshot",
            TraceEvent::WindowAdvance { .. } => "window_advance",
            TraceEvent::WindowBlocked { .. } => "window_blocked",
        }
    }
}

/// One line of `trace.jsonl`: `{"t": .., "kind": .., "payload": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct TraceRecord {
    pub t: f64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

// Flattened deserialization buffers the payload and loses integer map keys,
// so records are read through a plain JSON value instead.
#[derive(Deserialize)]
struct RawRecord {
    t: f64,
    kind: serde_json::Value,
    #[serde(default)]
    payload: serde_json::Value,
}

impl TryFrom<RawRecord> for TraceRecord {
    type Error = serde_json::Error;

    fn try_from(r: RawRecord) -> std::result::Result<Self, Self::Error> {
        let mut obj = serde_json::Map::new();
        obj.insert("kind".into(), r.kind);
        obj.insert("payload".into(), r.payload);
        let event = serde_json::from_value(serde_json::Value::Object(obj))?;
        Ok(TraceRecord { t: r.t, event })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, t: f64, event: TraceEvent) {
        debug_assert!(
            self.records.last().is_none_or(|r| r.t <= t),
            "trace time went backwards"
        );
        self.records.push(TraceRecord { t, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.records.len() * 128);
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str::<TraceRecord>(line)?);
        }
        Ok(Self { records })
    }

    /// SHA-256 of the JSON-lines serialization, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("trace records serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    enum Ev {
        A(u32),
    }

    #[test]
    fn same_time_events_run_in_schedule_order() {
        let mut e = Engine::new();
        e.schedule(5.0, Ev::A(1)).unwrap();
        e.schedule(1.0, Ev::A(2)).unwrap();
        e.schedule(5.0, Ev::A(3)).unwrap();
        e.schedule(1.0, Ev::A(4)).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| e.pop()).collect();
        assert_eq!(
            order,
            vec![(1.0, Ev::A(2)), (1.0, Ev::A(4)), (5.0, Ev::A(1)), (5.0, Ev::A(3))]
        );
    }

    #[test]
    fn schedule_now_precedes_later_events() {
        let mut e = Engine::new();
        e.schedule(2.0, Ev::A(0)).unwrap();
        e.schedule(0.0, Ev::A(1)).unwrap();
        assert_eq!(e.pop(), Some((0.0, Ev::A(1))));
    }

    #[test]
    fn scheduling_in_the_past_is_fatal() {
        let mut e = Engine::new();
        e.schedule(3.0, Ev::A(0)).unwrap();
        e.pop();
        assert!(matches!(e.schedule(1.0, Ev::A(1)), Err(SimError::Protocol(_))));
    }

    struct Steps {
        n: u32,
        target: u32,
    }

    impl Handler<Ev> for Steps {
        fn handle(&mut self, _: &mut Engine<Ev>, _: f64, _: Ev) -> Result<()> {
            self.n += 1;
            Ok(())
        }
        fn done(&self) -> bool {
            self.n >= self.target
        }
        fn diagnose(&self) -> String {
            format!("{} of {} steps", self.n, self.target)
        }
    }

    #[test]
    fn empty_queue_is_deadlock() {
        let mut e: Engine<Ev> = Engine::new();
        let mut h = Steps { n: 0, target: 1 };
        let err = run_until(&mut e, &mut h).unwrap_err();
        assert!(matches!(err, SimError::Deadlock { .. }), "{err}");
    }

    #[test]
    fn run_until_stops_at_predicate() {
        let mut e = Engine::new();
        for t in [1.0, 2.0, 3.0] {
            e.schedule(t, Ev::A(0)).unwrap();
        }
        let mut h = Steps { n: 0, target: 2 };
        run_until(&mut e, &mut h).unwrap();
        assert_eq!(e.now(), 2.0);
        assert_eq!(e.pending_events(), 1);
    }

    #[test]
    fn trace_roundtrips_through_jsonl() {
        let mut tr = Trace::default();
        tr.push(0.0, TraceEvent::PrefillDone { request: 1, device: 0 });
        tr.push(
            1.5,
            TraceEvent::TrainDone {
                step: 0,
                new_version: 1,
            },
        );
        tr.push(
            2.0,
            TraceEvent::QueueSnapshot(QueueSnapshot {
                window: vec![1, 0],
                active: BTreeMap::from([(0, 3), (1, 7)]),
                queued: 2,
                trainer_version: 1,
            }),
        );
        let text = String::from_utf8(tr.to_jsonl()).unwrap();
        assert!(text.starts_with(r#"{"t":0.0,"kind":"prefill_done","payload":{"request":1,"device":0}}"#));
        let back = Trace::from_jsonl(&text).unwrap();
        assert_eq!(back, tr);
        assert_eq!(back.hash(), tr.hash());
    }
}
