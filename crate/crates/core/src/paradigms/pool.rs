//! Shared rollout pool: devices, slots, fluid KV accounting, request life
//! cycle and the event loop. Paradigm controllers only decide what to inject,
//! when to train and which versions the groups serve.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::cluster::{
    kv_bytes, prefill_time_unchecked, transfer_time, Device, DpGroup, ModelProfile, NetworkConfig,
};
use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::kvcache::{choose_eviction, pcie_time};
use crate::orchestrator::{ActiveRequest, DeviceRoom, StarvationPolicy};
use crate::simengine::{
    BatchInfo, BatchMember, CompletionInfo, DiscardInfo, DispatchInfo, Engine, MigrationInfo,
    OffloadDirection, OffloadInfo, RunInfo, TraceEvent,
};
use crate::transfer_queue::{TrainBatch, TrajectoryRecord, TransferQueue};
use crate::workload::{PromptStream, Request, RequestState, Version};

use super::{ParadigmConfig, ParadigmKind};

/// Window size for paradigms that never block on staleness.
const UNBOUNDED_K: u32 = 1 << 30;

/// KV checks further out than this are not scheduled; any later change in
/// decode concurrency re-arms them.
const KV_HORIZON_S: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Ev {
    PrefillDone { req: u64, epoch: u64 },
    DecodeDone { req: u64, epoch: u64 },
    Arrive { req: u64, epoch: u64 },
    OffloadDone { req: u64, epoch: u64 },
    KvCheck { device: u32, epoch: u64 },
    GroupReady { group: u32, epoch: u64 },
    TrainDone { step: u64 },
    Timer { id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Transit {
    Idle,
    Migration {
        src_device: u32,
        src_slot: u32,
        departed: f64,
        bytes: u64,
        seconds: f64,
    },
    Offload {
        device: u32,
        slot: u32,
        started: f64,
        tokens: u64,
        bytes: u64,
        seconds: f64,
    },
    Onload {
        started: f64,
        tokens: u64,
        bytes: u64,
        seconds: f64,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Live {
    pub req: Request,
    /// Version the request is (or will be) generated with next.
    pub run_version: Version,
    /// Slot held on a device; the device also carries its KV.
    pub loc: Option<(u32, u32)>,
    epoch: u64,
    decode_start: f64,
    gen_at_start: u64,
    budget_end: u64,
    running: bool,
    decoding: bool,
    pub paused: bool,
    reprefill: bool,
    transit: Transit,
}

impl Live {
    fn new(req: Request, v: Version) -> Self {
        Self {
            req,
            run_version: v,
            loc: None,
            epoch: 0,
            decode_start: 0.0,
            gen_at_start: 0,
            budget_end: 0,
            running: false,
            decoding: false,
            paused: false,
            reprefill: false,
            transit: Transit::Idle,
        }
    }

    /// Context tokens including the part decoded since the last sync.
    fn resident_at(&self, t: f64, tau: f64) -> u64 {
        if self.decoding {
            let produced = (((t - self.decode_start) / tau + 1e-9).floor() as u64)
                .min(self.budget_end - self.gen_at_start);
            self.req.input_tokens + self.gen_at_start + produced
        } else {
            self.req.context_tokens()
        }
    }
}

#[derive(Debug, Clone, Default)]
struct DevRt {
    kv_base: f64,
    n_dec: u32,
    t_ref: f64,
    transfer_free_at: f64,
    kv_epoch: u64,
    util_fired: bool,
}

impl DevRt {
    fn kv_at(&self, t: f64, tau: f64) -> f64 {
        self.kv_base + self.n_dec as f64 * (t - self.t_ref) / tau
    }

    fn advance(&mut self, t: f64, tau: f64) {
        self.kv_base = self.kv_at(t, tau).max(0.0);
        self.t_ref = t;
    }
}

pub(crate) enum DecodeOutcome {
    Stale,
    Completed,
    Paused,
}

pub(crate) struct Sim {
    pub engine: Engine<Ev>,
    pub kind: ParadigmKind,
    pub pcfg: ParadigmConfig,
    pub group_size: usize,
    pub profile: ModelProfile,
    pub net: NetworkConfig,
    pub starvation: StarvationPolicy,
    pub colocated: bool,
    n_train_devices: usize,
    util_threshold: Option<f64>,
    stream: PromptStream,
    pub reqs: Vec<Live>,
    pub devices: Vec<Device>,
    dev: Vec<DevRt>,
    pub groups: Vec<DpGroup>,
    group_epoch: Vec<u64>,
    pub pending: BTreeMap<Version, VecDeque<u64>>,
    pub offloaded: BTreeMap<Version, VecDeque<u64>>,
    pub paused: BTreeSet<u64>,
    pub tq: TransferQueue,
    pub trainer_busy: bool,
    pub trainer_version: Version,
    pub steps_done: u64,
    pub n_running: u64,
    pub n_transit: u64,
    pub reprefill_tokens: u64,
    pub n_steps: u64,
    max_time: f64,
    /// Decode budget per dispatch; `None` runs requests to completion.
    pub segment: Option<u64>,
    rollout_halted: bool,
    dirty: bool,
}

impl Sim {
    pub fn new(cfg: &RunConfig, kind: ParadigmKind) -> Result<Self> {
        let pcfg = cfg.paradigm_config(kind);
        let colocated = kind.colocated();
        let c = &cfg.cluster;
        let (n_roll, n_train) = if colocated {
            (c.n_devices, c.n_devices)
        } else {
            c.disaggregated_split()
        };
        let dpg = c.devices_per_group;
        let devices: Vec<Device> = (0..n_roll as u32)
            .map(|d| Device::new(d, d / dpg as u32, c.slots_per_device, c.kv_capacity_tokens))
            .collect();
        let groups: Vec<DpGroup> = (0..(n_roll / dpg) as u32)
            .map(|g| DpGroup {
                dp_group_id: g,
                device_ids: (g * dpg as u32..(g + 1) * dpg as u32).collect(),
                hosted_version: Some(0),
                busy_until: 0.0,
            })
            .collect();
        let k = if kind == ParadigmKind::Dora {
            pcfg.staleness_k
        } else {
            UNBOUNDED_K
        };
        let w = &cfg.workload;
        let stream = PromptStream::new(
            cfg.seed,
            w.group_size,
            w.input.clone(),
            w.output.clone(),
            w.reward.clone(),
        )?;
        let mut engine = Engine::new();
        engine.record(TraceEvent::RunStart(RunInfo {
            paradigm: kind.name().to_string(),
            seed: cfg.seed,
            rollout_devices: devices.iter().map(|d| (d.device_id, d.dp_group_id)).collect(),
            slots_per_device: c.slots_per_device,
            train_devices: n_train,
            colocated,
            group_size: w.group_size,
            tbs_trajectories: pcfg.tbs_trajectories,
            rbs_trajectories: pcfg.rbs_prompts * w.group_size,
            staleness_k: (kind == ParadigmKind::Dora).then_some(pcfg.staleness_k),
        }));
        Ok(Self {
            engine,
            kind,
            group_size: w.group_size,
            profile: cfg.model.clone(),
            net: cfg.network.clone(),
            starvation: cfg.orchestrator.starvation,
            colocated,
            n_train_devices: n_train,
            util_threshold: if kind == ParadigmKind::Dora {
                cfg.orchestrator.trigger.kv_utilization_threshold
            } else {
                None
            },
            stream,
            reqs: Vec::new(),
            dev: vec![DevRt::default(); devices.len()],
            group_epoch: vec![0; groups.len()],
            devices,
            groups,
            pending: BTreeMap::new(),
            offloaded: BTreeMap::new(),
            paused: BTreeSet::new(),
            tq: TransferQueue::new(k, w.group_size)?,
            trainer_busy: false,
            trainer_version: 0,
            steps_done: 0,
            n_running: 0,
            n_transit: 0,
            reprefill_tokens: 0,
            n_steps: cfg.stop.n_steps,
            max_time: cfg.stop.max_time_s.unwrap_or(f64::INFINITY),
            segment: None,
            rollout_halted: false,
            dirty: false,
            pcfg,
        })
    }

    pub fn now(&self) -> f64 {
        self.engine.now()
    }

    fn tau(&self) -> f64 {
        self.profile.tpot
    }

    pub fn tbs(&self) -> usize {
        self.pcfg.tbs_trajectories
    }

    pub fn tbs_prompts(&self) -> usize {
        self.pcfg.tbs_trajectories / self.group_size
    }

    pub fn record(&mut self, ev: TraceEvent) {
        self.engine.record(ev);
    }

    pub fn set_timer(&mut self, at: f64, id: u64) -> Result<()> {
        self.engine.schedule(at, Ev::Timer { id })?;
        Ok(())
    }

    /// Trajectories injected but not yet trained or dropped.
    pub fn outstanding(&self) -> u64 {
        let active: u64 = self.tq.window().all_counts().values().map(|c| c.active()).sum();
        active + self.tq.queued()
    }

    pub fn snapshot(&mut self) {
        let s = self.tq.snapshot();
        self.record(TraceEvent::QueueSnapshot(s));
    }

    // ---- injection and admission ----

    pub fn inject(&mut self, v: Version, n_prompts: u64) -> Result<Vec<u64>> {
        self.inject_at(v, n_prompts, false)
    }

    /// Inject prompts; `front` puts them ahead of anything already waiting.
    pub fn inject_at(&mut self, v: Version, n_prompts: u64, front: bool) -> Result<Vec<u64>> {
        let now = self.now();
        let mut ids = Vec::new();
        for _ in 0..n_prompts {
            let (_, reqs) = self.stream.next_group(now);
            for r in reqs {
                let id = r.request_id;
                if id as usize != self.reqs.len() {
                    return Err(SimError::protocol("request ids out of sync"));
                }
                self.reqs.push(Live::new(r, v));
                ids.push(id);
            }
            self.tq.register_pending(v, self.group_size as u64)?;
        }
        let q = self.pending.entry(v).or_default();
        if front {
            for &id in ids.iter().rev() {
                q.push_front(id);
            }
        } else {
            q.extend(ids.iter().copied());
        }
        self.dirty = true;
        Ok(ids)
    }

    /// Move every not-yet-started request waiting on another version onto `to`.
    pub fn retag_pending(&mut self, to: Version) -> Result<()> {
        let olds: Vec<Version> = self.pending.keys().copied().filter(|&v| v != to).collect();
        for from in olds {
            let q = self.pending.remove(&from).unwrap_or_default();
            let mut fresh = 0;
            let mut moved = VecDeque::new();
            for id in q {
                let l = &mut self.reqs[id as usize];
                if l.req.state != RequestState::Pending || l.run_version != from {
                    continue;
                }
                l.run_version = to;
                if l.req.behavior_version().is_none() {
                    fresh += 1;
                }
                moved.push_back(id);
            }
            if fresh > 0 {
                self.tq.retag_pending(from, to, fresh)?;
            }
            self.pending.entry(to).or_default().extend(moved);
        }
        self.dirty = true;
        Ok(())
    }

    pub fn fill_slots(&mut self) -> Result<()> {
        if self.rollout_halted || !self.dirty {
            return Ok(());
        }
        self.dirty = false;
        let now = self.now();
        for gi in 0..self.groups.len() {
            let Some(v) = self.groups[gi].hosted_version else {
                continue;
            };
            if self.groups[gi].busy_until > now {
                continue;
            }
            for di in self.groups[gi].device_ids.clone() {
                let di = di as usize;
                while let Some(slot) = self.devices[di].free_slot() {
                    if let Some(id) = self.next_offloaded(v, di) {
                        self.onload(id, di, slot)?;
                    } else if let Some(id) = self.next_pending(v, di) {
                        self.admit(id, di, slot)?;
                    } else {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn free_kv(&self, di: usize) -> f64 {
        self.devices[di].kv_capacity_tokens as f64 - self.dev[di].kv_at(self.now(), self.tau())
    }

    fn next_pending(&mut self, v: Version, di: usize) -> Option<u64> {
        let free = self.free_kv(di);
        let q = self.pending.get_mut(&v)?;
        while let Some(&id) = q.front() {
            let l = &self.reqs[id as usize];
            if l.req.state != RequestState::Pending || l.run_version != v {
                q.pop_front();
                continue;
            }
            if l.req.context_tokens() as f64 > free {
                return None;
            }
            q.pop_front();
            return Some(id);
        }
        None
    }

    fn next_offloaded(&mut self, v: Version, di: usize) -> Option<u64> {
        let free = self.free_kv(di);
        let q = self.offloaded.get_mut(&v)?;
        while let Some(&id) = q.front() {
            let l = &self.reqs[id as usize];
            if l.req.state != RequestState::Offloaded || l.transit != Transit::Idle || l.loc.is_some()
            {
                q.pop_front();
                continue;
            }
            if (l.req.context_tokens() + l.req.remaining_tokens()) as f64 > free {
                return None;
            }
            q.pop_front();
            return Some(id);
        }
        None
    }

    fn occupy(&mut self, id: u64, di: usize, slot: usize) -> Result<()> {
        if self.devices[di].slots[slot].is_some() {
            return Err(SimError::protocol(format!("device {di} slot {slot} already taken")));
        }
        self.devices[di].slots[slot] = Some(id);
        let tau = self.tau();
        let now = self.now();
        let tokens = self.reqs[id as usize].req.context_tokens();
        self.dev[di].advance(now, tau);
        self.dev[di].kv_base += tokens as f64;
        let cap = self.devices[di].kv_capacity_tokens as f64;
        if self.dev[di].kv_base > cap + 1e-6 {
            return Err(SimError::protocol(format!(
                "device {di} KV overflow: {:.1} > {cap}",
                self.dev[di].kv_base
            )));
        }
        self.reqs[id as usize].loc = Some((di as u32, slot as u32));
        Ok(())
    }

    /// Release the slot and the KV the request holds on its device.
    fn release(&mut self, id: u64) -> Result<Option<(u32, u32)>> {
        let tau = self.tau();
        let now = self.now();
        let Some((di, slot)) = self.reqs[id as usize].loc.take() else {
            return Ok(None);
        };
        let d = di as usize;
        self.devices[d].slots[slot as usize] = None;
        self.dev[d].advance(now, tau);
        let tokens = self.reqs[id as usize].req.context_tokens() as f64;
        self.dev[d].kv_base = (self.dev[d].kv_base - tokens).max(0.0);
        self.arm_kv(d)?;
        self.dirty = true;
        Ok(Some((di, slot)))
    }

    fn admit(&mut self, id: u64, di: usize, slot: usize) -> Result<()> {
        let now = self.now();
        let seg = self.segment;
        self.occupy(id, di, slot)?;
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Prefilling)?;
        match l.req.behavior_version() {
            None => l.req.assign_version(l.run_version)?,
            Some(_) => l.req.push_segment_version(l.run_version),
        }
        let behavior = l.req.behavior_version().unwrap_or(l.run_version);
        let tokens = l.req.context_tokens();
        let reprefill = std::mem::take(&mut l.reprefill);
        l.budget_end = match seg {
            Some(s) => (l.req.generated_tokens + s).min(l.req.true_output_tokens),
            None => l.req.true_output_tokens,
        };
        l.running = true;
        l.epoch += 1;
        let epoch = l.epoch;
        l.req.timestamps.dispatched.get_or_insert(now);
        let info = DispatchInfo {
            request: id,
            prompt: l.req.prompt_id,
            version: l.run_version,
            device: di as u32,
            slot: slot as u32,
            prefill_start: 0.0,
            prefill_tokens: tokens,
            reprefill,
            resume: false,
        };
        self.n_running += 1;
        if reprefill {
            self.reprefill_tokens += tokens;
        }
        self.tq.mark_dispatched(behavior)?;
        let dev = &mut self.devices[di];
        let start = now.max(dev.prefill_free_at);
        let end = start + prefill_time_unchecked(tokens, &self.profile);
        dev.prefill_free_at = end;
        self.record(TraceEvent::Dispatch(DispatchInfo {
            prefill_start: start,
            ..info
        }));
        self.engine.schedule(end, Ev::PrefillDone { req: id, epoch })?;
        Ok(())
    }

    fn on_prefill_done(&mut self, id: u64, epoch: u64) -> Result<()> {
        let now = self.now();
        let l = &mut self.reqs[id as usize];
        if l.epoch != epoch {
            return Ok(());
        }
        l.req.transition(RequestState::Decoding)?;
        l.req.timestamps.first_token.get_or_insert(now);
        let device = l.loc.map(|x| x.0).unwrap_or_default();
        self.record(TraceEvent::PrefillDone { request: id, device });
        self.start_decode(id)
    }

    fn start_decode(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        let tau = self.tau();
        let l = &mut self.reqs[id as usize];
        let (di, _) = l
            .loc
            .ok_or_else(|| SimError::protocol(format!("request {id} decoding without a slot")))?;
        l.decoding = true;
        l.decode_start = now;
        l.gen_at_start = l.req.generated_tokens;
        let dur = tau * (l.budget_end - l.gen_at_start) as f64;
        let epoch = l.epoch;
        self.dev[di as usize].advance(now, tau);
        self.dev[di as usize].n_dec += 1;
        self.engine.schedule(now + dur, Ev::DecodeDone { req: id, epoch })?;
        self.arm_kv(di as usize)
    }

    /// Stop decoding and settle `generated_tokens`. `exact` marks the budget
    /// end, where the floor would be vulnerable to rounding.
    fn stop_decode(&mut self, id: u64, exact: bool) -> Result<()> {
        let now = self.now();
        let tau = self.tau();
        let l = &mut self.reqs[id as usize];
        if !l.decoding {
            return Ok(());
        }
        let di = l.loc.map(|x| x.0 as usize).unwrap_or_default();
        let elapsed = (now - l.decode_start) / tau;
        let produced = if exact {
            l.budget_end - l.gen_at_start
        } else {
            ((elapsed + 1e-9).floor() as u64).min(l.budget_end - l.gen_at_start)
        };
        l.req.generated_tokens = l.gen_at_start + produced;
        l.decoding = false;
        let d = &mut self.dev[di];
        d.advance(now, tau);
        d.n_dec -= 1;
        d.kv_base = (d.kv_base - (elapsed - produced as f64)).max(0.0);
        self.arm_kv(di)
    }

    fn on_decode_done(&mut self, id: u64, epoch: u64) -> Result<DecodeOutcome> {
        if self.reqs[id as usize].epoch != epoch {
            return Ok(DecodeOutcome::Stale);
        }
        self.stop_decode(id, true)?;
        let l = &mut self.reqs[id as usize];
        if l.req.remaining_tokens() == 0 {
            self.complete(id)?;
            return Ok(DecodeOutcome::Completed);
        }
        self.pause(id);
        Ok(DecodeOutcome::Paused)
    }

    /// Stopped request keeps its slot and KV until resumed or preempted.
    fn pause(&mut self, id: u64) {
        let l = &mut self.reqs[id as usize];
        l.running = false;
        l.paused = true;
        let (device, slot) = l.loc.unwrap_or_default();
        let generated = l.req.generated_tokens;
        self.n_running -= 1;
        self.paused.insert(id);
        self.record(TraceEvent::SegmentEnd {
            request: id,
            device,
            slot,
            generated,
        });
    }

    /// Requests whose KV sits in host memory or is on its way there. The
    /// per-version queues may still hold ids that have since moved on.
    pub fn offloaded_requests(&self) -> Vec<u64> {
        self.reqs
            .iter()
            .filter(|l| l.req.state == RequestState::Offloaded && !l.running)
            .map(|l| l.req.request_id)
            .collect()
    }

    /// Cut the rollout short: decoding requests pause where they are and
    /// prefilling ones go back to the queue. KV in transit pauses on landing.
    pub fn interrupt_rollout(&mut self) -> Result<()> {
        let ids: Vec<u64> = self
            .reqs
            .iter()
            .filter(|l| l.running && l.transit == Transit::Idle)
            .map(|l| l.req.request_id)
            .collect();
        for id in ids {
            if self.reqs[id as usize].req.state == RequestState::Prefilling {
                self.requeue_prefilling(id)?;
            } else {
                self.stop_decode(id, false)?;
                let l = &mut self.reqs[id as usize];
                l.epoch += 1;
                self.pause(id);
            }
        }
        Ok(())
    }

    fn complete(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        let (device, slot) = self.release(id)?.unwrap_or_default();
        self.n_running -= 1;
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Complete)?;
        l.req.timestamps.completed = Some(now);
        l.running = false;
        l.epoch += 1;
        let r = &l.req;
        let versions = r.segment_versions().to_vec();
        let behavior = r.behavior_version().unwrap_or_default();
        let traj = TrajectoryRecord {
            request_id: id,
            prompt_id: r.prompt_id,
            behavior_version: behavior,
            oldest_version: versions.iter().copied().min().unwrap_or(behavior),
            n_versions: versions.len() as u32,
            input_tokens: r.input_tokens,
            output_tokens: r.true_output_tokens,
            reward: r.reward,
        };
        let info = CompletionInfo {
            request: id,
            prompt: r.prompt_id,
            device,
            slot,
            versions,
            input_tokens: r.input_tokens,
            output_tokens: r.true_output_tokens,
            reward: r.reward,
        };
        self.record(TraceEvent::RequestComplete(info));
        self.tq.push_trajectory(traj)
    }

    /// Give a paused request another decode segment in place.
    pub fn resume_segment(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        let seg = self.segment.unwrap_or(u64::MAX);
        let l = &mut self.reqs[id as usize];
        if !l.paused {
            return Err(SimError::protocol(format!("request {id} is not paused")));
        }
        let (device, slot) = l.loc.unwrap_or_default();
        l.paused = false;
        l.running = true;
        l.budget_end = l
            .req
            .generated_tokens
            .saturating_add(seg)
            .min(l.req.true_output_tokens);
        l.epoch += 1;
        l.req.push_segment_version(l.run_version);
        let info = DispatchInfo {
            request: id,
            prompt: l.req.prompt_id,
            version: l.run_version,
            device,
            slot,
            prefill_start: now,
            prefill_tokens: 0,
            reprefill: false,
            resume: true,
        };
        self.paused.remove(&id);
        self.n_running += 1;
        self.record(TraceEvent::Dispatch(info));
        self.start_decode(id)
    }

    /// Drop the KV of an unfinished request and send it back to wait for a
    /// slot under `version`. Its next dispatch re-prefills the context.
    pub fn preempt(&mut self, id: u64, version: Version, front: bool) -> Result<()> {
        self.stop_decode(id, false)?;
        let l = &self.reqs[id as usize];
        let state = l.req.state;
        let had_kv = matches!(state, RequestState::Decoding | RequestState::Offloaded);
        if l.running {
            self.n_running -= 1;
        }
        if matches!(l.transit, Transit::Offload { .. } | Transit::Onload { .. }) {
            self.n_transit -= 1;
        }
        let loc = self.release(id)?;
        self.paused.remove(&id);
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Pending)?;
        l.running = false;
        l.paused = false;
        l.transit = Transit::Idle;
        l.epoch += 1;
        l.reprefill = had_kv;
        l.run_version = version;
        let behavior = l.req.behavior_version().unwrap_or(version);
        let generated = l.req.generated_tokens;
        self.tq.mark_requeued(behavior)?;
        if let Some((device, slot)) = loc {
            if had_kv {
                self.record(TraceEvent::Preempt {
                    request: id,
                    device,
                    slot,
                    generated,
                });
            }
        }
        let q = self.pending.entry(version).or_default();
        if front {
            q.push_front(id);
        } else {
            q.push_back(id);
        }
        self.dirty = true;
        Ok(())
    }

    /// Abandon an unfinished request for good.
    pub fn discard(&mut self, id: u64) -> Result<()> {
        let state = self.reqs[id as usize].req.state;
        if state.is_terminal() {
            return Ok(());
        }
        self.stop_decode(id, false)?;
        let l = &self.reqs[id as usize];
        if l.running {
            self.n_running -= 1;
        }
        if l.transit != Transit::Idle {
            self.n_transit -= 1;
        }
        let loc = self.release(id)?;
        self.paused.remove(&id);
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Discarded)?;
        l.running = false;
        l.paused = false;
        l.transit = Transit::Idle;
        l.epoch += 1;
        let was_pending = state == RequestState::Pending;
        let v = l.req.behavior_version().unwrap_or(l.run_version);
        let info = DiscardInfo {
            request: id,
            prompt: l.req.prompt_id,
            true_output_tokens: l.req.true_output_tokens,
            generated_tokens: l.req.generated_tokens,
            completed: false,
            device: loc.map(|x| x.0),
            slot: loc.map(|x| x.1),
        };
        self.tq.mark_dropped(v, was_pending)?;
        self.record(TraceEvent::Discard(info));
        Ok(())
    }

    /// Throw away finished trajectories still waiting in the queue.
    pub fn discard_queued(&mut self) {
        for t in self.tq.drain_all() {
            self.record(TraceEvent::Discard(DiscardInfo {
                request: t.request_id,
                prompt: t.prompt_id,
                true_output_tokens: t.output_tokens,
                generated_tokens: t.output_tokens,
                completed: true,
                device: None,
                slot: None,
            }));
        }
    }

    /// Ids of requests that are not terminal.
    pub fn live_ids(&self) -> Vec<u64> {
        self.reqs
            .iter()
            .filter(|l| !l.req.state.is_terminal())
            .map(|l| l.req.request_id)
            .collect()
    }

    // ---- KV movement ----

    /// Move a decoding request's KV to a free slot on `dst`; decoding
    /// resumes once it lands and the destination group is ready.
    pub fn migrate(&mut self, id: u64, dst: usize) -> Result<(u64, f64)> {
        let now = self.now();
        self.stop_decode(id, false)?;
        let src = self
            .release(id)?
            .ok_or_else(|| SimError::protocol(format!("migrating request {id} has no slot")))?;
        self.reqs[id as usize].req.transition(RequestState::Migrating)?;
        let slot = self.devices[dst]
            .free_slot()
            .ok_or_else(|| SimError::protocol(format!("no free slot on device {dst}")))?;
        self.occupy(id, dst, slot)?;
        let tokens = self.reqs[id as usize].req.context_tokens();
        let bytes = kv_bytes(tokens, &self.profile);
        let secs = self.net.metadata_time()
            + transfer_time(bytes, self.net.bandwidth_bytes_per_s, self.net.latency_s);
        let start = now.max(self.dev[dst].transfer_free_at);
        self.dev[dst].transfer_free_at = start + secs;
        let group = self.devices[dst].dp_group_id as usize;
        let ready = (start + secs).max(self.groups[group].busy_until);
        let l = &mut self.reqs[id as usize];
        l.transit = Transit::Migration {
            src_device: src.0,
            src_slot: src.1,
            departed: now,
            bytes,
            seconds: secs,
        };
        l.epoch += 1;
        let epoch = l.epoch;
        let info = DispatchInfo {
            request: id,
            prompt: l.req.prompt_id,
            version: l.run_version,
            device: dst as u32,
            slot: slot as u32,
            prefill_start: now,
            prefill_tokens: 0,
            reprefill: false,
            resume: true,
        };
        self.n_transit += 1;
        self.record(TraceEvent::Dispatch(info));
        self.engine.schedule(ready, Ev::Arrive { req: id, epoch })?;
        Ok((bytes, secs))
    }

    /// Push a decoding request's KV to host memory over PCIe.
    pub fn offload(&mut self, id: u64) -> Result<()> {
        let now = self.now();
        self.stop_decode(id, false)?;
        let (device, slot) = self
            .release(id)?
            .ok_or_else(|| SimError::protocol(format!("offloading request {id} has no slot")))?;
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Offloaded)?;
        if l.running {
            self.n_running -= 1;
        }
        l.running = false;
        let tokens = l.req.context_tokens();
        let bytes = kv_bytes(tokens, &self.profile);
        let seconds = pcie_time(tokens, &self.profile, &self.net);
        l.transit = Transit::Offload {
            device,
            slot,
            started: now,
            tokens,
            bytes,
            seconds,
        };
        l.epoch += 1;
        let epoch = l.epoch;
        self.n_transit += 1;
        self.engine.schedule(now + seconds, Ev::OffloadDone { req: id, epoch })?;
        Ok(())
    }

    fn on_offload_done(&mut self, id: u64, epoch: u64) -> Result<()> {
        let l = &mut self.reqs[id as usize];
        if l.epoch != epoch {
            return Ok(());
        }
        let Transit::Offload {
            device,
            slot,
            started,
            tokens,
            bytes,
            seconds,
        } = l.transit
        else {
            return Err(SimError::protocol(format!("request {id} not offloading")));
        };
        l.transit = Transit::Idle;
        let v = l.run_version;
        self.n_transit -= 1;
        self.record(TraceEvent::OffloadDone(OffloadInfo {
            request: id,
            device,
            slot,
            direction: OffloadDirection::Offload,
            started_at: started,
            tokens,
            bytes,
            seconds,
        }));
        self.offloaded.entry(v).or_default().push_back(id);
        self.dirty = true;
        Ok(())
    }

    fn onload(&mut self, id: u64, di: usize, slot: usize) -> Result<()> {
        let now = self.now();
        self.occupy(id, di, slot)?;
        let tokens = self.reqs[id as usize].req.context_tokens();
        let bytes = kv_bytes(tokens, &self.profile);
        let seconds = pcie_time(tokens, &self.profile, &self.net);
        let l = &mut self.reqs[id as usize];
        l.running = true;
        l.transit = Transit::Onload {
            started: now,
            tokens,
            bytes,
            seconds,
        };
        l.epoch += 1;
        let epoch = l.epoch;
        let info = DispatchInfo {
            request: id,
            prompt: l.req.prompt_id,
            version: l.run_version,
            device: di as u32,
            slot: slot as u32,
            prefill_start: now,
            prefill_tokens: 0,
            reprefill: false,
            resume: true,
        };
        self.n_running += 1;
        self.n_transit += 1;
        self.record(TraceEvent::Dispatch(info));
        self.engine.schedule(now + seconds, Ev::Arrive { req: id, epoch })?;
        Ok(())
    }

    fn on_arrive(&mut self, id: u64, epoch: u64) -> Result<()> {
        let l = &mut self.reqs[id as usize];
        if l.epoch != epoch {
            return Ok(());
        }
        let (device, slot) = l.loc.unwrap_or_default();
        let ev = match l.transit {
            Transit::Migration {
                src_device,
                src_slot,
                departed,
                bytes,
                seconds,
            } => TraceEvent::MigrationDone(MigrationInfo {
                request: id,
                src_device,
                src_slot,
                dst_device: device,
                departed_at: departed,
                bytes,
                seconds,
            }),
            Transit::Onload {
                started,
                tokens,
                bytes,
                seconds,
            } => TraceEvent::OffloadDone(OffloadInfo {
                request: id,
                device,
                slot,
                direction: OffloadDirection::Onload,
                started_at: started,
                tokens,
                bytes,
                seconds,
            }),
            _ => return Err(SimError::protocol(format!("request {id} arrived from nowhere"))),
        };
        l.transit = Transit::Idle;
        l.req.transition(RequestState::Decoding)?;
        let v = l.run_version;
        self.n_transit -= 1;
        self.record(ev);
        let g = self.devices[device as usize].dp_group_id as usize;
        if self.groups[g].hosted_version != Some(v) {
            return self.rehome(id);
        }
        if self.rollout_halted {
            self.pause(id);
            return Ok(());
        }
        self.start_decode(id)
    }

    /// The request's group switched version while its KV was in transit.
    /// Move it to a device serving its version, or park it on host.
    fn rehome(&mut self, id: u64) -> Result<()> {
        let v = self.reqs[id as usize].run_version;
        let need = self.reqs[id as usize].req.context_tokens() as f64;
        let dst = (0..self.devices.len()).find(|&d| {
            let g = self.devices[d].dp_group_id as usize;
            self.groups[g].hosted_version == Some(v)
                && self.devices[d].free_slot().is_some()
                && self.free_kv(d) >= need
        });
        match dst {
            Some(d) => self.migrate(id, d).map(|_| ()),
            None => self.offload(id),
        }
    }

    /// Put a request caught mid-prefill back at the head of its queue. No
    /// output was produced, so this is not a re-prefill.
    pub fn requeue_prefilling(&mut self, id: u64) -> Result<()> {
        if self.reqs[id as usize].req.state != RequestState::Prefilling {
            return Err(SimError::protocol(format!("request {id} is not prefilling")));
        }
        let (device, slot) = self.release(id)?.unwrap_or_default();
        self.n_running -= 1;
        self.record(TraceEvent::Requeue {
            request: id,
            device,
            slot,
        });
        let l = &mut self.reqs[id as usize];
        l.req.transition(RequestState::Pending)?;
        l.running = false;
        l.epoch += 1;
        let v = l.run_version;
        let behavior = l.req.behavior_version().unwrap_or(v);
        self.tq.mark_requeued(behavior)?;
        self.pending.entry(v).or_default().push_front(id);
        self.dirty = true;
        Ok(())
    }

    /// Requests holding a slot on any device of group `g`.
    pub fn requests_on_group(&self, g: usize) -> Vec<u64> {
        self.groups[g]
            .device_ids
            .iter()
            .flat_map(|&d| self.devices[d as usize].active_requests())
            .collect()
    }

    /// Decoding requests the planner may move.
    pub fn plan_active(&self) -> Vec<ActiveRequest> {
        let mut out = Vec::new();
        for d in &self.devices {
            for (slot, id) in d.slots.iter().enumerate() {
                let Some(id) = *id else { continue };
                let l = &self.reqs[id as usize];
                if l.decoding && l.transit == Transit::Idle {
                    out.push(ActiveRequest {
                        request_id: id,
                        version: l.run_version,
                        group: d.dp_group_id,
                        device: d.device_id,
                        slot: slot as u32,
                        resident_tokens: self.resident_tokens(id),
                    });
                }
            }
        }
        out
    }

    pub fn plan_rooms(&self) -> Vec<DeviceRoom> {
        (0..self.devices.len())
            .map(|d| DeviceRoom {
                device: d as u32,
                group: self.devices[d].dp_group_id,
                free_slots: self.devices[d].free_slots() as u32,
                free_kv_tokens: self.free_kv(d).max(0.0).floor() as u64,
            })
            .collect()
    }

    fn arm_kv(&mut self, di: usize) -> Result<()> {
        let now = self.now();
        let tau = self.tau();
        let cap = self.devices[di].kv_capacity_tokens as f64;
        let th = self.util_threshold;
        let d = &mut self.dev[di];
        d.kv_epoch += 1;
        let kv = d.kv_at(now, tau);
        if let Some(th) = th {
            if kv < th * cap - 1e-6 {
                d.util_fired = false;
            }
        }
        if d.n_dec == 0 {
            return Ok(());
        }
        let rate = d.n_dec as f64 / tau;
        let mut t = now + (cap - kv).max(0.0) / rate;
        if let Some(th) = th {
            if !d.util_fired && kv < th * cap {
                t = t.min(now + (th * cap - kv) / rate);
            }
        }
        if t - now > KV_HORIZON_S {
            return Ok(());
        }
        let epoch = d.kv_epoch;
        self.engine.schedule(t, Ev::KvCheck { device: di as u32, epoch })?;
        Ok(())
    }

    /// Returns true when the utilization threshold was just crossed.
    fn on_kv_check(&mut self, di: usize, epoch: u64) -> Result<bool> {
        if self.dev[di].kv_epoch != epoch {
            return Ok(false);
        }
        let now = self.now();
        let tau = self.tau();
        let cap = self.devices[di].kv_capacity_tokens as f64;
        self.dev[di].advance(now, tau);
        let kv = self.dev[di].kv_base;
        let mut fired = false;
        if let Some(th) = self.util_threshold {
            if !self.dev[di].util_fired && kv >= th * cap - 1e-6 {
                self.dev[di].util_fired = true;
                fired = true;
            }
        }
        if kv >= cap - 1e-6 {
            let cands: Vec<(u64, u64)> = self.devices[di]
                .active_requests()
                .filter(|&id| self.reqs[id as usize].decoding)
                .map(|id| (id, self.reqs[id as usize].resident_at(now, tau)))
                .collect();
            if let Some(victim) = choose_eviction(&cands) {
                self.offload(victim)?;
            }
        }
        self.arm_kv(di)?;
        Ok(fired)
    }

    /// KV tokens resident on a device right now.
    pub fn resident_tokens(&self, id: u64) -> u64 {
        self.reqs[id as usize].resident_at(self.now(), self.tau())
    }

    // ---- versions and training ----

    /// Load new weights on a rollout group; it serves nothing until ready.
    pub fn flash_group(&mut self, g: usize, v: Version) -> Result<()> {
        let until = self.now() + self.profile.weight_sync_time;
        let grp = &mut self.groups[g];
        grp.hosted_version = Some(v);
        grp.busy_until = until;
        self.group_epoch[g] += 1;
        let epoch = self.group_epoch[g];
        self.engine.schedule(
            until,
            Ev::GroupReady {
                group: g as u32,
                epoch,
            },
        )?;
        Ok(())
    }

    fn on_group_ready(&mut self, g: usize, epoch: u64) -> bool {
        if self.group_epoch[g] != epoch {
            return false;
        }
        let version = self.groups[g].hosted_version.unwrap_or_default();
        self.record(TraceEvent::WeightSyncDone {
            version,
            groups: vec![g as u32],
        });
        self.dirty = true;
        true
    }

    pub fn groups_ready(&self) -> bool {
        let now = self.now();
        self.groups.iter().all(|g| g.busy_until <= now)
    }

    pub fn train_seconds(&self, tokens: u64) -> f64 {
        let t = self.profile.train_time.train_time(tokens, self.n_train_devices);
        if self.colocated {
            t + self.profile.weight_sync_time
        } else {
            t
        }
    }

    pub fn start_training(&mut self, batch: TrainBatch) -> Result<()> {
        if self.trainer_busy {
            return Err(SimError::protocol("trainer already busy"));
        }
        let secs = self.train_seconds(batch.tokens());
        let members = batch
            .members()
            .map(|t| BatchMember {
                request: t.request_id,
                prompt: t.prompt_id,
                version: t.behavior_version,
                oldest_version: t.oldest_version,
                n_versions: t.n_versions,
                input_tokens: t.input_tokens,
                output_tokens: t.output_tokens,
            })
            .collect();
        self.record(TraceEvent::BatchReady(BatchInfo {
            step: batch.step,
            trainer_version: self.trainer_version,
            group_size: self.group_size,
            train_seconds: secs,
            members,
        }));
        self.snapshot();
        self.trainer_busy = true;
        if self.colocated {
            self.rollout_halted = true;
        }
        let now = self.now();
        self.engine.schedule(now + secs, Ev::TrainDone { step: batch.step })?;
        Ok(())
    }

    /// Form a batch of TBS trajectories and train on it, if one is ready.
    pub fn try_train(&mut self) -> Result<bool> {
        if self.trainer_busy {
            return Ok(false);
        }
        let tbs = self.tbs();
        match self.tq.try_form_batch(tbs)? {
            Some(b) => {
                self.start_training(b)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn on_train_done(&mut self, step: u64) -> Result<()> {
        let new_version = self.trainer_version + 1;
        self.record(TraceEvent::TrainDone { step, new_version });
        self.trainer_version = new_version;
        self.tq.set_trainer_version(new_version);
        self.trainer_busy = false;
        self.steps_done += 1;
        if self.kind != ParadigmKind::Dora {
            self.tq.advance_window(new_version)?;
        }
        if self.colocated {
            self.rollout_halted = false;
            for g in &mut self.groups {
                g.hosted_version = Some(new_version);
            }
            self.retag_pending(new_version)?;
        }
        self.snapshot();
        self.dirty = true;
        Ok(())
    }

    pub fn quiescent(&self) -> bool {
        self.n_running == 0 && self.n_transit == 0 && !self.trainer_busy
    }

    pub fn diagnose(&self) -> String {
        let mut states: BTreeMap<String, u64> = BTreeMap::new();
        for l in &self.reqs {
            *states.entry(format!("{:?}", l.req.state)).or_default() += 1;
        }
        let pending: BTreeMap<Version, usize> = self
            .pending
            .iter()
            .map(|(v, q)| (*v, q.len()))
            .filter(|x| x.1 > 0)
            .collect();
        let hosted: BTreeMap<Version, usize> =
            self.groups.iter().fold(BTreeMap::new(), |mut m, g| {
                *m.entry(g.hosted_version.unwrap_or(u32::MAX)).or_default() += 1;
                m
            });
        format!(
            "states={states:?} pending_queues={pending:?} groups_by_version={hosted:?} \
             running={} transit={} paused={} trainer_busy={} trainer_version={} \
             queue={:?}",
            self.n_running,
            self.n_transit,
            self.paused.len(),
            self.trainer_busy,
            self.trainer_version,
            self.tq.snapshot()
        )
    }
}

/// Paradigm-specific decisions, invoked by [`drive`].
pub(crate) trait Controller {
    fn start(&mut self, sim: &mut Sim) -> Result<()>;
    fn on_complete(&mut self, _sim: &mut Sim, _req: u64) -> Result<()> {
        Ok(())
    }
    fn on_train_done(&mut self, sim: &mut Sim, step: u64) -> Result<()>;
    /// Nothing runs, nothing moves and the trainer is idle.
    fn on_quiescent(&mut self, _sim: &mut Sim) -> Result<()> {
        Ok(())
    }
    fn on_group_ready(&mut self, _sim: &mut Sim, _group: u32) -> Result<()> {
        Ok(())
    }
    fn on_utilization(&mut self, _sim: &mut Sim, _device: u32) -> Result<()> {
        Ok(())
    }
    fn on_timer(&mut self, _sim: &mut Sim, _id: u64) -> Result<()> {
        Ok(())
    }
    fn diagnose(&self) -> String {
        String::new()
    }
}

pub(crate) fn drive<C: Controller>(mut sim: Sim, mut ctl: C) -> Result<Sim> {
    ctl.start(&mut sim)?;
    sim.fill_slots()?;
    while sim.steps_done < sim.n_steps {
        let Some((t, ev)) = sim.engine.pop() else {
            return Err(SimError::Deadlock {
                time: sim.now(),
                diagnostic: format!("{} {}", sim.diagnose(), ctl.diagnose()),
            });
        };
        if t > sim.max_time {
            break;
        }
        match ev {
            Ev::PrefillDone { req, epoch } => sim.on_prefill_done(req, epoch)?,
            Ev::DecodeDone { req, epoch } => {
                if let DecodeOutcome::Completed = sim.on_decode_done(req, epoch)? {
                    ctl.on_complete(&mut sim, req)?;
                }
            }
            Ev::Arrive { req, epoch } => sim.on_arrive(req, epoch)?,
            Ev::OffloadDone { req, epoch } => sim.on_offload_done(req, epoch)?,
            Ev::KvCheck { device, epoch } => {
                if sim.on_kv_check(device as usize, epoch)? {
                    ctl.on_utilization(&mut sim, device)?;
                }
            }
            Ev::GroupReady { group, epoch } => {
                if sim.on_group_ready(group as usize, epoch) {
                    ctl.on_group_ready(&mut sim, group)?;
                }
            }
            Ev::TrainDone { step } => {
                sim.on_train_done(step)?;
                if sim.steps_done >= sim.n_steps {
                    break;
                }
                ctl.on_train_done(&mut sim, step)?;
            }
            Ev::Timer { id } => ctl.on_timer(&mut sim, id)?,
        }
        sim.fill_slots()?;
        if sim.quiescent() {
            ctl.on_quiescent(&mut sim)?;
            sim.fill_slots()?;
        }
    }
    Ok(sim)
}
