//! Trajectory queue between rollout and trainer, with staleness monitoring,
//! group-atomic batch formation and the sliding version window.
//!
//! The window holds at most `K` consecutive versions. It only slides once the
//! oldest version has nothing pending, nothing in flight and nothing queued,
//! i.e. every trajectory it produced has been handed to the trainer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::simengine::QueueSnapshot;
use crate::workload::Version;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionCounts {
    /// Dispatched to the version but not yet holding a slot.
    pub pending: u64,
    /// Holding a slot, migrating or offloaded.
    pub in_flight: u64,
    /// Complete and waiting in the queue.
    pub queued: u64,
}

impl VersionCounts {
    /// `R_w`: requests still being generated.
    pub fn active(&self) -> u64 {
        self.pending + self.in_flight
    }

    pub fn is_drained(&self) -> bool {
        self.pending == 0 && self.in_flight == 0 && self.queued == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvanceOutcome {
    Advanced {
        evicted: Option<Version>,
    },
    Blocked {
        oldest: Version,
        pending: u64,
        in_flight: u64,
        queued: u64,
    },
}

#[derive(Debug, Clone)]
pub struct VersionWindow {
    k: u32,
    /// Oldest at the front.
    versions: VecDeque<Version>,
    counts: BTreeMap<Version, VersionCounts>,
}

impl VersionWindow {
    pub fn new(k: u32, initial: Version) -> Result<Self> {
        if k == 0 {
            return Err(SimError::config("staleness bound K must be >= 1"));
        }
        let mut counts = BTreeMap::new();
        counts.insert(initial, VersionCounts::default());
        Ok(Self {
            k,
            versions: VecDeque::from([initial]),
            counts,
        })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn newest(&self) -> Version {
        *self.versions.back().expect("window is never empty")
    }

    pub fn oldest(&self) -> Version {
        *self.versions.front().expect("window is never empty")
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, v: Version) -> bool {
        self.counts.contains_key(&v)
    }

    /// Active versions, newest first.
    pub fn versions_newest_first(&self) -> Vec<Version> {
        self.versions.iter().rev().copied().collect()
    }

    pub fn counts(&self, v: Version) -> Option<VersionCounts> {
        self.counts.get(&v).copied()
    }

    pub fn all_counts(&self) -> &BTreeMap<Version, VersionCounts> {
        &self.counts
    }

    fn counts_mut(&mut self, v: Version) -> Result<&mut VersionCounts> {
        self.counts
            .get_mut(&v)
            .ok_or_else(|| SimError::protocol(format!("version {v} is not in the window")))
    }

    pub fn advance(&mut self, new_version: Version) -> Result<AdvanceOutcome> {
        if new_version != self.newest() + 1 {
            return Err(SimError::protocol(format!(
                "window advance to {new_version} but newest is {}",
                self.newest()
            )));
        }
        if (self.versions.len() as u32) < self.k {
            self.versions.push_back(new_version);
            self.counts.insert(new_version, VersionCounts::default());
            return Ok(AdvanceOutcome::Advanced { evicted: None });
        }
        let oldest = self.oldest();
        let c = self.counts[&oldest];
        if !c.is_drained() {
            return Ok(AdvanceOutcome::Blocked {
                oldest,
                pending: c.pending,
                in_flight: c.in_flight,
                queued: c.queued,
            });
        }
        self.versions.pop_front();
        self.counts.remove(&oldest);
        self.versions.push_back(new_version);
        self.counts.insert(new_version, VersionCounts::default());
        Ok(AdvanceOutcome::Advanced {
            evicted: Some(oldest),
        })
    }
}

/// One finished trajectory as seen by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub request_id: u64,
    pub prompt_id: u64,
    pub behavior_version: Version,
    /// Oldest version that generated any of its tokens; equals
    /// `behavior_version` unless the trajectory mixes versions.
    pub oldest_version: Version,
    pub n_versions: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub step: u64,
    /// One entry per prompt, each with exactly `G` members.
    pub groups: Vec<Vec<TrajectoryRecord>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.groups.iter().flatten()
    }

    pub fn tokens(&self) -> u64 {
        self.members()
            .map(|m| m.input_tokens + m.output_tokens)
            .sum()
    }
}

#[derive(Debug, Clone)]
struct QueuedGroup {
    members: Vec<TrajectoryRecord>,
    arrivals: Vec<u64>,
    min_version: Version,
}

#[derive(Debug, Clone)]
pub struct TransferQueue {
    window: VersionWindow,
    group_size: usize,
    trainer_version: Version,
    groups: BTreeMap<u64, QueuedGroup>,
    /// Complete groups ordered oldest version first, then by completion order.
    ready: BTreeSet<(Version, u64, u64)>,
    next_seq: u64,
    pushed: u64,
    consumed: u64,
    dropped: u64,
    drained: u64,
    next_step: u64,
}

impl TransferQueue {
    pub fn new(k: u32, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(SimError::config("group size must be >= 1"));
        }
        Ok(Self {
            window: VersionWindow::new(k, 0)?,
            group_size,
            trainer_version: 0,
            groups: BTreeMap::new(),
            ready: BTreeSet::new(),
            next_seq: 0,
            pushed: 0,
            consumed: 0,
            dropped: 0,
            drained: 0,
            next_step: 0,
        })
    }

    pub fn window(&self) -> &VersionWindow {
        &self.window
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn trainer_version(&self) -> Version {
        self.trainer_version
    }

    pub fn set_trainer_version(&mut self, v: Version) {
        self.trainer_version = v;
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn queued(&self) -> u64 {
        self.pushed - self.consumed - self.drained
    }

    /// Trajectories removed from the queue without being trained.
    pub fn drained(&self) -> u64 {
        self.drained
    }

    pub fn complete_groups(&self) -> usize {
        self.ready.len()
    }

    pub fn register_pending(&mut self, v: Version, n: u64) -> Result<()> {
        self.window.counts_mut(v)?.pending += n;
        Ok(())
    }

    pub fn mark_dispatched(&mut self, v: Version) -> Result<()> {
        let c = self.window.counts_mut(v)?;
        if c.pending == 0 {
            return Err(SimError::protocol(format!("dispatch with no pending for v{v}")));
        }
        c.pending -= 1;
        c.in_flight += 1;
        Ok(())
    }

    /// Move `n` not-yet-started requests from version `from` to `to`.
    pub fn retag_pending(&mut self, from: Version, to: Version, n: u64) -> Result<()> {
        let c = self.window.counts_mut(from)?;
        if c.pending < n {
            return Err(SimError::protocol(format!("retag underflow for v{from}")));
        }
        c.pending -= n;
        self.window.counts_mut(to)?.pending += n;
        Ok(())
    }

    /// An in-flight request lost its slot and waits for another one.
    pub fn mark_requeued(&mut self, v: Version) -> Result<()> {
        let c = self.window.counts_mut(v)?;
        if c.in_flight == 0 {
            return Err(SimError::protocol(format!("requeue with none in flight for v{v}")));
        }
        c.in_flight -= 1;
        c.pending += 1;
        Ok(())
    }

    /// A pending or in-flight request was abandoned (replication baseline only).
    pub fn mark_dropped(&mut self, v: Version, was_pending: bool) -> Result<()> {
        let c = self.window.counts_mut(v)?;
        let slot = if was_pending { &mut c.pending } else { &mut c.in_flight };
        if *slot == 0 {
            return Err(SimError::protocol(format!("drop underflow for v{v}")));
        }
        *slot -= 1;
        self.dropped += 1;
        Ok(())
    }

    pub fn push_trajectory(&mut self, traj: TrajectoryRecord) -> Result<()> {
        let v = traj.behavior_version;
        if !self.window.contains(v) {
            return Err(SimError::protocol(format!(
                "trajectory {} from version {v} outside window {:?}",
                traj.request_id,
                self.window.versions_newest_first()
            )));
        }
        let c = self.window.counts_mut(v)?;
        if c.in_flight == 0 {
            return Err(SimError::protocol(format!(
                "push for v{v} with nothing in flight"
            )));
        }
        c.in_flight -= 1;
        c.queued += 1;
        self.pushed += 1;
        let g = self.group_size;
        let entry = self.groups.entry(traj.prompt_id).or_insert(QueuedGroup {
            members: Vec::with_capacity(g),
            arrivals: Vec::with_capacity(g),
            min_version: traj.oldest_version,
        });
        entry.min_version = entry.min_version.min(traj.oldest_version);
        entry.members.push(traj);
        entry.arrivals.push(self.next_seq);
        if entry.members.len() == g {
            let key = (entry.min_version, self.next_seq, entry.members[0].prompt_id);
            self.ready.insert(key);
        }
        self.next_seq += 1;
        Ok(())
    }

    /// Request ids still queued, in arrival order.
    pub fn queued_requests(&self) -> Vec<u64> {
        let mut all: Vec<(u64, u64)> = self
            .groups
            .values()
            .flat_map(|g| g.arrivals.iter().zip(&g.members).map(|(a, m)| (*a, m.request_id)))
            .collect();
        all.sort_unstable();
        all.into_iter().map(|x| x.1).collect()
    }

    /// Prompts that would make up the next batch, without removing them.
    pub fn plan_batch(&self, tbs: usize) -> Result<Option<Vec<u64>>> {
        if tbs == 0 || tbs % self.group_size != 0 {
            return Err(SimError::pre(format!(
                "tbs {tbs} must be a positive multiple of G={}",
                self.group_size
            )));
        }
        let need = tbs / self.group_size;
        if self.ready.len() < need {
            return Ok(None);
        }
        Ok(Some(self.ready.iter().take(need).map(|k| k.2).collect()))
    }

    /// Members per version of a planned batch.
    pub fn batch_version_counts(&self, prompts: &[u64]) -> BTreeMap<Version, u64> {
        let mut m = BTreeMap::new();
        for p in prompts {
            for t in &self.groups[p].members {
                *m.entry(t.behavior_version).or_insert(0) += 1;
            }
        }
        m
    }

    /// Remove the oldest complete groups totalling `tbs` trajectories.
    pub fn try_form_batch(&mut self, tbs: usize) -> Result<Option<TrainBatch>> {
        let Some(prompts) = self.plan_batch(tbs)? else {
            return Ok(None);
        };
        let k = self.window.k();
        let mut groups = Vec::with_capacity(prompts.len());
        for p in prompts {
            let g = self.groups.remove(&p).expect("planned group exists");
            let key = self
                .ready
                .iter()
                .find(|k| k.2 == p)
                .copied()
                .expect("planned group is ready");
            self.ready.remove(&key);
            for t in &g.members {
                if self.trainer_version.saturating_sub(t.oldest_version) > k {
                    return Err(SimError::protocol(format!(
                        "trajectory {} staleness {} exceeds K={k}",
                        t.request_id,
                        self.trainer_version - t.oldest_version
                    )));
                }
                self.window.counts_mut(t.behavior_version)?.queued -= 1;
            }
            self.consumed += g.members.len() as u64;
            groups.push(g.members);
        }
        let step = self.next_step;
        self.next_step += 1;
        Ok(Some(TrainBatch { step, groups }))
    }

    /// Remove and return every queued trajectory, complete groups or not.
    pub fn drain_all(&mut self) -> Vec<TrajectoryRecord> {
        let mut out = Vec::new();
        for (_, g) in std::mem::take(&mut self.groups) {
            for t in g.members {
                if let Ok(c) = self.window.counts_mut(t.behavior_version) {
                    c.queued -= 1;
                }
                out.push(t);
            }
        }
        self.ready.clear();
        self.drained += out.len() as u64;
        out
    }

    pub fn advance_window(&mut self, new_version: Version) -> Result<AdvanceOutcome> {
        self.window.advance(new_version)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            window: self.window.versions_newest_first(),
            active: self
                .window
                .all_counts()
                .iter()
                .map(|(v, c)| (*v, c.active()))
                .collect(),
            queued: self.queued(),
            trainer_version: self.trainer_version,
        }
    }
}
