//! One-step off-policy: rollout of batch b+1 overlaps training on batch b,
//! with rollout and training on separate devices.

use crate::error::Result;

use super::pool::{Controller, Sim};

#[derive(Debug, Default)]
pub(crate) struct OneStepOff {
    /// Trajectories of the current rollout that have finished.
    done: usize,
    /// Current rollout finished and waiting for the trainer.
    waiting: bool,
    /// Weights for the next rollout are being flashed.
    syncing: bool,
}

impl OneStepOff {
    /// Called once the current rollout is complete and the trainer is free:
    /// hand the batch to the trainer and start the next rollout with the
    /// newest weights.
    fn advance(&mut self, sim: &mut Sim) -> Result<()> {
        if !self.waiting || sim.trainer_busy || self.syncing {
            return Ok(());
        }
        self.waiting = false;
        self.done = 0;
        let v = sim.trainer_version;
        sim.try_train()?;
        if sim.groups.iter().all(|g| g.hosted_version == Some(v)) {
            sim.inject(v, sim.tbs_prompts() as u64)?;
        } else {
            self.syncing = true;
            for g in 0..sim.groups.len() {
                sim.flash_group(g, v)?;
            }
        }
        Ok(())
    }
}

impl Controller for OneStepOff {
    fn start(&mut self, sim: &mut Sim) -> Result<()> {
        sim.inject(0, sim.tbs_prompts() as u64)?;
        Ok(())
    }

    fn on_complete(&mut self, sim: &mut Sim, _req: u64) -> Result<()> {
        self.done += 1;
        if self.done == sim.tbs() {
            self.waiting = true;
            self.advance(sim)?;
        }
        Ok(())
    }

    fn on_train_done(&mut self, sim: &mut Sim, _step: u64) -> Result<()> {
        self.advance(sim)
    }

    fn on_group_ready(&mut self, sim: &mut Sim, _group: u32) -> Result<()> {
        if self.syncing && sim.groups_ready() {
            self.syncing = false;
            let v = sim.groups[0].hosted_version.unwrap_or_default();
            sim.inject(v, sim.tbs_prompts() as u64)?;
        }
        Ok(())
    }

    fn diagnose(&self) -> String {
        format!("one_step_off done={} waiting={} syncing={}", self.done, self.waiting, self.syncing)
    }
}
