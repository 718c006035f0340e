//! Oversampling baseline: launch more prompts than a step needs, train on the
//! first TBS finished and drop the rest.

use crate::error::Result;

use super::pool::{Controller, Sim};

#[derive(Debug, Default)]
pub(crate) struct Replication;

impl Replication {
    fn launch(sim: &mut Sim) -> Result<()> {
        let v = sim.trainer_version;
        sim.inject(v, sim.pcfg.rbs_prompts as u64)?;
        Ok(())
    }
}

impl Controller for Replication {
    fn start(&mut self, sim: &mut Sim) -> Result<()> {
        Self::launch(sim)
    }

    fn on_complete(&mut self, sim: &mut Sim, _req: u64) -> Result<()> {
        if sim.trainer_busy {
            return Ok(());
        }
        let Some(batch) = sim.tq.try_form_batch(sim.tbs())? else {
            return Ok(());
        };
        for id in sim.live_ids() {
            sim.discard(id)?;
        }
        sim.discard_queued();
        sim.start_training(batch)
    }

    fn on_train_done(&mut self, sim: &mut Sim, _step: u64) -> Result<()> {
        Self::launch(sim)
    }
}
