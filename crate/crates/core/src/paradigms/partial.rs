//! Partial rollout: colocated iterations that end as soon as a training batch
//! is complete. Unfinished trajectories carry over and resume under the next
//! policy after re-prefilling their context. An optional per-iteration decode
//! budget bounds how far any one request runs before the batch check.

use crate::error::Result;

use super::pool::{Controller, Sim};

#[derive(Debug, Default)]
pub(crate) struct Partial;

impl Partial {
    /// Keep `rbs` prompts worth of trajectories outstanding.
    fn refill(sim: &mut Sim) -> Result<()> {
        let g = sim.group_size as u64;
        let target = sim.pcfg.rbs_prompts as u64 * g;
        let out = sim.outstanding();
        if out < target {
            sim.inject(sim.trainer_version, (target - out) / g)?;
        }
        Ok(())
    }
}

impl Controller for Partial {
    fn start(&mut self, sim: &mut Sim) -> Result<()> {
        sim.segment = Some(sim.pcfg.segment_tokens);
        Self::refill(sim)
    }

    fn on_complete(&mut self, sim: &mut Sim, _req: u64) -> Result<()> {
        if sim.trainer_busy || sim.tq.complete_groups() * sim.group_size < sim.tbs() {
            return Ok(());
        }
        sim.interrupt_rollout()?;
        sim.try_train()?;
        Ok(())
    }

    fn on_quiescent(&mut self, sim: &mut Sim) -> Result<()> {
        if sim.try_train()? {
            return Ok(());
        }
        let paused: Vec<u64> = sim.paused.iter().copied().collect();
        for id in paused {
            sim.resume_segment(id)?;
        }
        Ok(())
    }

    fn on_train_done(&mut self, sim: &mut Sim, _step: u64) -> Result<()> {
        let v = sim.trainer_version;
        let mut carried: Vec<u64> = sim.paused.iter().copied().collect();
        carried.extend(sim.offloaded_requests());
        carried.sort_unstable();
        carried.dedup();
        for &id in carried.iter().rev() {
            sim.preempt(id, v, true)?;
        }
        Self::refill(sim)
    }
}

#[cfg(test)]
mod tests {
    use crate::cluster::prefill_time;
    use crate::paradigms::testkit::{outputs, tiny};
    use crate::paradigms::{run, ParadigmKind};
    use crate::simengine::TraceEvent;

    #[test]
    fn carried_request_reprefills_its_context() {
        let mut cfg = tiny(1, 4, 1, 1);
        cfg.model.prefill_coeffs = (0.0, 1e-3, 0.0);
        cfg.paradigm.segment_tokens = 40;
        cfg.paradigm.partial_rbs_prompts = Some(2);
        outputs(&mut cfg, &[100, 30]);
        cfg.stop.n_steps = 2;
        let out = run(&cfg, ParadigmKind::PartialRollout).unwrap();
        let mut prefill_done_at = None;
        let mut dispatched_at = None;
        for r in out.trace.iter() {
            match &r.event {
                TraceEvent::Dispatch(d) if d.request == 0 && d.reprefill => {
                    // 10 input + 30 generated when the short request completed
                    assert_eq!(d.prefill_tokens, 40);
                    dispatched_at = Some(d.prefill_start);
                }
                TraceEvent::PrefillDone { request: 0, .. } if dispatched_at.is_some() => {
                    prefill_done_at.get_or_insert(r.t);
                }
                _ => {}
            }
        }
        let cost = prefill_done_at.unwrap() - dispatched_at.unwrap();
        assert!((cost - prefill_time(40, &cfg.model).unwrap()).abs() < 1e-12);
        assert!(out.reprefill_tokens >= 40);
    }

    #[test]
    fn reprefill_grows_with_steps() {
        let mut cfg = tiny(2, 8, 2, 2);
        cfg.paradigm.segment_tokens = 60;
        cfg.paradigm.partial_rbs_prompts = Some(4);
        outputs(&mut cfg, &[50, 200, 20, 400, 90, 30, 150, 70]);
        let mut last = 0;
        for steps in 1..=4 {
            cfg.stop.n_steps = steps;
            let out = run(&cfg, ParadigmKind::PartialRollout).unwrap();
            assert!(out.reprefill_tokens >= last);
            last = out.reprefill_tokens;
        }
        assert!(last > 0);
    }

    #[test]
    fn trained_members_may_span_versions() {
        let mut cfg = tiny(1, 4, 1, 1);
        cfg.paradigm.segment_tokens = 40;
        cfg.paradigm.partial_rbs_prompts = Some(2);
        outputs(&mut cfg, &[100, 30]);
        cfg.stop.n_steps = 4;
        let out = run(&cfg, ParadigmKind::PartialRollout).unwrap();
        let spans = out.trace.iter().any(|r| match &r.event {
            TraceEvent::BatchReady(b) => b.members.iter().any(|m| m.n_versions > 1),
            _ => false,
        });
        assert!(spans);
    }
}
