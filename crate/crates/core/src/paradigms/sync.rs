//! Synchronous on-policy RL: roll out a full batch, train, repeat.

use crate::error::Result;

use super::pool::{Controller, Sim};

#[derive(Debug, Default)]
pub(crate) struct Sync;

impl Controller for Sync {
    fn start(&mut self, sim: &mut Sim) -> Result<()> {
        sim.inject(0, sim.tbs_prompts() as u64)?;
        Ok(())
    }

    fn on_complete(&mut self, sim: &mut Sim, _req: u64) -> Result<()> {
        sim.try_train()?;
        Ok(())
    }

    fn on_train_done(&mut self, sim: &mut Sim, _step: u64) -> Result<()> {
        sim.inject(sim.trainer_version, sim.tbs_prompts() as u64)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::paradigms::testkit::{outputs, tiny};
    use crate::paradigms::{run, ParadigmKind};
    use crate::simengine::TraceEvent;

    #[test]
    fn two_devices_step_time_is_the_longest_request() {
        let mut cfg = tiny(2, 1, 2, 1);
        outputs(&mut cfg, &[100, 500]);
        let out = run(&cfg, ParadigmKind::Synchronous).unwrap();
        let done: Vec<f64> = out
            .trace
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::TrainDone { .. }))
            .map(|r| r.t)
            .collect();
        assert_eq!(done.len(), 1);
        assert!((done[0] - 25.0).abs() < 1e-9, "{done:?}");
    }

    #[test]
    fn single_request_event_sequence() {
        let cfg = tiny(1, 1, 1, 1);
        let out = run(&cfg, ParadigmKind::Synchronous).unwrap();
        let kinds: Vec<&str> = out.trace.iter().map(|r| r.event.kind()).collect();
        let count = |k: &str| kinds.iter().filter(|x| **x == k).count();
        for k in ["dispatch", "prefill_done", "request_complete", "batch_ready", "train_done"] {
            assert_eq!(count(k), 1, "{k} in {kinds:?}");
        }
        let pos = |k: &str| kinds.iter().position(|x| *x == k).unwrap();
        assert!(pos("dispatch") < pos("prefill_done"));
        assert!(pos("prefill_done") < pos("request_complete"));
        assert!(pos("request_complete") < pos("batch_ready"));
        assert!(pos("batch_ready") < pos("train_done"));
    }

    #[test]
    fn later_steps_use_the_new_version() {
        let mut cfg = tiny(2, 2, 2, 2);
        cfg.stop.n_steps = 3;
        let out = run(&cfg, ParadigmKind::Synchronous).unwrap();
        let mut step = 0;
        for r in out.trace.iter() {
            if let TraceEvent::BatchReady(b) = &r.event {
                assert_eq!(b.trainer_version, step);
                assert!(b.members.iter().all(|m| m.version == step));
                step += 1;
            }
        }
        assert_eq!(step, 3);
    }
}
