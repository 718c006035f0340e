//! Rollout-training paradigms on top of one shared cluster simulator.

mod dora;
mod one_step_off;
mod partial;
mod pool;
mod replication;
mod sync;

use std::fmt;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::simengine::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ParadigmKind {
    Synchronous,
    #[serde(alias = "one_step_off")]
    OneStepOffPolicy,
    PartialRollout,
    Dora,
    Replication,
}

impl ParadigmKind {
    pub const ALL: [ParadigmKind; 5] = [
        ParadigmKind::Synchronous,
        ParadigmKind::OneStepOffPolicy,
        ParadigmKind::PartialRollout,
        ParadigmKind::Dora,
        ParadigmKind::Replication,
    ];

    /// The four paradigms compared by default.
    pub const MAIN: [ParadigmKind; 4] = [
        ParadigmKind::Synchronous,
        ParadigmKind::OneStepOffPolicy,
        ParadigmKind::PartialRollout,
        ParadigmKind::Dora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParadigmKind::Synchronous => "synchronous",
            ParadigmKind::OneStepOffPolicy => "one_step_off_policy",
            ParadigmKind::PartialRollout => "partial_rollout",
            ParadigmKind::Dora => "dora",
            ParadigmKind::Replication => "replication",
        }
    }

    /// Rollout and training share every device and alternate in time.
    pub fn colocated(self) -> bool {
        !matches!(self, ParadigmKind::OneStepOffPolicy | ParadigmKind::Dora)
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParadigmKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synchronous" | "sync" => Ok(ParadigmKind::Synchronous),
            "one_step_off_policy" | "one_step_off" => Ok(ParadigmKind::OneStepOffPolicy),
            "partial_rollout" | "partial" => Ok(ParadigmKind::PartialRollout),
            "dora" => Ok(ParadigmKind::Dora),
            "replication" => Ok(ParadigmKind::Replication),
            _ => Err(SimError::config(format!("unknown paradigm {s:?}"))),
        }
    }
}

/// Batch sizes and knobs for one paradigm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub kind: ParadigmKind,
    pub rbs_prompts: usize,
    pub tbs_trajectories: usize,
    pub staleness_k: u32,
    pub segment_tokens: u64,
    pub oversample_factor: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub kind: ParadigmKind,
    pub trace: Trace,
    /// Re-prefilled tokens, counted when the prefill is issued.
    pub reprefill_tokens: u64,
    pub steps_completed: u64,
}

pub fn run(cfg: &RunConfig, kind: ParadigmKind) -> Result<RunOutput> {
    cfg.validate()?;
    if !kind.colocated() && cfg.cluster.n_devices < 2 * cfg.cluster.devices_per_group {
        return Err(SimError::config(format!(
            "cluster.n_devices must leave at least one group each for rollout and training ({kind})"
        )));
    }
    let sim = pool::Sim::new(cfg, kind)?;
    let out = match kind {
        ParadigmKind::Synchronous => pool::drive(sim, sync::Sync::default())?,
        ParadigmKind::OneStepOffPolicy => pool::drive(sim, one_step_off::OneStepOff::default())?,
        ParadigmKind::PartialRollout => pool::drive(sim, partial::Partial::default())?,
        ParadigmKind::Replication => pool::drive(sim, replication::Replication::default())?,
        ParadigmKind::Dora => {
            let ctl = dora::Dora::new(cfg);
            pool::drive(sim, ctl)?
        }
    };
    Ok(RunOutput {
        kind,
        reprefill_tokens: out.reprefill_tokens,
        steps_completed: out.steps_done,
        trace: out.engine.trace,
    })
}

pub fn run_synchronous(cfg: &RunConfig) -> Result<RunOutput> {
    run(cfg, ParadigmKind::Synchronous)
}

pub fn run_one_step_off(cfg: &RunConfig) -> Result<RunOutput> {
    run(cfg, ParadigmKind::OneStepOffPolicy)
}

pub fn run_partial_rollout(cfg: &RunConfig) -> Result<RunOutput> {
    run(cfg, ParadigmKind::PartialRollout)
}

pub fn run_dora(cfg: &RunConfig) -> Result<RunOutput> {
    run(cfg, ParadigmKind::Dora)
}

pub fn run_replication(cfg: &RunConfig) -> Result<RunOutput> {
    run(cfg, ParadigmKind::Replication)
}

#[cfg(test)]
pub(crate) mod testkit;
