//! Small configurations for unit tests.

use crate::cluster::{ClusterConfig, ModelProfile, NetworkConfig, TrainTimeModel};
use crate::config::{OrchestratorConfig, ParadigmParams, RunConfig, StopCondition, WorkloadConfig};
use crate::workload::{LengthDistribution, LengthShape, RewardModel};

use super::ParadigmKind;

/// `n_devices` x `slots` with point-mass lengths, no prefill or train cost
/// and `tau` seconds per token.
pub(crate) fn tiny(n_devices: usize, slots: usize, group_size: usize, tbs_prompts: usize) -> RunConfig {
    RunConfig {
        seed: 7,
        paradigms: vec![ParadigmKind::Synchronous],
        workload: WorkloadConfig {
            group_size,
            tbs_prompts,
            input: LengthDistribution::point(10),
            output: LengthDistribution::point(100),
            reward: RewardModel::default(),
        },
        paradigm: ParadigmParams::default(),
        cluster: ClusterConfig {
            n_devices,
            devices_per_group: 1,
            slots_per_device: slots,
            kv_capacity_tokens: 1_000_000,
            rollout_share: 0.5,
        },
        model: ModelProfile {
            prefill_coeffs: (0.0, 0.0, 0.0),
            tpot: 0.05,
            weight_sync_time: 0.0,
            train_time: TrainTimeModel::Fixed { seconds: 0.0 },
            ..ModelProfile::default()
        },
        orchestrator: OrchestratorConfig::default(),
        network: NetworkConfig::default(),
        stop: StopCondition {
            n_steps: 1,
            max_time_s: None,
            warmup_steps: 0,
        },
        output_dir: None,
    }
}

/// Output lengths handed out in request order, cycling.
pub(crate) fn outputs(cfg: &mut RunConfig, values: &[u64]) {
    let l_max = values.iter().copied().max().unwrap_or(1);
    cfg.workload.output = LengthDistribution {
        shape: LengthShape::Sequence {
            values: values.to_vec(),
        },
        l_max,
    };
}
