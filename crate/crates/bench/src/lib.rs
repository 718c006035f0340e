//! Inputs shared by the benchmarks.

use std::collections::BTreeMap;

use dorasim::config::{preset, RunConfig};
use dorasim::paradigms::ParadigmKind;
use dorasim::workload::LengthDistribution;

/// A long-tail workload small enough to simulate in a few milliseconds.
pub fn small_config() -> RunConfig {
    let mut cfg = preset("paper64").expect("preset exists");
    cfg.seed = 3;
    cfg.paradigms = vec![ParadigmKind::Dora];
    cfg.workload.group_size = 4;
    cfg.workload.tbs_prompts = 4;
    cfg.workload.input = LengthDistribution::uniform(16, 256);
    cfg.workload.output = LengthDistribution::lognormal_with_mean(400.0, 1.0, 4000);
    cfg.paradigm.dora_rbs_prompts = Some(8);
    cfg.paradigm.partial_rbs_prompts = Some(6);
    cfg.cluster.n_devices = 8;
    cfg.cluster.slots_per_device = 4;
    cfg.cluster.kv_capacity_tokens = 40_000;
    cfg.orchestrator.staleness_k = 2;
    cfg.stop.n_steps = 6;
    cfg.stop.warmup_steps = 1;
    cfg
}

/// Live request counts for `n` versions, skewed towards the newest.
pub fn version_counts(n: u32) -> BTreeMap<u32, u64> {
    (0..n).map(|v| (v, 3 + 17 * (v as u64 + 1).pow(2))).collect()
}
