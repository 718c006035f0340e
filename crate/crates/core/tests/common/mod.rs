#![allow(dead_code)]

use dorasim::cluster::TrainTimeModel;
use dorasim::config::{preset, RunConfig};
use dorasim::orchestrator::StarvationPolicy;
use dorasim::paradigms::ParadigmKind;
use dorasim::workload::LengthDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random small long-tail configuration derived from `seed`. Capacity is
/// sometimes tight enough to force host offloads.
pub fn random_longtail(seed: u64) -> RunConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
    let mut cfg = preset("paper64").unwrap();
    cfg.seed = seed;
    cfg.paradigms = vec![ParadigmKind::Dora];
    let dpg = if rng.random_bool(0.3) { 2 } else { 1 };
    let groups = rng.random_range(2..=6usize);
    cfg.cluster.devices_per_group = dpg;
    cfg.cluster.n_devices = 2 * groups * dpg;
    cfg.cluster.slots_per_device = rng.random_range(2..=8);
    cfg.workload.group_size = [2, 4, 8][rng.random_range(0..3)];
    cfg.workload.tbs_prompts = rng.random_range(1..=4);
    let l_max = rng.random_range(500..=4000u64);
    let mean = rng.random_range(40.0..300.0);
    let sigma = rng.random_range(0.5..1.5);
    cfg.workload.input = LengthDistribution::uniform(8, 128);
    cfg.workload.output = LengthDistribution::lognormal_with_mean(mean, sigma, l_max);
    let need = 128 + l_max;
    cfg.cluster.kv_capacity_tokens = if rng.random_bool(0.4) {
        need + rng.random_range(0..need)
    } else {
        need * 20
    };
    cfg.paradigm.dora_rbs_prompts =
        Some(cfg.workload.tbs_prompts * rng.random_range(1..=3usize));
    cfg.orchestrator.staleness_k = 1 + (seed % 3) as u32;
    if groups < cfg.orchestrator.staleness_k as usize {
        cfg.orchestrator.starvation = StarvationPolicy::OldestFirst;
    }
    cfg.orchestrator.trigger.temporal_period = rng.random_bool(0.5).then(|| rng.random_range(5.0..60.0));
    cfg.model.tpot = 0.01;
    cfg.model.weight_sync_time = rng.random_range(0.1..2.0);
    cfg.model.train_time = TrainTimeModel::Fixed {
        seconds: rng.random_range(1.0..30.0),
    };
    cfg.stop.n_steps = rng.random_range(3..=8);
    cfg.stop.warmup_steps = 1;
    cfg.validate().unwrap();
    cfg
}

pub fn with_seed(name: &str, seed: u64) -> RunConfig {
    let mut cfg = preset(name).unwrap();
    cfg.seed = seed;
    cfg
}
