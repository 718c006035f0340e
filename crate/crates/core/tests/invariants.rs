mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use dorasim::cluster::TrainTimeModel;
use dorasim::config::RunConfig;
use dorasim::grpo::group_advantage;
use dorasim::metrics::{all_bubbles, audit, overhead_fractions, step_decomposition};
use dorasim::orchestrator::compute_partition;
use dorasim::paradigms::{run, ParadigmKind};
use dorasim::simengine::{Trace, TraceEvent};
use dorasim::workload::LengthDistribution;

use common::{random_longtail, with_seed};

fn small() -> RunConfig {
    let mut cfg = random_longtail(5);
    cfg.paradigms = ParadigmKind::ALL.to_vec();
    cfg.paradigm.partial_rbs_prompts = cfg.paradigm.dora_rbs_prompts;
    cfg
}

fn last_train_done(trace: &Trace) -> f64 {
    trace
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::TrainDone { .. }))
        .map(|r| r.t)
        .fold(0.0, f64::max)
}

#[test]
fn step_times_telescope() {
    let cfg = small();
    for kind in ParadigmKind::ALL {
        let out = run(&cfg, kind).unwrap();
        let steps = step_decomposition(&out.trace).unwrap();
        assert_eq!(steps.len() as u64, cfg.stop.n_steps, "{}", kind.name());
        let total: f64 = steps.iter().map(|s| s.t_total).sum();
        let end = last_train_done(&out.trace);
        assert!((total - end).abs() <= 1e-9 * end.max(1.0), "{}: {total} vs {end}", kind.name());
        for s in &steps {
            assert!(s.t_prefill >= 0.0 && s.t_decode >= 0.0 && s.t_train >= 0.0);
            assert!(s.t_rollout_only <= s.t_total + 1e-9);
        }
    }
}

#[test]
fn sync_rollout_never_overlaps_training() {
    for seed in 0..4 {
        let cfg = with_seed("paper64", seed);
        let out = run(&cfg, ParadigmKind::Synchronous).unwrap();
        for s in step_decomposition(&out.trace).unwrap() {
            let busy = s.t_prefill + s.t_decode;
            assert!((s.t_rollout_only - busy).abs() <= 1e-6, "step {}: {s:?}", s.step);
            assert!((s.t_rollout_only + s.t_train - s.t_total).abs() <= 1e-6 * s.t_total);
        }
    }
}

#[test]
fn one_step_off_hides_short_rollouts() {
    let mut cfg = with_seed("paper64", 1);
    cfg.workload.output = LengthDistribution::point(100);
    cfg.model.train_time = TrainTimeModel::Fixed { seconds: 500.0 };
    cfg.stop.n_steps = 5;
    let out = run(&cfg, ParadigmKind::OneStepOffPolicy).unwrap();
    let steps = step_decomposition(&out.trace).unwrap();
    assert!(steps[0].t_rollout_only > 0.0);
    for s in &steps[1..] {
        assert!(s.t_rollout_only.abs() <= 1e-9, "step {}: {}", s.step, s.t_rollout_only);
    }
}

/// Busy seconds per device inside `[lo, hi]`, rebuilt from dispatch and
/// completion records.
fn busy_per_device(trace: &Trace, lo: f64, hi: f64) -> BTreeMap<u32, f64> {
    let mut open: BTreeMap<u64, (u32, f64)> = BTreeMap::new();
    let mut busy: BTreeMap<u32, f64> = BTreeMap::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::Dispatch(d) => {
                open.insert(d.request, (d.device, r.t));
            }
            TraceEvent::RequestComplete(c) => {
                let (dev, t0) = open.remove(&c.request).unwrap();
                let span = (r.t.min(hi) - t0.max(lo)).max(0.0);
                *busy.entry(dev).or_default() += span;
            }
            _ => {}
        }
    }
    busy
}

#[test]
fn sync_bubbles_account_for_idle_time() {
    let mut cfg = small();
    cfg.cluster.slots_per_device = 1;
    let out = run(&cfg, ParadigmKind::Synchronous).unwrap();
    let bubbles = all_bubbles(&out.trace).unwrap();
    assert_eq!(bubbles.len() as u64, cfg.stop.n_steps);
    for b in bubbles {
        assert_eq!(b.total_intra, 0.0, "step {}", b.step);
        let span = b.span_end - b.span_start;
        let busy = busy_per_device(&out.trace, b.span_start, b.span_end);
        let idle: f64 = b.devices.iter().map(|d| span - busy.get(&d.device).copied().unwrap_or(0.0)).sum();
        let total = b.total_intra + b.total_inter;
        assert!((idle - total).abs() <= 1e-6, "step {}: idle {idle} vs bubbles {total}", b.step);
    }
}

#[test]
fn migrations_cost_more_than_freeing_cache() {
    let cfg = with_seed("paper64", 0);
    let out = run(&cfg, ParadigmKind::Dora).unwrap();
    let moved = out
        .trace
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::MigrationDone(_)))
        .count();
    assert!(moved > 0);
    let o = overhead_fractions(&out.trace).unwrap();
    assert!(o.free_cache < o.request_transfer, "{o:?}");
}

#[test]
fn workload_is_shared_across_paradigms() {
    let cfg = small();
    let mut seen: BTreeMap<u64, (u64, u64, u64, u64)> = BTreeMap::new();
    let mut overlaps = 0;
    for kind in ParadigmKind::ALL {
        for r in run(&cfg, kind).unwrap().trace.iter() {
            if let TraceEvent::RequestComplete(c) = &r.event {
                let key = (c.prompt, c.input_tokens, c.output_tokens, c.reward.to_bits());
                if let Some(prev) = seen.insert(c.request, key) {
                    assert_eq!(prev, key, "request {} under {}", c.request, kind.name());
                    overlaps += 1;
                }
            }
        }
    }
    assert!(overlaps > 0);
}

#[test]
fn long_tail_corner_cases_finish() {
    // partial rollout with host offloads; dora whose early batches skip an unfinished version
    for (base, seed, kind) in [
        (616, 562_616, ParadigmKind::PartialRollout),
        (562, 562 * 7919, ParadigmKind::Dora),
    ] {
        let mut cfg = random_longtail(base);
        cfg.seed = seed;
        cfg.paradigm.partial_rbs_prompts = cfg.paradigm.dora_rbs_prompts;
        let out = run(&cfg, kind).unwrap();
        assert_eq!(out.steps_completed, cfg.stop.n_steps);
        let k = (kind == ParadigmKind::Dora).then_some(cfg.orchestrator.staleness_k);
        let a = audit(&out.trace).unwrap();
        assert!(a.violations(kind.name(), k).is_empty(), "{a:?}");
    }
}

fn feasible(counts: &[u64], dp: u64) -> bool {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let need: u128 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            // ceil(dp*c/total - 1), at least 1
            let num = dp as u128 * c as u128;
            (num.div_ceil(total)).saturating_sub(1).max(1)
        })
        .sum();
    need <= dp as u128
}

proptest! {
    #[test]
    fn partition_is_exact_and_proportional(
        counts in prop::collection::vec(prop_oneof![Just(0u64), 1u64..1_000_000], 1..=4),
        dp in 1u32..=64,
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let live = counts.iter().filter(|&&c| c > 0).count();
        prop_assume!(live <= dp as usize);
        let map: BTreeMap<u32, u64> = counts.iter().enumerate().map(|(v, &c)| (v as u32, c)).collect();
        let out = compute_partition(&map, dp).unwrap();
        prop_assert_eq!(out.values().sum::<u32>(), dp);
        let total: f64 = counts.iter().sum::<u64>() as f64;
        for (v, &c) in counts.iter().enumerate() {
            let n = out[&(v as u32)];
            prop_assert_eq!(n > 0, c > 0);
            if feasible(&counts, dp as u64) {
                let q = dp as f64 * c as f64 / total;
                prop_assert!((n as f64 - q).abs() <= 1.0 + 1e-9, "{:?} dp={} -> {:?}", counts, dp, out);
            }
        }
    }

    #[test]
    fn advantages_are_standardised(
        rewards in prop::collection::vec(-100.0f64..100.0, 2..32),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let a = group_advantage(&rewards, 1e-8).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-3 {
            prop_assert!((var - 1.0).abs() < 1e-9);
            let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
            let b = group_advantage(&moved, 1e-8).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_dora_runs_finish_within_bounds(seed in 1000u64..1_000_000) {
        let cfg = random_longtail(seed);
        let out = run(&cfg, ParadigmKind::Dora).unwrap();
        prop_assert_eq!(out.steps_completed, cfg.stop.n_steps);
        let a = audit(&out.trace).unwrap();
        prop_assert!(a.violations("dora", Some(cfg.orchestrator.staleness_k)).is_empty(), "{:?}", a);
        prop_assert_eq!(a.reprefill_tokens, 0);
    }

    #[test]
    fn same_seed_same_trace(seed in 0u64..1_000_000, pick in 0usize..5) {
        let mut cfg = random_longtail(seed % 1000);
        cfg.seed = seed;
        cfg.paradigm.partial_rbs_prompts = cfg.paradigm.dora_rbs_prompts;
        let kind = ParadigmKind::ALL[pick];
        let a = run(&cfg, kind).unwrap().trace;
        let b = run(&cfg, kind).unwrap().trace;
        prop_assert_eq!(a.hash(), b.hash());
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
    }
}
