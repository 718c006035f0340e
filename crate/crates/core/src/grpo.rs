//! Group-relative policy optimisation objective over explicit per-token
//! log-probabilities, plus a toy categorical policy for gradient checks.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::{SimRng, Version};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLogProbs {
    pub prompt_id: u64,
    pub tokens: Vec<u32>,
    pub logp_behavior: Vec<f64>,
    pub logp_current: Vec<f64>,
    pub behavior_version: Version,
    pub reward: f64,
}

impl TrajectoryLogProbs {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.len();
        if l == 0 {
            return Err(SimError::pre("trajectory has zero tokens"));
        }
        if self.logp_behavior.len() != l || self.logp_current.len() != l {
            return Err(SimError::pre(format!(
                "log-prob arrays have lengths {}/{} for {l} tokens",
                self.logp_behavior.len(),
                self.logp_current.len()
            )));
        }
        if self
            .logp_behavior
            .iter()
            .chain(&self.logp_current)
            .any(|&x| !(x <= 0.0))
        {
            return Err(SimError::Numeric("log-probabilities must be <= 0".into()));
        }
        Ok(())
    }

    /// Per-token importance ratios against the behavior policy.
    pub fn ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.logp_current
            .iter()
            .zip(&self.logp_behavior)
            .map(|(c, b)| (c - b).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_eps: f64,
    pub group_size: usize,
    pub std_floor: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            group_size: 16,
            std_floor: 1e-8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(SimError::config("clip_eps must be in (0,1)"));
        }
        if !(self.std_floor > 0.0) {
            return Err(SimError::config("std_floor must be > 0"));
        }
        if self.group_size < 2 {
            return Err(SimError::config("group_size must be >= 2"));
        }
        Ok(())
    }
}

/// Group-normalised advantages with population standard deviation.
pub fn group_advantage(rewards: &[f64], floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(SimError::pre("group advantage needs at least two rewards"));
    }
    let n = rewards.len() as f64;
    // shifted by the first reward so equal rewards give exactly zero
    let x0 = rewards[0];
    let mean = x0 + rewards.iter().map(|r| r - x0).sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// d clipped_term / d ratio.
fn clipped_term_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

fn check_batch(batch: &[Vec<TrajectoryLogProbs>], cfg: &ObjectiveConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(SimError::pre("empty batch"));
    }
    for group in batch {
        if group.len() != cfg.group_size {
            return Err(SimError::pre(format!(
                "prompt group has {} trajectories, expected {}",
                group.len(),
                cfg.group_size
            )));
        }
        for t in group {
            t.validate()?;
        }
    }
    Ok(())
}

/// Multi-version objective: the mean over prompts of
/// `(1/G) Σ_i (1/L_i) Σ_t min(r·A, clip(r)·A)`, where each trajectory's ratio
/// is taken against the version that produced it. Prompts weigh equally.
pub fn objective_async(batch: &[Vec<TrajectoryLogProbs>], cfg: &ObjectiveConfig) -> Result<f64> {
    check_batch(batch, cfg)?;
    let mut total = 0.0;
    for group in batch {
        let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
        let adv = group_advantage(&rewards, cfg.std_floor)?;
        let mut inner = 0.0;
        for (t, a) in group.iter().zip(&adv) {
            let s: f64 = t.ratios().map(|r| clipped_term(r, *a, cfg.clip_eps)).sum();
            inner += s / t.len() as f64;
        }
        total += inner / cfg.group_size as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Single-version objective. Every trajectory must share one behavior version.
pub fn objective_sync(batch: &[Vec<TrajectoryLogProbs>], cfg: &ObjectiveConfig) -> Result<f64> {
    check_batch(batch, cfg)?;
    let v0 = batch[0][0].behavior_version;
    if batch.iter().flatten().any(|t| t.behavior_version != v0) {
        return Err(SimError::pre("objective_sync needs a single-version batch"));
    }
    let g = cfg.group_size as f64;
    let per_prompt: Vec<f64> = batch
        .iter()
        .map(|group| {
            let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
            let adv = group_advantage(&rewards, cfg.std_floor)?;
            Ok(group
                .iter()
                .zip(adv)
                .map(|(t, a)| {
                    t.ratios()
                        .map(|r| clipped_term(r, a, cfg.clip_eps))
                        .sum::<f64>()
                        / t.len() as f64
                })
                .sum::<f64>()
                / g)
        })
        .collect::<Result<_>>()?;
    Ok(per_prompt.iter().sum::<f64>() / per_prompt.len() as f64)
}

/// Group trajectories by prompt, keeping first-appearance order.
pub fn group_by_prompt(trajs: Vec<TrajectoryLogProbs>) -> Vec<Vec<TrajectoryLogProbs>> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: std::collections::HashMap<u64, Vec<TrajectoryLogProbs>> = Default::default();
    for t in trajs {
        if !groups.contains_key(&t.prompt_id) {
            order.push(t.prompt_id);
        }
        groups.entry(t.prompt_id).or_default().push(t);
    }
    order
        .into_iter()
        .map(|p| groups.remove(&p).expect("seen prompt"))
        .collect()
}

pub fn write_jsonl<W: Write>(batch: &[Vec<TrajectoryLogProbs>], mut w: W) -> Result<()> {
    for t in batch.iter().flatten() {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Vec<TrajectoryLogProbs>>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(group_by_prompt(out))
}

pub const TOY_MAX_LEN: usize = 16;
pub const TOY_MAX_VOCAB: usize = 16;

/// Position-dependent categorical policy: token `t` of every trajectory is
/// drawn from `softmax(theta[t])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(theta: Vec<Vec<f64>>) -> Result<Self> {
        let l = theta.len();
        let v = theta.first().map_or(0, Vec::len);
        if l == 0 || l > TOY_MAX_LEN || v < 2 || v > TOY_MAX_VOCAB {
            return Err(SimError::config(format!(
                "toy policy must have 1..={TOY_MAX_LEN} positions and 2..={TOY_MAX_VOCAB} tokens, got {l}x{v}"
            )));
        }
        if theta.iter().any(|row| row.len() != v) {
            return Err(SimError::config("toy policy rows differ in width"));
        }
        if theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SimError::Numeric("toy policy parameters must be finite".into()));
        }
        Ok(Self { theta })
    }

    pub fn random(max_len: usize, vocab: usize, scale: f64, rng: &mut SimRng) -> Result<Self> {
        let theta = (0..max_len)
            .map(|_| {
                (0..vocab)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Self::new(theta)
    }

    pub fn max_len(&self) -> usize {
        self.theta.len()
    }

    pub fn vocab(&self) -> usize {
        self.theta[0].len()
    }

    pub fn n_params(&self) -> usize {
        self.max_len() * self.vocab()
    }

    pub fn probs(&self, pos: usize) -> Vec<f64> {
        let row = &self.theta[pos];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn logp(&self, pos: usize, token: u32) -> f64 {
        let row = &self.theta[pos];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row[token as usize] - lse
    }

    pub fn logps(&self, tokens: &[u32]) -> Vec<f64> {
        tokens.iter().enumerate().map(|(p, &y)| self.logp(p, y)).collect()
    }

    pub fn sample(&self, len: usize, rng: &mut SimRng) -> Vec<u32> {
        (0..len)
            .map(|pos| {
                let p = self.probs(pos);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        return k as u32;
                    }
                }
                (p.len() - 1) as u32
            })
            .collect()
    }

    pub fn param(&self, i: usize) -> f64 {
        self.theta[i / self.vocab()][i % self.vocab()]
    }

    pub fn set_param(&mut self, i: usize, x: f64) {
        let v = self.vocab();
        self.theta[i / v][i % v] = x;
    }

    /// Plain gradient ascent step.
    pub fn ascend(&mut self, grad: &[f64], lr: f64) {
        for (i, g) in grad.iter().enumerate() {
            let x = self.param(i) + lr * g;
            self.set_param(i, x);
        }
    }
}

/// Recompute `logp_current` of every trajectory under `policy`.
pub fn rescore(batch: &mut [Vec<TrajectoryLogProbs>], policy: &ToyPolicy) {
    for t in batch.iter_mut().flatten() {
        t.logp_current = policy.logps(&t.tokens);
    }
}

/// Sample a batch where each trajectory comes from one of `behaviors`
/// (version = index) and is scored under `current`.
pub fn sample_batch(
    current: &ToyPolicy,
    behaviors: &[ToyPolicy],
    n_prompts: usize,
    group_size: usize,
    rng: &mut SimRng,
) -> Vec<Vec<TrajectoryLogProbs>> {
    (0..n_prompts)
        .map(|p| {
            (0..group_size)
                .map(|_| {
                    let v = rng.random_range(0..behaviors.len());
                    let b = &behaviors[v];
                    let len = rng.random_range(1..=b.max_len().min(current.max_len()));
                    let tokens = b.sample(len, rng);
                    TrajectoryLogProbs {
                        prompt_id: p as u64,
                        logp_behavior: b.logps(&tokens),
                        logp_current: current.logps(&tokens),
                        tokens,
                        behavior_version: v as Version,
                        reward: rng.random::<f64>(),
                    }
                })
                .collect()
        })
        .collect()
}

pub fn objective_toy(
    policy: &ToyPolicy,
    batch: &[Vec<TrajectoryLogProbs>],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let mut b = batch.to_vec();
    rescore(&mut b, policy);
    objective_async(&b, cfg)
}

/// Analytic gradient of the objective with respect to `policy.theta`,
/// flattened row-major.
pub fn gradient(
    policy: &ToyPolicy,
    batch: &[Vec<TrajectoryLogProbs>],
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    check_batch(batch, cfg)?;
    let v = policy.vocab();
    let mut grad = vec![0.0; policy.n_params()];
    let norm = 1.0 / (batch.len() as f64 * cfg.group_size as f64);
    for group in batch {
        let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
        let adv = group_advantage(&rewards, cfg.std_floor)?;
        for (t, a) in group.iter().zip(&adv) {
            let w = norm / t.len() as f64;
            for (pos, (&y, lb)) in t.tokens.iter().zip(&t.logp_behavior).enumerate() {
                let r = (policy.logp(pos, y) - lb).exp();
                // d term / d logp = slope * r
                let c = w * clipped_term_slope(r, *a, cfg.clip_eps) * r;
                if c == 0.0 {
                    continue;
                }
                let probs = policy.probs(pos);
                for (k, pk) in probs.iter().enumerate() {
                    let ind = if k as u32 == y { 1.0 } else { 0.0 };
                    grad[pos * v + k] += c * (ind - pk);
                }
            }
        }
    }
    Ok(grad)
}

/// Max relative error between the analytic gradient and central finite
/// differences (step `h`) over the first `max_params` parameters.
pub fn grad_check(
    policy: &ToyPolicy,
    batch: &[Vec<TrajectoryLogProbs>],
    cfg: &ObjectiveConfig,
    h: f64,
    max_params: usize,
) -> Result<f64> {
    let analytic = gradient(policy, batch, cfg)?;
    let mut p = policy.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate().take(max_params) {
        let x = p.param(i);
        p.set_param(i, x + h);
        let up = objective_toy(&p, batch, cfg)?;
        p.set_param(i, x - h);
        let down = objective_toy(&p, batch, cfg)?;
        p.set_param(i, x);
        let n = (up - down) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
