//! Prompt batches and long-tailed output lengths.
//!
//! All randomness flows through an explicit [`SimRng`]; a `(seed, config)` pair
//! fully determines every sampled length. Output lengths are drawn once, when a
//! request is created, and stay latent: the simulator only learns a request is
//! finished when its generated token count reaches the drawn value.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Policy version identifier. Versions are consecutive integers starting at 0.
pub type Version = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthShape {
    Point {
        value: u64,
    },
    /// Inclusive integer range.
    Uniform {
        lo: u64,
        hi: u64,
    },
    /// `exp(mu + sigma * z)`, rounded and clamped to `[1, l_max]`.
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    /// `(bin upper bound, probability)` pairs with strictly increasing bounds.
    /// A sample is uniform over the integers in `(previous bound, bound]`.
    Histogram {
        bins: Vec<(u64, f64)>,
    },
    /// Explicit lengths handed out in request order, cycling.
    Sequence {
        values: Vec<u64>,
    },
    /// Unresolved reference to a two-column histogram text file.
    HistogramFile {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LengthDistribution {
    pub shape: LengthShape,
    /// Truncation bound; no sample exceeds it.
    pub l_max: u64,
}

impl LengthDistribution {
    pub fn point(value: u64) -> Self {
        Self {
            shape: LengthShape::Point { value },
            l_max: value.max(1),
        }
    }

    pub fn uniform(lo: u64, hi: u64) -> Self {
        Self {
            shape: LengthShape::Uniform { lo, hi },
            l_max: hi.max(1),
        }
    }

    pub fn lognormal(mu: f64, sigma: f64, l_max: u64) -> Self {
        Self {
            shape: LengthShape::Lognormal { mu, sigma },
            l_max,
        }
    }

    /// Lognormal whose untruncated mean is `mean`.
    pub fn lognormal_with_mean(mean: f64, sigma: f64, l_max: u64) -> Self {
        Self::lognormal(mean.ln() - 0.5 * sigma * sigma, sigma, l_max)
    }

    pub fn histogram(bins: Vec<(u64, f64)>, l_max: u64) -> Self {
        Self {
            shape: LengthShape::Histogram { bins },
            l_max,
        }
    }

    /// Replace a `histogram_file` reference with the loaded bins. Relative paths
    /// resolve against `base`.
    pub fn resolve(&mut self, base: Option<&Path>) -> Result<()> {
        if let LengthShape::HistogramFile { path } = &self.shape {
            let p = Path::new(path);
            let full = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.to_path_buf(),
            };
            let text = std::fs::read_to_string(&full).map_err(|e| {
                SimError::config(format!("histogram_file {}: {e}", full.display()))
            })?;
            self.shape = LengthShape::Histogram {
                bins: parse_histogram(&text)?,
            };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 {
            return Err(SimError::config("l_max must be >= 1"));
        }
        match &self.shape {
            LengthShape::Point { value } => {
                if *value == 0 || *value > self.l_max {
                    return Err(SimError::config(format!(
                        "point value {value} outside [1, {}]",
                        self.l_max
                    )));
                }
            }
            LengthShape::Uniform { lo, hi } => {
                if *lo == 0 || lo > hi || *hi > self.l_max {
                    return Err(SimError::config(format!(
                        "uniform range [{lo}, {hi}] invalid for l_max {}",
                        self.l_max
                    )));
                }
            }
            LengthShape::Lognormal { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma <= 0.0 {
                    return Err(SimError::config(format!(
                        "lognormal needs finite mu and sigma > 0 (got mu={mu}, sigma={sigma})"
                    )));
                }
            }
            LengthShape::Histogram { bins } => {
                if bins.is_empty() {
                    return Err(SimError::config("histogram has no bins"));
                }
                let mut prev = 0u64;
                let mut total = 0.0;
                for &(ub, w) in bins {
                    if ub <= prev {
                        return Err(SimError::config(
                            "histogram bounds must be strictly increasing and >= 1",
                        ));
                    }
                    if !(w >= 0.0) || !w.is_finite() {
                        return Err(SimError::config("histogram weights must be >= 0"));
                    }
                    prev = ub;
                    total += w;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(SimError::config(format!(
                        "histogram weights sum to {total}, expected 1"
                    )));
                }
            }
            LengthShape::Sequence { values } => {
                if values.is_empty() || values.iter().any(|&v| v == 0 || v > self.l_max) {
                    return Err(SimError::config(format!(
                        "sequence lengths must be non-empty and within [1, {}]",
                        self.l_max
                    )));
                }
            }
            LengthShape::HistogramFile { path } => {
                return Err(SimError::config(format!(
                    "histogram_file {path} was not resolved"
                )));
            }
        }
        Ok(())
    }
}

/// Parse `upper_bound probability` lines. `#` starts a comment; commas are
/// accepted as separators.
pub fn parse_histogram(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut bins = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty());
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(SimError::config(format!(
                "histogram line {}: expected two columns",
                lineno + 1
            )));
        };
        let ub: u64 = a.parse().map_err(|_| {
            SimError::config(format!("histogram line {}: bad bound {a:?}", lineno + 1))
        })?;
        let p: f64 = b.parse().map_err(|_| {
            SimError::config(format!("histogram line {}: bad probability {b:?}", lineno + 1))
        })?;
        bins.push((ub, p));
    }
    if bins.is_empty() {
        return Err(SimError::config("histogram file is empty"));
    }
    Ok(bins)
}

/// Draw one token count in `[1, l_max]`.
pub fn sample_output_length(dist: &LengthDistribution, rng: &mut SimRng) -> Result<u64> {
    dist.validate()?;
    Ok(sample_unchecked(dist, 0, rng))
}

/// `index` only matters for `Sequence`, which returns `values[index % len]`.
fn sample_unchecked(dist: &LengthDistribution, index: u64, rng: &mut SimRng) -> u64 {
    let raw = match &dist.shape {
        LengthShape::Point { value } => *value,
        LengthShape::Sequence { values } => values[(index % values.len() as u64) as usize],
        LengthShape::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
        LengthShape::Lognormal { mu, sigma } => {
            let x = LogNormal::new(*mu, *sigma)
                .expect("validated lognormal")
                .sample(rng);
            if x >= dist.l_max as f64 {
                dist.l_max
            } else {
                x.round() as u64
            }
        }
        LengthShape::Histogram { bins } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut lo = 0u64;
            // weights may sum to 1 - 1e-9; the last bin absorbs the gap
            let mut chosen = None;
            for &(ub, w) in bins {
                acc += w;
                if u < acc && w > 0.0 {
                    chosen = Some((lo, ub));
                    break;
                }
                lo = ub;
            }
            let (lo, hi) = chosen.unwrap_or_else(|| {
                let n = bins.len();
                let lo = if n >= 2 { bins[n - 2].0 } else { 0 };
                (lo, bins[n - 1].0)
            });
            rng.random_range(lo + 1..=hi)
        }
        LengthShape::HistogramFile { .. } => unreachable!("validated"),
    };
    raw.clamp(1, dist.l_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Prefilling,
    Decoding,
    Migrating,
    Offloaded,
    Complete,
    /// Abandoned by the replication baseline.
    Discarded,
}

impl RequestState {
    pub fn can_transition_to(self, next: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, next),
            (Pending, Prefilling)
                | (Pending, Discarded)
                | (Prefilling, Decoding)
                | (Prefilling, Pending)
                | (Prefilling, Discarded)
                | (Decoding, Complete)
                | (Decoding, Migrating)
                | (Decoding, Offloaded)
                | (Decoding, Pending)
                | (Decoding, Discarded)
                | (Migrating, Decoding)
                | (Migrating, Offloaded)
                | (Offloaded, Decoding)
                | (Offloaded, Migrating)
                | (Offloaded, Discarded)
                | (Offloaded, Pending)
                | (Migrating, Discarded)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RequestState::Complete | RequestState::Discarded)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub created: f64,
    pub dispatched: Option<f64>,
    pub first_token: Option<f64>,
    pub completed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub prompt_id: u64,
    pub input_tokens: u64,
    /// Latent ground truth, fixed at creation.
    pub true_output_tokens: u64,
    pub generated_tokens: u64,
    behavior_version: Option<Version>,
    /// Every version that produced tokens, in order. Length 1 unless a
    /// controller deliberately re-versions a running trajectory.
    segment_versions: Vec<Version>,
    pub state: RequestState,
    pub timestamps: Timestamps,
    pub reward: f64,
}

impl Request {
    pub fn new(request_id: u64, prompt_id: u64, input: u64, output: u64, reward: f64) -> Self {
        Self {
            request_id,
            prompt_id,
            input_tokens: input,
            true_output_tokens: output,
            generated_tokens: 0,
            behavior_version: None,
            segment_versions: Vec::new(),
            state: RequestState::Pending,
            timestamps: Timestamps::default(),
            reward,
        }
    }

    pub fn behavior_version(&self) -> Option<Version> {
        self.behavior_version
    }

    pub fn segment_versions(&self) -> &[Version] {
        &self.segment_versions
    }

    /// Tag the request with the version that will generate it. Allowed once.
    pub fn assign_version(&mut self, v: Version) -> Result<()> {
        if let Some(old) = self.behavior_version {
            return Err(SimError::protocol(format!(
                "request {} already tagged with version {old}",
                self.request_id
            )));
        }
        self.behavior_version = Some(v);
        self.segment_versions.push(v);
        Ok(())
    }

    /// Record that a later segment is generated by `v`. Only the partial-rollout
    /// controller calls this; it leaves `behavior_version` untouched.
    pub fn push_segment_version(&mut self, v: Version) {
        if self.segment_versions.last() != Some(&v) {
            self.segment_versions.push(v);
        }
    }

    pub fn transition(&mut self, next: RequestState) -> Result<()> {
        if !self.state.can_transition_to(next) {
            return Err(SimError::protocol(format!(
                "request {}: illegal transition {:?} -> {:?}",
                self.request_id, self.state, next
            )));
        }
        self.state = next;
        Ok(())
    }

    pub fn remaining_tokens(&self) -> u64 {
        self.true_output_tokens - self.generated_tokens
    }

    /// Tokens whose KV state the request currently owns.
    pub fn context_tokens(&self) -> u64 {
        self.input_tokens + self.generated_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub prompt_id: u64,
    pub group_size: usize,
    pub request_ids: Vec<u64>,
}

/// Synthetic per-trajectory reward, only consumed by the objective checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardModel {
    Bernoulli { p: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for RewardModel {
    fn default() -> Self {
        RewardModel::Bernoulli { p: 0.5 }
    }
}

impl RewardModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RewardModel::Bernoulli { p } if (0.0..=1.0).contains(&p) => Ok(()),
            RewardModel::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi => {
                Ok(())
            }
            _ => Err(SimError::config(format!("invalid reward model {self:?}"))),
        }
    }

    fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            RewardModel::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            RewardModel::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Endless, reproducible supply of prompt groups. Prompt `k` is identical for
/// every consumer given the same seed and configuration.
#[derive(Debug, Clone)]
pub struct PromptStream {
    rng: SimRng,
    input: LengthDistribution,
    output: LengthDistribution,
    reward: RewardModel,
    group_size: usize,
    next_prompt: u64,
    next_request: u64,
}

impl PromptStream {
    pub fn new(
        seed: u64,
        group_size: usize,
        input: LengthDistribution,
        output: LengthDistribution,
        reward: RewardModel,
    ) -> Result<Self> {
        if group_size == 0 {
            return Err(SimError::pre("group size must be >= 1"));
        }
        input.validate()?;
        output.validate()?;
        reward.validate()?;
        Ok(Self {
            rng: rng_from_seed(seed),
            input,
            output,
            reward,
            group_size,
            next_prompt: 0,
            next_request: 0,
        })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn prompts_issued(&self) -> u64 {
        self.next_prompt
    }

    pub fn next_group(&mut self, now: f64) -> (PromptGroup, Vec<Request>) {
        let prompt_id = self.next_prompt;
        self.next_prompt += 1;
        let input = sample_unchecked(&self.input, prompt_id, &mut self.rng);
        let mut reqs = Vec::with_capacity(self.group_size);
        for _ in 0..self.group_size {
            let out = sample_unchecked(&self.output, self.next_request, &mut self.rng);
            let reward = self.reward.sample(&mut self.rng);
            let mut r = Request::new(self.next_request, prompt_id, input, out, reward);
            r.timestamps.created = now;
            self.next_request += 1;
            reqs.push(r);
        }
        let group = PromptGroup {
            prompt_id,
            group_size: self.group_size,
            request_ids: reqs.iter().map(|r| r.request_id).collect(),
        };
        (group, reqs)
    }
}

/// Build `n_prompts * group_size` fresh requests with ids `0..`.
pub fn make_prompt_batch(
    n_prompts: usize,
    group_size: usize,
    input: &LengthDistribution,
    output: &LengthDistribution,
    rng: &mut SimRng,
) -> Result<(Vec<PromptGroup>, Vec<Request>)> {
    if n_prompts == 0 || group_size == 0 {
        return Err(SimError::pre("n_prompts and group size must be >= 1"));
    }
    input.validate()?;
    output.validate()?;
    let mut groups = Vec::with_capacity(n_prompts);
    let mut reqs = Vec::with_capacity(n_prompts * group_size);
    for p in 0..n_prompts as u64 {
        let inp = sample_unchecked(input, p, rng);
        let mut ids = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let id = reqs.len() as u64;
            let out = sample_unchecked(output, id, rng);
            reqs.push(Request::new(id, p, inp, out, 0.0));
            ids.push(id);
        }
        groups.push(PromptGroup {
            prompt_id: p,
            group_size,
            request_ids: ids,
        });
    }
    Ok((groups, reqs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_distribution_is_degenerate() {
        let d = LengthDistribution::point(100);
        for seed in 0..5 {
            let mut rng = rng_from_seed(seed);
            assert_eq!(sample_output_length(&d, &mut rng).unwrap(), 100);
        }
    }

    #[test]
    fn invalid_distributions_are_config_errors() {
        let mut rng = rng_from_seed(0);
        let bad = [
            LengthDistribution::lognormal(1.0, 0.0, 10),
            LengthDistribution::lognormal(1.0, -1.0, 10),
            LengthDistribution::histogram(vec![], 10),
            LengthDistribution::histogram(vec![(5, 0.5), (10, 0.4)], 10),
            LengthDistribution::histogram(vec![(5, 0.5), (5, 0.5)], 10),
            LengthDistribution::uniform(0, 4),
        ];
        for d in bad {
            assert!(matches!(
                sample_output_length(&d, &mut rng),
                Err(SimError::Config(_))
            ));
        }
    }

    #[test]
    fn histogram_samples_stay_in_bins() {
        let d = LengthDistribution::histogram(vec![(10, 0.25), (20, 0.75)], 20);
        let mut rng = rng_from_seed(3);
        let mut low = 0;
        for _ in 0..20_000 {
            let x = sample_output_length(&d, &mut rng).unwrap();
            assert!((1..=20).contains(&x));
            if x <= 10 {
                low += 1;
            }
        }
        let frac = low as f64 / 20_000.0;
        assert!((frac - 0.25).abs() < 0.02, "{frac}");
    }

    #[test]
    fn histogram_text_parses() {
        let bins = parse_histogram("# ub p\n100 0.5\n200, 0.5\n").unwrap();
        assert_eq!(bins, vec![(100, 0.5), (200, 0.5)]);
        assert!(parse_histogram("100\n").is_err());
        assert!(parse_histogram("").is_err());
    }

    #[test]
    fn small_batch_shape() {
        let mut rng = rng_from_seed(1);
        let (groups, reqs) = make_prompt_batch(
            2,
            4,
            &LengthDistribution::point(512),
            &LengthDistribution::point(100),
            &mut rng,
        )
        .unwrap();
        assert_eq!(reqs.len(), 8);
        assert_eq!(groups.len(), 2);
        assert!(groups.iter().all(|g| g.request_ids.len() == 4));
        assert!(reqs
            .iter()
            .all(|r| r.input_tokens == 512 && r.true_output_tokens == 100));
        assert!(reqs.windows(2).all(|w| w[0].request_id < w[1].request_id));
        assert!(reqs.iter().all(|r| r.behavior_version().is_none()));
    }

    #[test]
    fn paper_scale_batch_has_8192_requests() {
        let mut rng = rng_from_seed(1);
        let (_, reqs) = make_prompt_batch(
            512,
            16,
            &LengthDistribution::uniform(64, 2048),
            &LengthDistribution::lognormal_with_mean(2400.0, 1.0, 30_000),
            &mut rng,
        )
        .unwrap();
        assert_eq!(reqs.len(), 8192);
    }

    #[test]
    fn same_seed_same_batch() {
        let mk = || {
            let mut rng = rng_from_seed(42);
            let (_, reqs) = make_prompt_batch(
                16,
                4,
                &LengthDistribution::uniform(10, 100),
                &LengthDistribution::lognormal(6.0, 1.0, 5000),
                &mut rng,
            )
            .unwrap();
            serde_json::to_vec(&reqs).unwrap()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn version_is_assigned_once() {
        let mut r = Request::new(0, 0, 10, 10, 0.0);
        r.assign_version(3).unwrap();
        assert!(r.assign_version(4).is_err());
        assert_eq!(r.behavior_version(), Some(3));
    }

    #[test]
    fn transitions_cannot_skip_prefill() {
        let mut r = Request::new(0, 0, 10, 10, 0.0);
        assert!(r.transition(RequestState::Decoding).is_err());
        r.transition(RequestState::Prefilling).unwrap();
        r.transition(RequestState::Decoding).unwrap();
        r.transition(RequestState::Migrating).unwrap();
        r.transition(RequestState::Decoding).unwrap();
        r.transition(RequestState::Complete).unwrap();
        assert!(r.transition(RequestState::Decoding).is_err());
    }
}
