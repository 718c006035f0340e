//! Run configuration, validation and the built-in presets.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, ModelProfile, NetworkConfig, TrainTimeModel};
use crate::error::{Result, SimError};
use crate::orchestrator::{StarvationPolicy, TriggerPolicy};
use crate::paradigms::{ParadigmConfig, ParadigmKind};
use crate::workload::{LengthDistribution, RewardModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Responses sampled per prompt (G).
    pub group_size: usize,
    /// Prompts consumed by one training step; TBS = tbs_prompts * G.
    pub tbs_prompts: usize,
    pub input: LengthDistribution,
    pub output: LengthDistribution,
    #[serde(default)]
    pub reward: RewardModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ParadigmParams {
    /// DORA rollout batch in prompts; defaults to twice the train batch.
    pub dora_rbs_prompts: Option<usize>,
    /// Partial-rollout outstanding prompts; defaults to the train batch.
    pub partial_rbs_prompts: Option<usize>,
    /// Decode budget per partial-rollout iteration.
    pub segment_tokens: u64,
    /// Replication baseline: rollout batch = factor * train batch.
    pub oversample_factor: f64,
}

impl Default for ParadigmParams {
    fn default() -> Self {
        Self {
            dora_rbs_prompts: None,
            partial_rbs_prompts: None,
            segment_tokens: 4096,
            oversample_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    LargestRemainder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorConfig {
    /// Maximum version gap between trainer and any trained trajectory.
    pub staleness_k: u32,
    pub trigger: TriggerPolicy,
    pub rounding: Rounding,
    pub starvation: StarvationPolicy,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            staleness_k: 1,
            trigger: TriggerPolicy::default(),
            rounding: Rounding::LargestRemainder,
            starvation: StarvationPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    /// Stop after this many training steps.
    pub n_steps: u64,
    /// Abort if the virtual clock passes this many seconds.
    #[serde(default)]
    pub max_time_s: Option<f64>,
    /// Leading steps left out of mean step time.
    #[serde(default)]
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_paradigms")]
    pub paradigms: Vec<ParadigmKind>,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub paradigm: ParadigmParams,
    pub cluster: ClusterConfig,
    pub model: ModelProfile,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    pub stop: StopCondition,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_paradigms() -> Vec<ParadigmKind> {
    ParadigmKind::MAIN.to_vec()
}

impl RunConfig {
    /// Parse JSON. Errors name the dotted path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                SimError::config(e.into_inner().to_string())
            } else {
                SimError::config(format!("{path}: {}", e.into_inner()))
            }
        })
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            SimError::config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// JSON Schema of the config file format.
    pub fn json_schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
    }

    /// Read, resolve relative histogram files and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: Option<&Path>) -> Result<()> {
        self.workload.input.resolve(base)?;
        self.workload.output.resolve(base)
    }

    pub fn tbs_trajectories(&self) -> usize {
        self.workload.tbs_prompts * self.workload.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.workload;
        if w.group_size == 0 {
            return Err(SimError::config("workload.group_size must be >= 1"));
        }
        if w.tbs_prompts == 0 {
            return Err(SimError::config("workload.tbs_prompts must be >= 1"));
        }
        w.input
            .validate()
            .map_err(|e| SimError::config(format!("workload.input: {e}")))?;
        w.output
            .validate()
            .map_err(|e| SimError::config(format!("workload.output: {e}")))?;
        w.reward.validate()?;
        self.cluster.validate()?;
        self.model.validate()?;
        self.network.validate()?;
        self.orchestrator.trigger.validate()?;
        if self.orchestrator.staleness_k == 0 {
            return Err(SimError::config("orchestrator.staleness_k must be >= 1"));
        }
        let longest = w.input.l_max + w.output.l_max;
        if self.cluster.kv_capacity_tokens < longest {
            return Err(SimError::config(format!(
                "cluster.kv_capacity_tokens {} cannot hold one maximal request ({longest} tokens)",
                self.cluster.kv_capacity_tokens
            )));
        }
        if self.paradigm.segment_tokens == 0 {
            return Err(SimError::config("paradigm.segment_tokens must be >= 1"));
        }
        if !(self.paradigm.oversample_factor >= 1.0 && self.paradigm.oversample_factor.is_finite()) {
            return Err(SimError::config("paradigm.oversample_factor must be >= 1"));
        }
        for (key, v) in [
            ("paradigm.dora_rbs_prompts", self.paradigm.dora_rbs_prompts),
            ("paradigm.partial_rbs_prompts", self.paradigm.partial_rbs_prompts),
        ] {
            if let Some(n) = v {
                if n < w.tbs_prompts {
                    return Err(SimError::config(format!(
                        "{key} ({n}) must be >= workload.tbs_prompts ({})",
                        w.tbs_prompts
                    )));
                }
            }
        }
        if self.stop.n_steps == 0 {
            return Err(SimError::config("stop.n_steps must be >= 1"));
        }
        if self.stop.warmup_steps >= self.stop.n_steps {
            return Err(SimError::config("stop.warmup_steps must be below stop.n_steps"));
        }
        if let Some(t) = self.stop.max_time_s {
            if !(t > 0.0) {
                return Err(SimError::config("stop.max_time_s must be > 0"));
            }
        }
        if self.paradigms.contains(&ParadigmKind::Dora)
            && self.orchestrator.starvation == StarvationPolicy::Reject
            && self.cluster.n_devices >= 2
        {
            let groups = self.cluster.disaggregated_split().0 / self.cluster.devices_per_group;
            if groups < self.orchestrator.staleness_k as usize {
                return Err(SimError::config(format!(
                    "orchestrator.staleness_k ({}) exceeds the {groups} rollout DP groups; \
                     use orchestrator.starvation = \"oldest_first\" or lower K",
                    self.orchestrator.staleness_k
                )));
            }
        }
        if self.paradigms.is_empty() {
            return Err(SimError::config("paradigms must not be empty"));
        }
        if self.cluster.n_devices < 2
            && self.paradigms.iter().any(|p| !p.colocated())
        {
            return Err(SimError::config(
                "cluster.n_devices must be >= 2 for disaggregated paradigms",
            ));
        }
        Ok(())
    }

    pub fn paradigm_config(&self, kind: ParadigmKind) -> ParadigmConfig {
        let tbs = self.workload.tbs_prompts;
        let rbs_prompts = match kind {
            ParadigmKind::Synchronous | ParadigmKind::OneStepOffPolicy => tbs,
            ParadigmKind::PartialRollout => self.paradigm.partial_rbs_prompts.unwrap_or(tbs),
            ParadigmKind::Dora => self.paradigm.dora_rbs_prompts.unwrap_or(2 * tbs),
            ParadigmKind::Replication => {
                (tbs as f64 * self.paradigm.oversample_factor).round() as usize
            }
        };
        ParadigmConfig {
            kind,
            rbs_prompts,
            tbs_trajectories: self.tbs_trajectories(),
            staleness_k: self.orchestrator.staleness_k,
            segment_tokens: self.paradigm.segment_tokens,
            oversample_factor: self.paradigm.oversample_factor,
        }
    }

    /// Apply a `dotted.key=value` override. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn set_param(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SimError::config(format!("override {assignment:?} needs key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| SimError::config(format!("{key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let updated = Self::from_value(tree)?;
        *self = updated;
        Ok(())
    }
}

pub const PRESETS: [&str; 2] = ["paper64", "paper128"];

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "paper64" => Ok(paper(64)),
        "paper128" => Ok(paper(128)),
        _ => Err(SimError::config(format!(
            "unknown preset {name:?}; known: {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Long-tail reasoning workload: 512 prompts x 16 responses per step, prompts
/// up to 2K tokens and responses up to 30K with a lognormal tail.
fn paper(n_devices: usize) -> RunConfig {
    RunConfig {
        seed: 0,
        paradigms: default_paradigms(),
        workload: WorkloadConfig {
            group_size: 16,
            tbs_prompts: 512,
            input: LengthDistribution::uniform(128, 2048),
            output: LengthDistribution::lognormal_with_mean(2400.0, 1.0, 30_000),
            reward: RewardModel::default(),
        },
        paradigm: ParadigmParams {
            dora_rbs_prompts: Some(1024),
            partial_rbs_prompts: Some(640),
            segment_tokens: 30_000,
            oversample_factor: 2.0,
        },
        cluster: ClusterConfig {
            n_devices,
            devices_per_group: 1,
            slots_per_device: 128,
            kv_capacity_tokens: 1_500_000,
            rollout_share: 0.5,
        },
        model: ModelProfile {
            layers: 32,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            prefill_coeffs: (0.01, 1e-4, 1e-9),
            tpot: 0.03,
            prefill_inflation: 1.0,
            weight_sync_time: 3.0,
            train_time: TrainTimeModel::PerToken {
                fixed_s: 300.0,
                device_s_per_mtok: 400.0,
            },
        },
        orchestrator: OrchestratorConfig {
            staleness_k: 3,
            trigger: TriggerPolicy {
                update_driven: true,
                kv_utilization_threshold: Some(0.9),
                temporal_period: Some(120.0),
            },
            rounding: Rounding::LargestRemainder,
            starvation: StarvationPolicy::Reject,
        },
        network: NetworkConfig::default(),
        stop: StopCondition {
            n_steps: 6,
            max_time_s: None,
            warmup_steps: 1,
        },
        output_dir: None,
    }
}
