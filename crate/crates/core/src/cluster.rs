//! Rollout devices, DP groups and the cost model.
//!
//! Per-device concurrency is called `slots` (C) throughout; `K` is reserved for
//! the staleness bound.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::Version;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainTimeModel {
    /// Constant seconds per step regardless of batch or device count.
    Fixed { seconds: f64 },
    /// `fixed_s + device_s_per_mtok * (tokens / 1e6) / n_train_devices`.
    PerToken { fixed_s: f64, device_s_per_mtok: f64 },
}

impl TrainTimeModel {
    pub fn train_time(&self, tokens: u64, n_devices: usize) -> f64 {
        match *self {
            TrainTimeModel::Fixed { seconds } => seconds,
            TrainTimeModel::PerToken {
                fixed_s,
                device_s_per_mtok,
            } => fixed_s + device_s_per_mtok * (tokens as f64 / 1e6) / n_devices.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub layers: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub dtype_bytes: u64,
    /// `(a0, a1, a2)`: seconds, seconds/token, seconds/token^2.
    pub prefill_coeffs: (f64, f64, f64),
    /// Time per output token, seconds.
    pub tpot: f64,
    /// Multiplier >= 1 standing in for expert-parallel imbalance on prefill.
    pub prefill_inflation: f64,
    pub weight_sync_time: f64,
    pub train_time: TrainTimeModel,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            layers: 32,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            prefill_coeffs: (0.0, 1e-4, 0.0),
            tpot: 0.05,
            prefill_inflation: 1.0,
            weight_sync_time: 0.0,
            train_time: TrainTimeModel::Fixed { seconds: 0.0 },
        }
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1, a2) = self.prefill_coeffs;
        if !(self.tpot > 0.0) || !self.tpot.is_finite() {
            return Err(SimError::config("model.tpot must be > 0"));
        }
        if !(a0 >= 0.0 && a1 >= 0.0 && a2 >= 0.0) {
            return Err(SimError::config("model.prefill_coeffs must be >= 0"));
        }
        if !(self.prefill_inflation >= 1.0) {
            return Err(SimError::config("model.prefill_inflation must be >= 1"));
        }
        if !(self.weight_sync_time >= 0.0) {
            return Err(SimError::config("model.weight_sync_time must be >= 0"));
        }
        let ok = match self.train_time {
            TrainTimeModel::Fixed { seconds } => seconds >= 0.0,
            TrainTimeModel::PerToken {
                fixed_s,
                device_s_per_mtok,
            } => fixed_s >= 0.0 && device_s_per_mtok >= 0.0,
        };
        if !ok {
            return Err(SimError::config("model.train_time must be >= 0"));
        }
        Ok(())
    }

    /// Bytes of KV state per token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.layers * self.kv_heads * self.head_dim * self.dtype_bytes
    }
}

pub fn prefill_time(tokens: u64, profile: &ModelProfile) -> Result<f64> {
    if tokens == 0 {
        return Err(SimError::pre("prefill of zero tokens"));
    }
    Ok(prefill_time_unchecked(tokens, profile))
}

pub(crate) fn prefill_time_unchecked(tokens: u64, profile: &ModelProfile) -> f64 {
    let (a0, a1, a2) = profile.prefill_coeffs;
    let t = tokens as f64;
    profile.prefill_inflation * (a0 + a1 * t + a2 * t * t)
}

pub fn decode_time(tokens: u64, profile: &ModelProfile) -> f64 {
    profile.tpot * tokens as f64
}

pub fn kv_bytes(tokens: u64, profile: &ModelProfile) -> u64 {
    profile.kv_bytes_per_token() * tokens
}

pub fn transfer_time(bytes: u64, bandwidth_bytes_per_s: f64, latency_s: f64) -> f64 {
    latency_s + bytes as f64 / bandwidth_bytes_per_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Inter-instance bandwidth used for KV migration.
    pub bandwidth_bytes_per_s: f64,
    pub latency_s: f64,
    /// Host <-> device link used for offload.
    pub pcie_bandwidth_bytes_per_s: f64,
    pub pcie_latency_s: f64,
    /// Size of one request's control-plane record.
    pub metadata_bytes: u64,
    /// Cost of releasing one KV entry on the source after it has moved.
    pub free_cache_s_per_entry: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_s: 50e9,
            latency_s: 1e-4,
            pcie_bandwidth_bytes_per_s: 25e9,
            pcie_latency_s: 1e-5,
            metadata_bytes: 1024,
            free_cache_s_per_entry: 1e-6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bytes_per_s > 0.0 && self.pcie_bandwidth_bytes_per_s > 0.0) {
            return Err(SimError::config("network bandwidths must be > 0"));
        }
        if !(self.latency_s >= 0.0 && self.pcie_latency_s >= 0.0) {
            return Err(SimError::config("network latencies must be >= 0"));
        }
        if !(self.free_cache_s_per_entry >= 0.0) {
            return Err(SimError::config(
                "network.free_cache_s_per_entry must be >= 0",
            ));
        }
        // freeing an entry must stay cheaper than shipping its metadata
        if self.free_cache_s_per_entry
            >= transfer_time(self.metadata_bytes, self.bandwidth_bytes_per_s, self.latency_s)
        {
            return Err(SimError::config(
                "network.free_cache_s_per_entry must be below the metadata RPC time",
            ));
        }
        Ok(())
    }

    pub fn metadata_time(&self) -> f64 {
        transfer_time(self.metadata_bytes, self.bandwidth_bytes_per_s, self.latency_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_devices: usize,
    pub devices_per_group: usize,
    /// Concurrent requests per device (C).
    pub slots_per_device: usize,
    pub kv_capacity_tokens: u64,
    /// Fraction of devices given to rollout in disaggregated paradigms.
    pub rollout_share: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_devices: 2,
            devices_per_group: 1,
            slots_per_device: 1,
            kv_capacity_tokens: u64::MAX / 4,
            rollout_share: 0.5,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 || self.devices_per_group == 0 || self.slots_per_device == 0 {
            return Err(SimError::config(
                "cluster.n_devices, devices_per_group and slots_per_device must be >= 1",
            ));
        }
        if self.n_devices % self.devices_per_group != 0 {
            return Err(SimError::config(
                "cluster.n_devices must be a multiple of devices_per_group",
            ));
        }
        if self.kv_capacity_tokens == 0 {
            return Err(SimError::config("cluster.kv_capacity_tokens must be >= 1"));
        }
        if !(self.rollout_share > 0.0 && self.rollout_share < 1.0) {
            return Err(SimError::config("cluster.rollout_share must be in (0, 1)"));
        }
        if self.n_devices >= 2 {
            let (r, t) = self.disaggregated_split();
            if r == 0 || t == 0 {
                return Err(SimError::config(
                    "cluster.rollout_share leaves no rollout or no train devices",
                ));
            }
        }
        Ok(())
    }

    /// `(rollout devices, train devices)`, rollout rounded to whole DP groups.
    pub fn disaggregated_split(&self) -> (usize, usize) {
        let groups = self.n_devices / self.devices_per_group;
        let rollout_groups = ((groups as f64 * self.rollout_share).round() as usize)
            .clamp(1, groups.saturating_sub(1).max(1));
        let r = rollout_groups * self.devices_per_group;
        (r, self.n_devices.saturating_sub(r))
    }
}

/// One accelerator's rollout state.
#[derive(Debug, Clone)]
pub struct Device {
    pub device_id: u32,
    pub dp_group_id: u32,
    /// `slots[i]` holds the request occupying slot `i`.
    pub slots: Vec<Option<u64>>,
    pub kv_capacity_tokens: u64,
    /// Prefill is compute-bound and runs one request at a time per device.
    pub prefill_free_at: f64,
}

impl Device {
    pub fn new(device_id: u32, dp_group_id: u32, slots: usize, kv_capacity_tokens: u64) -> Self {
        Self {
            device_id,
            dp_group_id,
            slots: vec![None; slots],
            kv_capacity_tokens,
            prefill_free_at: 0.0,
        }
    }

    pub fn active_requests(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn active_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn free_slot(&self) -> Option<usize> {
        self.slots.iter().position(|s| s.is_none())
    }

    pub fn free_slots(&self) -> usize {
        self.slots.len() - self.active_count()
    }
}

#[derive(Debug, Clone)]
pub struct DpGroup {
    pub dp_group_id: u32,
    pub device_ids: Vec<u32>,
    pub hosted_version: Option<Version>,
    /// Weights are being flashed until this instant; no generation before it.
    pub busy_until: f64,
}
