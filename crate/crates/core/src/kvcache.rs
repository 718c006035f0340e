//! KV-cache accounting: cross-instance reuse on migration, the re-prefill
//! fallback, and host-memory offload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{kv_bytes, prefill_time, transfer_time, ModelProfile, NetworkConfig};
use crate::error::{Result, SimError};
use crate::workload::Version;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Device(u32),
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_id: u64,
    /// Input plus generated tokens.
    pub resident_tokens: u64,
    pub location: Location,
    pub version: Version,
}

/// Move an entry to another device that serves the same version. The KV is
/// reused as is: metadata goes over RPC, then the cache itself.
pub fn migrate_with_reuse(
    entry: &mut CacheEntry,
    dst_device: u32,
    dst_version: Option<Version>,
    profile: &ModelProfile,
    net: &NetworkConfig,
) -> Result<f64> {
    if dst_version != Some(entry.version) {
        return Err(SimError::protocol(format!(
            "request {} (v{}) cannot reuse KV on a device serving {:?}",
            entry.request_id, entry.version, dst_version
        )));
    }
    let Location::Device(src) = entry.location else {
        return Err(SimError::pre(format!(
            "request {} is not resident on a device",
            entry.request_id
        )));
    };
    if src == dst_device {
        return Ok(0.0);
    }
    entry.location = Location::Device(dst_device);
    Ok(net.metadata_time()
        + transfer_time(
            kv_bytes(entry.resident_tokens, profile),
            net.bandwidth_bytes_per_s,
            net.latency_s,
        ))
}

/// Rebuild the cache from scratch by prefilling prompt plus generated tokens.
/// Adds the recomputed tokens to `reprefill_tokens`.
pub fn migrate_with_reprefill(
    entry: &mut CacheEntry,
    dst_device: u32,
    profile: &ModelProfile,
    reprefill_tokens: &mut u64,
) -> Result<f64> {
    let secs = prefill_time(entry.resident_tokens, profile)?;
    *reprefill_tokens += entry.resident_tokens;
    entry.location = Location::Device(dst_device);
    Ok(secs)
}

pub fn offload_to_host(entry: &mut CacheEntry, profile: &ModelProfile, net: &NetworkConfig) -> Result<f64> {
    if entry.location == Location::Host {
        return Err(SimError::pre(format!("request {} already on host", entry.request_id)));
    }
    entry.location = Location::Host;
    Ok(pcie_time(entry.resident_tokens, profile, net))
}

/// Bring an entry back from host memory. Fails when `free_tokens` on the
/// device cannot hold it; the caller retries after the next completion.
pub fn onload(
    entry: &mut CacheEntry,
    device: u32,
    free_tokens: u64,
    profile: &ModelProfile,
    net: &NetworkConfig,
) -> Result<f64> {
    if entry.location != Location::Host {
        return Err(SimError::pre(format!("request {} is not on host", entry.request_id)));
    }
    if free_tokens < entry.resident_tokens {
        return Err(SimError::pre(format!(
            "device {device} has {free_tokens} free KV tokens, request {} needs {}",
            entry.request_id, entry.resident_tokens
        )));
    }
    entry.location = Location::Device(device);
    Ok(pcie_time(entry.resident_tokens, profile, net))
}

pub fn pcie_time(tokens: u64, profile: &ModelProfile, net: &NetworkConfig) -> f64 {
    transfer_time(
        kv_bytes(tokens, profile),
        net.pcie_bandwidth_bytes_per_s,
        net.pcie_latency_s,
    )
}

/// Offload victim: the largest resident entry, lowest request id on ties.
pub fn choose_eviction(candidates: &[(u64, u64)]) -> Option<u64> {
    candidates
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|c| c.0)
}

/// Resident tokens per device with a hard capacity check.
#[derive(Debug, Clone, Default)]
pub struct KvLedger {
    capacity: BTreeMap<u32, u64>,
    resident: BTreeMap<u32, u64>,
    peak_utilization: f64,
}

impl KvLedger {
    pub fn new(capacities: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let capacity: BTreeMap<u32, u64> = capacities.into_iter().collect();
        let resident = capacity.keys().map(|&d| (d, 0)).collect();
        Self {
            capacity,
            resident,
            peak_utilization: 0.0,
        }
    }

    pub fn resident(&self, device: u32) -> u64 {
        self.resident.get(&device).copied().unwrap_or(0)
    }

    pub fn capacity(&self, device: u32) -> u64 {
        self.capacity.get(&device).copied().unwrap_or(0)
    }

    pub fn free(&self, device: u32) -> u64 {
        self.capacity(device).saturating_sub(self.resident(device))
    }

    pub fn utilization(&self, device: u32) -> f64 {
        let cap = self.capacity(device);
        if cap == 0 {
            0.0
        } else {
            self.resident(device) as f64 / cap as f64
        }
    }

    pub fn peak_utilization(&self) -> f64 {
        self.peak_utilization
    }

    pub fn reset_peak(&mut self) {
        self.peak_utilization = self
            .capacity
            .keys()
            .map(|&d| self.utilization(d))
            .fold(0.0, f64::max);
    }

    pub fn add(&mut self, device: u32, tokens: u64) -> Result<()> {
        let cap = self.capacity(device);
        let r = self
            .resident
            .get_mut(&device)
            .ok_or_else(|| SimError::pre(format!("unknown device {device}")))?;
        if *r + tokens > cap {
            return Err(SimError::protocol(format!(
                "device {device} KV overflow: {} + {tokens} > {cap}",
                *r
            )));
        }
        *r += tokens;
        let u = *r as f64 / cap as f64;
        if u > self.peak_utilization {
            self.peak_utilization = u;
        }
        Ok(())
    }

    pub fn remove(&mut self, device: u32, tokens: u64) -> Result<()> {
        let r = self
            .resident
            .get_mut(&device)
            .ok_or_else(|| SimError::pre(format!("unknown device {device}")))?;
        if *r < tokens {
            return Err(SimError::protocol(format!(
                "device {device} KV underflow: {} - {tokens}",
                *r
            )));
        }
        *r -= tokens;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(tokens: u64, device: u32, v: Version) -> CacheEntry {
        CacheEntry {
            request_id: 1,
            resident_tokens: tokens,
            location: Location::Device(device),
            version: v,
        }
    }

    #[test]
    fn same_device_reuse_is_free() {
        let mut e = entry(3512, 0, 2);
        let s = migrate_with_reuse(&mut e, 0, Some(2), &ModelProfile::default(), &NetworkConfig::default())
            .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn reuse_transfer_time() {
        let p = ModelProfile::default();
        let n = NetworkConfig::default();
        let mut e = entry(3512, 0, 2);
        let s = migrate_with_reuse(&mut e, 1, Some(2), &p, &n).unwrap();
        let kv: f64 = 2.0 * 32.0 * 8.0 * 128.0 * 2.0 * 3512.0 / 50e9;
        assert!((kv - 9.2e-3).abs() < 0.05e-3);
        let expect = kv + n.latency_s + n.metadata_time();
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
        assert_eq!(e.location, Location::Device(1));
    }

    #[test]
    fn reuse_on_wrong_version_is_fatal() {
        let mut e = entry(100, 0, 2);
        let r = migrate_with_reuse(&mut e, 1, Some(3), &ModelProfile::default(), &NetworkConfig::default());
        assert!(matches!(r, Err(SimError::Protocol(_))));
        let r = migrate_with_reuse(&mut e, 1, None, &ModelProfile::default(), &NetworkConfig::default());
        assert!(matches!(r, Err(SimError::Protocol(_))));
    }

    #[test]
    fn reprefill_costs() {
        let p = ModelProfile::default();
        let mut counter = 0;
        let mut fresh = entry(512, 0, 0);
        let s0 = migrate_with_reprefill(&mut fresh, 1, &p, &mut counter).unwrap();
        assert_eq!(s0, prefill_time(512, &p).unwrap());
        assert_eq!(counter, 512);
        let mut prev = s0;
        for generated in [1, 10, 100, 1000] {
            let mut e = entry(512 + generated, 0, 0);
            let s = migrate_with_reprefill(&mut e, 1, &p, &mut counter).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn offload_round_trip_conserves_tokens() {
        let p = ModelProfile::default();
        let n = NetworkConfig::default();
        let mut e = entry(4096, 3, 1);
        let out = offload_to_host(&mut e, &p, &n).unwrap();
        assert_eq!(e.location, Location::Host);
        assert!(offload_to_host(&mut e, &p, &n).is_err());
        assert!(onload(&mut e, 3, 4095, &p, &n).is_err());
        let back = onload(&mut e, 3, 4096, &p, &n).unwrap();
        assert_eq!(out, back);
        assert_eq!(e.resident_tokens, 4096);
        assert_eq!(e.location, Location::Device(3));
    }

    #[test]
    fn eviction_picks_largest() {
        // scenario: a full device admits one more request; the policy oracle
        // is "largest resident first"
        let mut ledger = KvLedger::new([(0, 1000)]);
        let resident = [(10u64, 300u64), (11, 450), (12, 250)];
        for (_, t) in resident {
            ledger.add(0, t).unwrap();
        }
        assert_eq!(ledger.free(0), 0);
        assert!(ledger.add(0, 200).is_err());
        let victim = choose_eviction(&resident).unwrap();
        let oracle = resident.iter().max_by_key(|r| r.1).unwrap().0;
        assert_eq!(victim, oracle);
        ledger.remove(0, 450).unwrap();
        ledger.add(0, 200).unwrap();
        assert_eq!(choose_eviction(&[(5, 7), (3, 7)]), Some(3));
        assert_eq!(choose_eviction(&[]), None);
    }

    #[test]
    fn host_entries_do_not_count() {
        let p = ModelProfile::default();
        let n = NetworkConfig::default();
        let mut ledger = KvLedger::new([(0, 100)]);
        let mut e = entry(80, 0, 0);
        ledger.add(0, 80).unwrap();
        offload_to_host(&mut e, &p, &n).unwrap();
        ledger.remove(0, 80).unwrap();
        assert_eq!(ledger.resident(0), 0);
        assert!((ledger.peak_utilization() - 0.8).abs() < 1e-12);
        ledger.reset_peak();
        assert_eq!(ledger.peak_utilization(), 0.0);
    }
}
