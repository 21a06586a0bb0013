//! Run summaries and paired-run deltas.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{CacheId, NetworkId, TenantId};
use crate::peering::{symmetry_ratio, PeeringAccounting, Ratio};
use crate::time::SimDuration;

/// Where a request was finally answered from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServedBy {
    Local,
    Peer,
    Origin,
    OriginBypassed,
}

impl ServedBy {
    pub fn as_str(self) -> &'static str {
        match self {
            ServedBy::Local => "local",
            ServedBy::Peer => "peer",
            ServedBy::Origin => "origin",
            ServedBy::OriginBypassed => "origin-bypassed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "local" => ServedBy::Local,
            "peer" => ServedBy::Peer,
            "origin" => ServedBy::Origin,
            "origin-bypassed" => ServedBy::OriginBypassed,
            _ => return None,
        })
    }

    /// Whether the object crossed the WAN.
    pub fn via_wan(self) -> bool {
        matches!(self, ServedBy::Origin | ServedBy::OriginBypassed)
    }
}

/// Request-level aggregates for one tenant or for the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantMetrics {
    pub requests: u64,
    pub served_local: u64,
    pub served_peer: u64,
    pub served_origin: u64,
    pub served_origin_bypassed: u64,
    pub local_hit_ratio: Ratio,
    pub peer_hit_ratio: Ratio,
    pub combined_hit_ratio: Ratio,
    /// Share of the cache-resolved misses (peer or origin) that a sibling
    /// answered.
    pub peer_resolved_miss_ratio: Ratio,
    pub latency_mean_ms: Option<f64>,
    pub latency_median_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub mean_vi_traversals: Option<f64>,
    pub wan_bytes: u64,
    pub peering_bytes: u64,
    pub rule_lookups: u64,
}

/// One measured request, as fed to [`TenantMetrics::from_samples`].
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub served_by: ServedBy,
    pub latency: SimDuration,
    pub vi_traversals: u32,
    pub bytes: u64,
    pub rule_lookup: bool,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = libm::ceil(p * sorted.len() as f64) as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

impl TenantMetrics {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let count = |s: ServedBy| samples.iter().filter(|x| x.served_by == s).count() as u64;
        let (local, peer, origin, bypassed) = (
            count(ServedBy::Local),
            count(ServedBy::Peer),
            count(ServedBy::Origin),
            count(ServedBy::OriginBypassed),
        );
        let n = samples.len() as u64;
        let mut lat: Vec<u64> = samples.iter().map(|s| s.latency.as_nanos()).collect();
        lat.sort_unstable();
        let total_ns: u128 = lat.iter().map(|&v| v as u128).sum();
        let vi: u64 = samples.iter().map(|s| s.vi_traversals as u64).sum();
        let mean = |sum: f64| (n > 0).then(|| sum / n as f64);
        TenantMetrics {
            requests: n,
            served_local: local,
            served_peer: peer,
            served_origin: origin,
            served_origin_bypassed: bypassed,
            local_hit_ratio: Ratio::of(local as f64, n as f64),
            peer_hit_ratio: Ratio::of(peer as f64, n as f64),
            combined_hit_ratio: Ratio::of((local + peer) as f64, n as f64),
            peer_resolved_miss_ratio: Ratio::of(peer as f64, (peer + origin) as f64),
            latency_mean_ms: mean(total_ns as f64 / 1e6),
            latency_median_ms: percentile(&lat, 0.5).map(ns_to_ms),
            latency_p95_ms: percentile(&lat, 0.95).map(ns_to_ms),
            mean_vi_traversals: mean(vi as f64),
            wan_bytes: samples
                .iter()
                .filter(|s| s.served_by.via_wan())
                .map(|s| s.bytes)
                .sum(),
            peering_bytes: samples
                .iter()
                .filter(|s| s.served_by == ServedBy::Peer)
                .map(|s| s.bytes)
                .sum(),
            rule_lookups: samples.iter().filter(|s| s.rule_lookup).count() as u64,
        }
    }

    /// local + peer + origin + origin-bypassed = requests.
    pub fn reconciles(&self) -> bool {
        self.served_local + self.served_peer + self.served_origin + self.served_origin_bypassed
            == self.requests
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub cache: CacheId,
    pub tenant: TenantId,
    /// Summed over all of the cache's peering links.
    pub accounting: PeeringAccounting,
    pub symmetry: Ratio,
    pub stored_objects: usize,
    pub used_bytes: u64,
    pub log_records: usize,
}

impl CacheReport {
    pub fn new(cache: CacheId, tenant: TenantId, accounting: PeeringAccounting) -> Self {
        Self {
            cache,
            tenant,
            accounting,
            symmetry: symmetry_ratio(&accounting),
            stored_objects: 0,
            used_bytes: 0,
            log_records: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub a: CacheId,
    pub b: CacheId,
    pub network: NetworkId,
    pub a_accounting: PeeringAccounting,
    pub b_accounting: PeeringAccounting,
    /// Bytes `a` served over bytes `b` served.
    pub symmetry: Ratio,
}

/// Engine-level event and protocol tallies over the whole run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub events: u64,
    pub request_arrivals: u64,
    pub deliveries: u64,
    pub icp_queries_sent: u64,
    pub icp_duplicate_deliveries: u64,
    pub icp_stale_replies: u64,
    pub icp_timeouts: u64,
    pub acl_drops: u64,
    pub evicted_since_hit: u64,
    pub digest_false_hits: u64,
    pub digest_rebuilds: u64,
    pub rule_derivations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub global: TenantMetrics,
    pub tenants: BTreeMap<TenantId, TenantMetrics>,
    pub caches: Vec<CacheReport>,
    pub links: Vec<LinkReport>,
    pub counters: Counters,
}

impl MetricsReport {
    pub fn reconciles(&self) -> bool {
        self.global.reconciles()
            && self.tenants.values().all(TenantMetrics::reconciles)
            && self.tenants.values().map(|t| t.requests).sum::<u64>() == self.global.requests
    }
}

/// Peering-on minus peering-off for one scenario and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub latency_mean_ms: Option<f64>,
    pub wan_bytes: i128,
    pub mean_vi_traversals: Option<f64>,
    pub peering_bytes: u64,
    pub peer_hits: u64,
}

impl Delta {
    pub fn between(on: &TenantMetrics, off: &TenantMetrics) -> Self {
        let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        Self {
            latency_mean_ms: diff(on.latency_mean_ms, off.latency_mean_ms),
            wan_bytes: on.wan_bytes as i128 - off.wan_bytes as i128,
            mean_vi_traversals: diff(on.mean_vi_traversals, off.mean_vi_traversals),
            peering_bytes: on.peering_bytes,
            peer_hits: on.served_peer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub seed: u64,
    pub global: Delta,
    pub tenants: BTreeMap<TenantId, Delta>,
}

impl DeltaReport {
    pub fn new(on: &MetricsReport, off: &MetricsReport) -> Self {
        let tenants = on
            .tenants
            .iter()
            .filter_map(|(t, m)| off.tenants.get(t).map(|o| (*t, Delta::between(m, o))))
            .collect();
        Self {
            seed: on.seed,
            global: Delta::between(&on.global, &off.global),
            tenants,
        }
    }
}
