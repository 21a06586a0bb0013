//! Scenario description and its validation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::DigestParams;
use crate::ids::{CacheId, DestinationId, TenantId, VlanId};
use crate::interception::{MissPredictorConfig, RuleAction};
use crate::peering::{BucketParams, DelayPoolParams};
use crate::time::SimDuration;
use crate::topology::{FabricParams, LinkParams, MicroDcTopology, TopologyBuilder, TopologyError};
use crate::workload::{ObjectSpec, SizeModel, WorkloadSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSpec {
    pub id: TenantId,
    pub vlan: VlanId,
    /// The vCache intercepting this tenant's traffic, if it runs one.
    #[serde(default)]
    pub cache: Option<CacheId>,
    pub workload: WorkloadSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSpec {
    pub id: CacheId,
    pub tenant: TenantId,
    pub host: usize,
    pub capacity_bytes: u64,
    #[serde(default = "default_processing_delay")]
    pub processing_delay_ms: f64,
}

fn default_processing_delay() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: CacheId,
    pub b: CacheId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    /// The serving cache whose outgoing peer transfers are shaped.
    pub cache: CacheId,
    pub aggregate: BucketParams,
    pub individual: BucketParams,
}

impl PoolSpec {
    pub fn params(&self) -> DelayPoolParams {
        DelayPoolParams {
            aggregate: self.aggregate,
            individual: self.individual,
        }
    }
}

/// A cache that treats `to` as a sibling without any agreement: it sends
/// availability queries and fetches with a forged credential.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RogueSpec {
    pub from: CacheId,
    pub to: CacheId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeerSelection {
    /// Consult the sibling's digest and confirm digest hits with a query.
    #[default]
    Digest,
    /// Query every sibling on each local miss.
    AlwaysIcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeeringSpec {
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub delay_pools: Vec<PoolSpec>,
    #[serde(default)]
    pub selection: PeerSelection,
    /// Store peer-served objects locally.
    #[serde(default = "default_true")]
    pub read_through: bool,
    #[serde(default)]
    pub digest: DigestParams,
    #[serde(default = "default_digest_period")]
    pub digest_period_s: f64,
    /// Defaults to four shared-network round trips (at least 1 ms).
    #[serde(default)]
    pub icp_timeout_ms: Option<f64>,
    /// Caches that push all their misses to their siblings.
    #[serde(default)]
    pub offload: Vec<CacheId>,
    #[serde(default)]
    pub rogue: Vec<RogueSpec>,
}

fn default_true() -> bool {
    true
}

fn default_digest_period() -> f64 {
    60.0
}

impl Default for PeeringSpec {
    fn default() -> Self {
        Self {
            links: Vec::new(),
            delay_pools: Vec::new(),
            selection: PeerSelection::Digest,
            read_through: true,
            digest: DigestParams::default(),
            digest_period_s: default_digest_period(),
            icp_timeout_ms: None,
            offload: Vec::new(),
            rogue: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticRule {
    pub tenant: TenantId,
    pub destination: DestinationId,
    pub action: RuleAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterceptionSpec {
    /// Periodically derive bypass rules from access logs.
    #[serde(default)]
    pub derive: bool,
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples: u64,
    #[serde(default = "default_threshold")]
    pub miss_threshold: f64,
    #[serde(default = "default_window")]
    pub period_s: f64,
    #[serde(default)]
    pub static_rules: Vec<StaticRule>,
}

fn default_window() -> f64 {
    300.0
}

fn default_min_samples() -> u64 {
    10
}

fn default_threshold() -> f64 {
    0.8
}

impl Default for InterceptionSpec {
    fn default() -> Self {
        Self {
            derive: false,
            window_s: default_window(),
            min_samples: default_min_samples(),
            miss_threshold: default_threshold(),
            period_s: default_window(),
            static_rules: Vec::new(),
        }
    }
}

impl InterceptionSpec {
    pub fn predictor(&self) -> MissPredictorConfig {
        MissPredictorConfig {
            window: SimDuration::from_secs_f64(self.window_s),
            min_samples: self.min_samples,
            miss_threshold: self.miss_threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    /// Deliver every availability query twice.
    #[serde(default)]
    pub duplicate_icp: bool,
}

/// Complete input of one simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Requests issued before this time are excluded from the metrics.
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default)]
    pub fabric: FabricParams,
    pub hosts: usize,
    pub tenants: Vec<TenantSpec>,
    #[serde(default)]
    pub caches: Vec<CacheSpec>,
    #[serde(default)]
    pub objects: ObjectSpec,
    #[serde(default)]
    pub peering: PeeringSpec,
    #[serde(default)]
    pub interception: InterceptionSpec,
    #[serde(default)]
    pub faults: FaultSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Warning,
    Error,
}

/// One validation finding, located by a dotted path into the scenario.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.path, self.message)
    }
}

#[derive(Default)]
struct Issues(Vec<Issue>);

impl Issues {
    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Error,
            path: path.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Warning,
            path: path.into(),
            message: message.into(),
        });
    }
}

fn finite_non_negative(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

impl ScenarioConfig {
    pub fn has_errors(issues: &[Issue]) -> bool {
        issues.iter().any(|i| i.severity == Severity::Error)
    }

    /// Structural checks plus a warning when peering cannot beat the WAN.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Issues::default();
        if !finite_non_negative(self.duration_s) {
            out.error("duration_s", "must be a finite non-negative number");
        }
        if !finite_non_negative(self.warmup_s) {
            out.error("warmup_s", "must be a finite non-negative number");
        }
        self.validate_fabric(&mut out);

        let mut tenants: BTreeMap<TenantId, &TenantSpec> = BTreeMap::new();
        let mut vlans = BTreeSet::new();
        for (i, t) in self.tenants.iter().enumerate() {
            let p = format!("tenants[{i}]");
            if tenants.insert(t.id, t).is_some() {
                out.error(format!("{p}.id"), format!("duplicate tenant {}", t.id.0));
            }
            if !vlans.insert(t.vlan) {
                out.error(
                    format!("{p}.vlan"),
                    format!("vlan {} assigned twice", t.vlan.0),
                );
            }
            let w = &t.workload;
            if w.catalog_size == 0 {
                out.error(format!("{p}.workload.catalog_size"), "must be at least 1");
            }
            if !finite_non_negative(w.zipf_alpha) {
                out.error(
                    format!("{p}.workload.zipf_alpha"),
                    "must be finite and >= 0",
                );
            }
            if !finite_non_negative(w.request_rate) {
                out.error(
                    format!("{p}.workload.request_rate"),
                    "must be finite and >= 0",
                );
            }
            if !(0.0..=1.0).contains(&w.personalized_fraction) {
                out.error(
                    format!("{p}.workload.personalized_fraction"),
                    "must lie in [0, 1]",
                );
            }
        }

        let mut caches: BTreeMap<CacheId, &CacheSpec> = BTreeMap::new();
        for (i, c) in self.caches.iter().enumerate() {
            let p = format!("caches[{i}]");
            if caches.insert(c.id, c).is_some() {
                out.error(format!("{p}.id"), format!("duplicate cache {}", c.id.0));
            }
            if !tenants.contains_key(&c.tenant) {
                out.error(
                    format!("{p}.tenant"),
                    format!("unknown tenant {}", c.tenant.0),
                );
            }
            if c.host >= self.hosts {
                out.error(
                    format!("{p}.host"),
                    format!("host {} out of range (hosts = {})", c.host, self.hosts),
                );
            }
            if c.capacity_bytes == 0 {
                out.error(format!("{p}.capacity_bytes"), "must be positive");
            }
            if !finite_non_negative(c.processing_delay_ms) {
                out.error(
                    format!("{p}.processing_delay_ms"),
                    "must be finite and >= 0",
                );
            }
        }

        for (i, t) in self.tenants.iter().enumerate() {
            let p = format!("tenants[{i}]");
            if let Some(cid) = t.cache {
                match caches.get(&cid) {
                    None => out.error(format!("{p}.cache"), format!("unknown cache {}", cid.0)),
                    Some(c) if c.tenant != t.id => out.error(
                        format!("{p}.cache"),
                        format!("cache {} belongs to tenant {}", cid.0, c.tenant.0),
                    ),
                    Some(_) => {}
                }
            }
            if let Some(o) = t.workload.overlap {
                let op = format!("{p}.workload.overlap");
                if !(0.0..=1.0).contains(&o.fraction) {
                    out.error(format!("{op}.fraction"), "must lie in [0, 1]");
                }
                match tenants.get(&o.peer) {
                    None => out.error(format!("{op}.peer"), format!("unknown tenant {}", o.peer.0)),
                    Some(_) if o.peer == t.id => {
                        out.error(format!("{op}.peer"), "a tenant cannot overlap with itself")
                    }
                    Some(peer) => {
                        let back = peer.workload.overlap;
                        if back.is_none_or(|b| b.peer != t.id || b.fraction != o.fraction) {
                            out.error(
                                op.clone(),
                                format!(
                                    "tenant {} must declare the same overlap with tenant {}",
                                    o.peer.0, t.id.0
                                ),
                            );
                        }
                    }
                }
            }
        }

        self.validate_objects(&mut out, &caches);

        let pp = "peering";
        let mut pairs = BTreeSet::new();
        for (i, l) in self.peering.links.iter().enumerate() {
            let p = format!("{pp}.links[{i}]");
            let mut ok = true;
            for (field, c) in [("a", l.a), ("b", l.b)] {
                if !caches.contains_key(&c) {
                    out.error(format!("{p}.{field}"), format!("unknown cache {}", c.0));
                    ok = false;
                }
            }
            if ok && caches[&l.a].tenant == caches[&l.b].tenant {
                out.error(
                    p.clone(),
                    "peering links must join caches of different tenants",
                );
            }
            if !pairs.insert((l.a.min(l.b), l.a.max(l.b))) {
                out.error(p.clone(), "duplicate link");
            }
        }
        let mut pooled = BTreeSet::new();
        for (i, pool) in self.peering.delay_pools.iter().enumerate() {
            let p = format!("{pp}.delay_pools[{i}]");
            if !caches.contains_key(&pool.cache) {
                out.error(
                    format!("{p}.cache"),
                    format!("unknown cache {}", pool.cache.0),
                );
            }
            if !pooled.insert(pool.cache) {
                out.error(format!("{p}.cache"), "cache has more than one delay pool");
            }
            for (name, b) in [
                ("aggregate", pool.aggregate),
                ("individual", pool.individual),
            ] {
                if b.capacity == 0 {
                    out.error(format!("{p}.{name}.capacity"), "must be positive");
                }
                if b.rate == 0 {
                    out.error(format!("{p}.{name}.rate"), "must be positive");
                }
            }
        }
        for (i, c) in self.peering.offload.iter().enumerate() {
            if !caches.contains_key(c) {
                out.error(
                    format!("{pp}.offload[{i}]"),
                    format!("unknown cache {}", c.0),
                );
            }
        }
        for (i, r) in self.peering.rogue.iter().enumerate() {
            for (field, c) in [("from", r.from), ("to", r.to)] {
                if !caches.contains_key(&c) {
                    out.error(
                        format!("{pp}.rogue[{i}].{field}"),
                        format!("unknown cache {}", c.0),
                    );
                }
            }
            if r.from == r.to {
                out.error(format!("{pp}.rogue[{i}]"), "a cache cannot target itself");
            }
        }
        if !(self.peering.digest_period_s.is_finite() && self.peering.digest_period_s > 0.0) {
            out.error(format!("{pp}.digest_period_s"), "must be positive");
        }
        if self.peering.digest.hash_count == 0 {
            out.error(format!("{pp}.digest.hash_count"), "must be at least 1");
        }
        if self.peering.digest.bits == Some(0) || self.peering.digest.bits_per_entry == 0 {
            out.error(format!("{pp}.digest"), "digest size must be positive");
        }
        if let Some(t) = self.peering.icp_timeout_ms {
            if !(t.is_finite() && t > 0.0) {
                out.error(format!("{pp}.icp_timeout_ms"), "must be positive");
            }
        }

        let ip = "interception";
        let ic = &self.interception;
        if !(ic.window_s.is_finite() && ic.window_s > 0.0) {
            out.error(format!("{ip}.window_s"), "must be positive");
        }
        if !(ic.period_s.is_finite() && ic.period_s > 0.0) {
            out.error(format!("{ip}.period_s"), "must be positive");
        }
        if ic.min_samples == 0 {
            out.error(format!("{ip}.min_samples"), "must be at least 1");
        }
        if ic.miss_threshold.is_nan() || ic.miss_threshold < 0.0 {
            out.error(format!("{ip}.miss_threshold"), "must be >= 0");
        }
        for (i, r) in ic.static_rules.iter().enumerate() {
            if !tenants.contains_key(&r.tenant) {
                out.error(
                    format!("{ip}.static_rules[{i}].tenant"),
                    format!("unknown tenant {}", r.tenant.0),
                );
            }
        }

        if !ScenarioConfig::has_errors(&out.0) {
            self.check_peering_latency(&mut out);
        }
        out.0
    }

    fn validate_fabric(&self, out: &mut Issues) {
        let f = &self.fabric;
        let roles: [(&str, LinkParams); 5] = [
            ("access", f.access),
            ("backhaul", f.backhaul),
            ("wan", f.wan),
            ("inter_host", f.inter_host),
            ("intra_host", f.intra_host),
        ];
        for (name, lp) in roles {
            if !finite_non_negative(lp.latency_ms) {
                out.error(
                    format!("fabric.{name}.latency_ms"),
                    "must be finite and >= 0",
                );
            }
            if lp.bandwidth == 0 {
                out.error(format!("fabric.{name}.bandwidth"), "must be positive");
            }
            if name != "intra_host" && lp.latency_ms < f.intra_host.latency_ms {
                out.error(
                    format!("fabric.{name}.latency_ms"),
                    "intra-host links must have the smallest latency",
                );
            }
        }
        if !finite_non_negative(f.switch_delay_ms) {
            out.error("fabric.switch_delay_ms", "must be finite and >= 0");
        }
    }

    fn validate_objects(&self, out: &mut Issues, caches: &BTreeMap<CacheId, &CacheSpec>) {
        let o = &self.objects;
        match o.size {
            SizeModel::Fixed(0) => out.error("objects.size", "object size must be positive"),
            SizeModel::Uniform { min, max } if min == 0 || min > max => {
                out.error("objects.size", "uniform sizes need 0 < min <= max")
            }
            _ => {}
        }
        if o.destinations == 0 {
            out.error("objects.destinations", "must be at least 1");
        }
        for (i, d) in o.personalized_destinations.iter().enumerate() {
            if *d >= o.destinations {
                out.error(
                    format!("objects.personalized_destinations[{i}]"),
                    format!("destination {d} out of range"),
                );
            }
        }
        let largest = match o.size {
            SizeModel::Fixed(s) => s,
            SizeModel::Uniform { max, .. } => max,
        };
        for (i, c) in self.caches.iter().enumerate() {
            if caches.get(&c.id).is_some() && c.capacity_bytes > 0 && largest > c.capacity_bytes {
                out.warn(
                    format!("caches[{i}].capacity_bytes"),
                    "some objects are larger than the cache and will never be stored",
                );
            }
        }
    }

    /// Peering only pays off when siblings are closer than the WAN.
    fn check_peering_latency(&self, out: &mut Issues) {
        let Ok(mut topo) = self.build_topology() else {
            return;
        };
        let wan = SimDuration::from_millis_f64(self.fabric.wan.latency_ms);
        for (i, l) in self.peering.links.iter().enumerate() {
            let Ok(link) = crate::peering::connect_peers(&mut topo, l.a, l.b, self.seed) else {
                continue;
            };
            let (Ok(a), Ok(b)) = (topo.cache(l.a), topo.cache(l.b)) else {
                continue;
            };
            let Ok(path) = topo.compute_path(
                a.node,
                b.node,
                crate::topology::FlowScope::Shared(link.network),
            ) else {
                continue;
            };
            if path.latency >= wan {
                out.warn(
                    format!("peering.links[{i}]"),
                    format!(
                        "shared-network latency {} is not below the WAN latency {}; peering cannot pay off",
                        path.latency, wan
                    ),
                );
            }
        }
    }

    /// The fabric described by this scenario, without shared networks.
    pub fn build_topology(&self) -> Result<MicroDcTopology, TopologyError> {
        let mut b = TopologyBuilder::new(self.fabric);
        for t in &self.tenants {
            b.tenant(t.id, t.vlan);
        }
        for _ in 0..self.hosts {
            b.host();
        }
        for c in &self.caches {
            b.cache(c.id, c.tenant, c.host);
        }
        b.build()
    }
}
