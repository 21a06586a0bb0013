//! The shared micro data center: one network node carrying the external
//! bridge, a set of compute hosts, per-tenant VLAN segments and the
//! tenant-owned shared networks used for peering.
//!
//! The fabric is a tree:
//!
//! ```text
//! users(t) -- edge -- br-ex -- br-int(nn) -- br-vlan(nn) -- br-vlan(h) -- br-int(h) -- qbr(c) -- cache(c)
//!                       |
//!                     origin (wan)
//! ```
//!
//! Two kinds of edges are added on top of the tree and are only usable by
//! shared-network flows: direct `br-vlan` links between compute hosts and
//! the extra port a cache gains when it attaches to a shared network
//! (plugged straight into its host's `br-int`).

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{CacheId, NetworkId, NodeId, TenantId, VlanId};
use crate::time::SimDuration;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchKind {
    Edge,
    SecurityBridge,
    IntegrationBridge,
    VlanBridge,
    ExternalBridge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// A switch; `host` is `None` on the network node and the access edge.
    Switch {
        kind: SwitchKind,
        host: Option<usize>,
    },
    Cache(CacheId),
    /// The user population of one tenant, behind the access edge.
    Users(TenantId),
    Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    IntraHost,
    InterHost,
    Backhaul,
    Wan,
}

/// Which flows may use a link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkClass {
    Tree,
    /// Direct `br-vlan` to `br-vlan` link between two compute hosts.
    HostShortcut,
    /// A cache's interface on a shared network.
    SharedPort(NetworkId),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// One-way propagation latency in milliseconds.
    pub latency_ms: f64,
    /// Bytes per second.
    pub bandwidth: u64,
}

impl LinkParams {
    pub const fn new(latency_ms: f64, bandwidth: u64) -> Self {
        Self {
            latency_ms,
            bandwidth,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Link {
    pub endpoints: (NodeId, NodeId),
    pub latency: SimDuration,
    pub bandwidth: u64,
    pub kind: LinkKind,
    pub class: LinkClass,
}

impl Link {
    fn other(&self, n: NodeId) -> NodeId {
        if self.endpoints.0 == n {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

/// Link parameters per role in the fabric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricParams {
    /// Users to the access edge.
    pub access: LinkParams,
    /// Access edge to the external bridge.
    pub backhaul: LinkParams,
    /// External bridge to the origin.
    pub wan: LinkParams,
    /// Network node to compute host, and host to host when direct links exist.
    pub inter_host: LinkParams,
    /// Links between bridges and VMs inside one node.
    pub intra_host: LinkParams,
    /// Per-switch forwarding delay in milliseconds.
    #[serde(default)]
    pub switch_delay_ms: f64,
    /// Install direct `br-vlan` links between every pair of compute hosts.
    #[serde(default = "default_true")]
    pub direct_host_links: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FabricParams {
    fn default() -> Self {
        Self {
            access: LinkParams::new(2.0, 125_000_000),
            backhaul: LinkParams::new(1.0, 1_250_000_000),
            wan: LinkParams::new(40.0, 125_000_000),
            inter_host: LinkParams::new(0.2, 1_250_000_000),
            intra_host: LinkParams::new(0.02, 5_000_000_000),
            switch_delay_ms: 0.0,
            direct_host_links: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedNetwork {
    pub id: NetworkId,
    pub owner: TenantId,
    pub granted: BTreeSet<TenantId>,
    pub attached: BTreeSet<CacheId>,
}

impl SharedNetwork {
    pub fn admits(&self, tenant: TenantId) -> bool {
        tenant == self.owner || self.granted.contains(&tenant)
    }
}

#[derive(Clone, Debug)]
pub struct Host {
    pub integration_bridge: NodeId,
    pub vlan_bridge: NodeId,
    pub caches: Vec<CacheId>,
}

#[derive(Clone, Copy, Debug)]
pub struct CachePlacement {
    pub node: NodeId,
    pub tenant: TenantId,
    pub host: usize,
}

/// The flow's isolation domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowScope {
    Vlan(VlanId),
    Shared(NetworkId),
    /// Raw tree forwarding with tenant isolation ignored. Models traffic that
    /// reaches a cache through a misconfiguration; the cache's own access
    /// rules are then the only gate.
    Unisolated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub links: Vec<usize>,
    /// Propagation plus per-switch forwarding delay.
    pub latency: SimDuration,
    /// Crossings of the external bridge.
    pub vi_traversals: u32,
    pub switches: u32,
    bandwidths: Vec<u64>,
    kinds: Vec<LinkKind>,
}

impl PathResult {
    /// Store-and-forward serialization delay of `bytes` over every link.
    pub fn serialization(&self, bytes: u64) -> SimDuration {
        let ns = self
            .bandwidths
            .iter()
            .map(|&bw| ((bytes as u128 * 1_000_000_000).div_ceil(bw as u128)) as u64)
            .fold(0u64, u64::saturating_add);
        SimDuration::from_nanos(ns)
    }

    /// Latency of carrying a `bytes`-sized payload along the path.
    pub fn transfer_latency(&self, bytes: u64) -> SimDuration {
        self.latency + self.serialization(bytes)
    }

    pub fn count_kind(&self, kind: LinkKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// Concatenates two legs.
    pub fn then(&self, next: &PathResult) -> PathResult {
        let mut out = self.clone();
        out.links.extend_from_slice(&next.links);
        out.latency += next.latency;
        out.vi_traversals += next.vi_traversals;
        out.switches += next.switches;
        out.bandwidths.extend_from_slice(&next.bandwidths);
        out.kinds.extend_from_slice(&next.kinds);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown cache {0}")]
    UnknownCache(CacheId),
    #[error("unknown tenant {0}")]
    UnknownTenant(TenantId),
    #[error("unknown vlan {0}")]
    UnknownVlan(VlanId),
    #[error("unknown shared network {0}")]
    UnknownNetwork(NetworkId),
    #[error("unknown host index {0}")]
    UnknownHost(usize),
    #[error("no path from {src} to {dst} within the flow's isolation domain")]
    NoPath { src: NodeId, dst: NodeId },
    #[error("tenant {tenant} does not own {network}")]
    NotOwner {
        network: NetworkId,
        tenant: TenantId,
    },
    #[error("tenant {tenant} has not been granted access to {network}")]
    NotGranted {
        network: NetworkId,
        tenant: TenantId,
    },
    #[error("cache {cache} is already attached to {network}")]
    AlreadyAttached { network: NetworkId, cache: CacheId },
    #[error("cache {0} declared twice")]
    DuplicateCache(CacheId),
    #[error("tenant {0} declared twice")]
    DuplicateTenant(TenantId),
    #[error("vlan {0} assigned to more than one tenant")]
    DuplicateVlan(VlanId),
    #[error("link bandwidth must be positive")]
    ZeroBandwidth,
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
}

/// The complete fabric plus tenancy state.
#[derive(Clone, Debug)]
pub struct MicroDcTopology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    adjacency: Vec<Vec<usize>>,
    hosts: Vec<Host>,
    vlans: BTreeMap<VlanId, TenantId>,
    tenant_vlan: BTreeMap<TenantId, VlanId>,
    users: BTreeMap<TenantId, NodeId>,
    caches: BTreeMap<CacheId, CachePlacement>,
    shared: BTreeMap<NetworkId, SharedNetwork>,
    origin: NodeId,
    external_bridge: NodeId,
    edge: NodeId,
    switch_delay: SimDuration,
    params: FabricParams,
}

/// Incremental construction of a [`MicroDcTopology`].
#[derive(Debug)]
pub struct TopologyBuilder {
    params: FabricParams,
    tenants: Vec<(TenantId, VlanId)>,
    hosts: usize,
    caches: Vec<(CacheId, TenantId, usize)>,
}

impl TopologyBuilder {
    pub fn new(params: FabricParams) -> Self {
        Self {
            params,
            tenants: Vec::new(),
            hosts: 0,
            caches: Vec::new(),
        }
    }

    pub fn tenant(&mut self, tenant: TenantId, vlan: VlanId) -> &mut Self {
        self.tenants.push((tenant, vlan));
        self
    }

    /// Adds a compute host and returns its index.
    pub fn host(&mut self) -> usize {
        self.hosts += 1;
        self.hosts - 1
    }

    pub fn cache(&mut self, cache: CacheId, tenant: TenantId, host: usize) -> &mut Self {
        self.caches.push((cache, tenant, host));
        self
    }

    pub fn build(&self) -> Result<MicroDcTopology, TopologyError> {
        let p = &self.params;
        for lp in [p.access, p.backhaul, p.wan, p.inter_host, p.intra_host] {
            if lp.bandwidth == 0 {
                return Err(TopologyError::ZeroBandwidth);
            }
        }
        let mut t = MicroDcTopology {
            nodes: Vec::new(),
            links: Vec::new(),
            adjacency: Vec::new(),
            hosts: Vec::new(),
            vlans: BTreeMap::new(),
            tenant_vlan: BTreeMap::new(),
            users: BTreeMap::new(),
            caches: BTreeMap::new(),
            shared: BTreeMap::new(),
            origin: NodeId(0),
            external_bridge: NodeId(0),
            edge: NodeId(0),
            switch_delay: SimDuration::from_millis_f64(p.switch_delay_ms),
            params: *p,
        };
        let switch = |kind, host| NodeKind::Switch { kind, host };

        t.origin = t.add_node(NodeKind::Origin);
        t.external_bridge = t.add_node(switch(SwitchKind::ExternalBridge, None));
        t.edge = t.add_node(switch(SwitchKind::Edge, None));
        let nn_int = t.add_node(switch(SwitchKind::IntegrationBridge, None));
        let nn_vlan = t.add_node(switch(SwitchKind::VlanBridge, None));
        t.add_link(
            t.origin,
            t.external_bridge,
            p.wan,
            LinkKind::Wan,
            LinkClass::Tree,
        );
        t.add_link(
            t.edge,
            t.external_bridge,
            p.backhaul,
            LinkKind::Backhaul,
            LinkClass::Tree,
        );
        t.add_link(
            t.external_bridge,
            nn_int,
            p.intra_host,
            LinkKind::IntraHost,
            LinkClass::Tree,
        );
        t.add_link(
            nn_int,
            nn_vlan,
            p.intra_host,
            LinkKind::IntraHost,
            LinkClass::Tree,
        );

        for &(tenant, vlan) in &self.tenants {
            if t.tenant_vlan.contains_key(&tenant) {
                return Err(TopologyError::DuplicateTenant(tenant));
            }
            if t.vlans.insert(vlan, tenant).is_some() {
                return Err(TopologyError::DuplicateVlan(vlan));
            }
            t.tenant_vlan.insert(tenant, vlan);
            let users = t.add_node(NodeKind::Users(tenant));
            t.add_link(users, t.edge, p.access, LinkKind::Backhaul, LinkClass::Tree);
            t.users.insert(tenant, users);
        }

        for h in 0..self.hosts {
            let vlan = t.add_node(switch(SwitchKind::VlanBridge, Some(h)));
            let int = t.add_node(switch(SwitchKind::IntegrationBridge, Some(h)));
            t.add_link(
                nn_vlan,
                vlan,
                p.inter_host,
                LinkKind::InterHost,
                LinkClass::Tree,
            );
            t.add_link(
                vlan,
                int,
                p.intra_host,
                LinkKind::IntraHost,
                LinkClass::Tree,
            );
            t.hosts.push(Host {
                integration_bridge: int,
                vlan_bridge: vlan,
                caches: Vec::new(),
            });
        }
        if p.direct_host_links {
            for a in 0..self.hosts {
                for b in a + 1..self.hosts {
                    let (va, vb) = (t.hosts[a].vlan_bridge, t.hosts[b].vlan_bridge);
                    t.add_link(
                        va,
                        vb,
                        p.inter_host,
                        LinkKind::InterHost,
                        LinkClass::HostShortcut,
                    );
                }
            }
        }

        for &(cache, tenant, host) in &self.caches {
            if !t.tenant_vlan.contains_key(&tenant) {
                return Err(TopologyError::UnknownTenant(tenant));
            }
            if host >= t.hosts.len() {
                return Err(TopologyError::UnknownHost(host));
            }
            if t.caches.contains_key(&cache) {
                return Err(TopologyError::DuplicateCache(cache));
            }
            let qbr = t.add_node(switch(SwitchKind::SecurityBridge, Some(host)));
            let vm = t.add_node(NodeKind::Cache(cache));
            let int = t.hosts[host].integration_bridge;
            t.add_link(int, qbr, p.intra_host, LinkKind::IntraHost, LinkClass::Tree);
            t.add_link(qbr, vm, p.intra_host, LinkKind::IntraHost, LinkClass::Tree);
            t.hosts[host].caches.push(cache);
            t.caches.insert(
                cache,
                CachePlacement {
                    node: vm,
                    tenant,
                    host,
                },
            );
        }
        Ok(t)
    }
}

impl MicroDcTopology {
    fn add_node(&mut self, kind: NodeKind) -> NodeId {
        self.nodes.push(Node { kind });
        self.adjacency.push(Vec::new());
        NodeId(self.nodes.len() as u32 - 1)
    }

    fn add_link(&mut self, a: NodeId, b: NodeId, p: LinkParams, kind: LinkKind, class: LinkClass) {
        let idx = self.links.len();
        self.links.push(Link {
            endpoints: (a, b),
            latency: SimDuration::from_millis_f64(p.latency_ms),
            bandwidth: p.bandwidth,
            kind,
            class,
        });
        self.adjacency[a.0 as usize].push(idx);
        self.adjacency[b.0 as usize].push(idx);
    }

    pub fn params(&self) -> &FabricParams {
        &self.params
    }

    pub fn node_kind(&self, n: NodeId) -> Option<NodeKind> {
        self.nodes.get(n.0 as usize).map(|n| n.kind)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (NodeId(i as u32), n.kind))
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn hosts(&self) -> &[Host] {
        &self.hosts
    }

    pub fn origin(&self) -> NodeId {
        self.origin
    }

    pub fn external_bridge(&self) -> NodeId {
        self.external_bridge
    }

    pub fn users(&self, tenant: TenantId) -> Result<NodeId, TopologyError> {
        self.users
            .get(&tenant)
            .copied()
            .ok_or(TopologyError::UnknownTenant(tenant))
    }

    pub fn cache(&self, cache: CacheId) -> Result<CachePlacement, TopologyError> {
        self.caches
            .get(&cache)
            .copied()
            .ok_or(TopologyError::UnknownCache(cache))
    }

    pub fn cache_ids(&self) -> impl Iterator<Item = CacheId> + '_ {
        self.caches.keys().copied()
    }

    pub fn tenants(&self) -> impl Iterator<Item = (TenantId, VlanId)> + '_ {
        self.tenant_vlan.iter().map(|(t, v)| (*t, *v))
    }

    pub fn vlan_of(&self, tenant: TenantId) -> Result<VlanId, TopologyError> {
        self.tenant_vlan
            .get(&tenant)
            .copied()
            .ok_or(TopologyError::UnknownTenant(tenant))
    }

    pub fn tenant_of_vlan(&self, vlan: VlanId) -> Option<TenantId> {
        self.vlans.get(&vlan).copied()
    }

    pub fn shared_network(&self, id: NetworkId) -> Result<&SharedNetwork, TopologyError> {
        self.shared
            .get(&id)
            .ok_or(TopologyError::UnknownNetwork(id))
    }

    pub fn shared_networks(&self) -> impl Iterator<Item = &SharedNetwork> {
        self.shared.values()
    }

    /// The tenant a node belongs to, or `None` for shared infrastructure.
    pub fn node_tenant(&self, n: NodeId) -> Option<TenantId> {
        match self.node_kind(n)? {
            NodeKind::Cache(c) => self.caches.get(&c).map(|p| p.tenant),
            NodeKind::Users(t) => Some(t),
            NodeKind::Switch { .. } | NodeKind::Origin => None,
        }
    }

    /// Whether every node can reach every other over tree links.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &l in &self.adjacency[n] {
                if self.links[l].class != LinkClass::Tree {
                    continue;
                }
                let o = self.links[l].other(NodeId(n as u32)).0 as usize;
                if !seen[o] {
                    seen[o] = true;
                    stack.push(o);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Creates an empty shared network owned by `owner`.
    pub fn create_shared_network(&mut self, owner: TenantId) -> Result<NetworkId, TopologyError> {
        self.vlan_of(owner)?;
        let id = NetworkId(self.shared.keys().next_back().map_or(0, |n| n.0 + 1));
        self.shared.insert(
            id,
            SharedNetwork {
                id,
                owner,
                granted: BTreeSet::new(),
                attached: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    /// RBAC-style grant; idempotent.
    pub fn grant_network_access(
        &mut self,
        network: NetworkId,
        grantor: TenantId,
        grantee: TenantId,
    ) -> Result<(), TopologyError> {
        self.vlan_of(grantee)?;
        let net = self
            .shared
            .get_mut(&network)
            .ok_or(TopologyError::UnknownNetwork(network))?;
        if net.owner != grantor {
            return Err(TopologyError::NotOwner {
                network,
                tenant: grantor,
            });
        }
        if grantee != net.owner {
            net.granted.insert(grantee);
        }
        Ok(())
    }

    /// Gives `cache` an interface on the shared network, wired into its
    /// host's integration bridge.
    pub fn attach_cache(
        &mut self,
        network: NetworkId,
        cache: CacheId,
    ) -> Result<(), TopologyError> {
        let placement = self.cache(cache)?;
        let net = self
            .shared
            .get_mut(&network)
            .ok_or(TopologyError::UnknownNetwork(network))?;
        if !net.admits(placement.tenant) {
            return Err(TopologyError::NotGranted {
                network,
                tenant: placement.tenant,
            });
        }
        if !net.attached.insert(cache) {
            return Err(TopologyError::AlreadyAttached { network, cache });
        }
        let int = self.hosts[placement.host].integration_bridge;
        let p = self.params.intra_host;
        self.add_link(
            placement.node,
            int,
            p,
            LinkKind::IntraHost,
            LinkClass::SharedPort(network),
        );
        Ok(())
    }

    fn endpoint_admitted(&self, n: NodeId, scope: FlowScope) -> Result<bool, TopologyError> {
        let kind = self.node_kind(n).ok_or(TopologyError::UnknownNode(n))?;
        Ok(match scope {
            FlowScope::Unisolated => true,
            FlowScope::Vlan(v) => {
                let tenant = self
                    .tenant_of_vlan(v)
                    .ok_or(TopologyError::UnknownVlan(v))?;
                self.node_tenant(n).is_none_or(|t| t == tenant)
            }
            FlowScope::Shared(net) => {
                let net = self.shared_network(net)?;
                matches!(kind, NodeKind::Cache(c) if net.attached.contains(&c))
            }
        })
    }

    fn link_usable(&self, link: &Link, scope: FlowScope) -> bool {
        match scope {
            FlowScope::Vlan(_) | FlowScope::Unisolated => link.class == LinkClass::Tree,
            FlowScope::Shared(net) => {
                matches!(link.kind, LinkKind::IntraHost | LinkKind::InterHost)
                    && match link.class {
                        LinkClass::SharedPort(n) => n == net,
                        LinkClass::Tree | LinkClass::HostShortcut => true,
                    }
                    // a shared flow may enter or leave a cache only through its shared port
                    && ![link.endpoints.0, link.endpoints.1].iter().any(|&e| {
                        matches!(self.node_kind(e), Some(NodeKind::Cache(_)))
                            && link.class == LinkClass::Tree
                    })
            }
        }
    }

    /// Path from `src` to `dst` inside the given isolation domain.
    ///
    /// Tree flows have a unique path; shared flows pick the lowest-latency
    /// route (ties broken by hop count, then link order).
    pub fn compute_path(
        &self,
        src: NodeId,
        dst: NodeId,
        scope: FlowScope,
    ) -> Result<PathResult, TopologyError> {
        let no_path = TopologyError::NoPath { src, dst };
        if !self.endpoint_admitted(src, scope)? || !self.endpoint_admitted(dst, scope)? {
            return Err(no_path);
        }
        if src == dst {
            return Ok(self.assemble(&[]));
        }
        let n = self.nodes.len();
        let mut best: Vec<Option<(u64, u32)>> = vec![None; n];
        let mut via: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        best[src.0 as usize] = Some((0, 0));
        heap.push(Reverse((0u64, 0u32, src.0)));
        while let Some(Reverse((d, hops, u))) = heap.pop() {
            if best[u as usize] != Some((d, hops)) {
                continue;
            }
            if u == dst.0 {
                break;
            }
            // only switches forward traffic
            if u != src.0 && !matches!(self.nodes[u as usize].kind, NodeKind::Switch { .. }) {
                continue;
            }
            for &l in &self.adjacency[u as usize] {
                let link = &self.links[l];
                if !self.link_usable(link, scope) {
                    continue;
                }
                let v = link.other(NodeId(u)).0 as usize;
                let cand = (d + link.latency.as_nanos(), hops + 1);
                if best[v].is_none_or(|b| cand < b) {
                    best[v] = Some(cand);
                    via[v] = Some(l);
                    heap.push(Reverse((cand.0, cand.1, v as u32)));
                }
            }
        }
        if best[dst.0 as usize].is_none() {
            return Err(no_path);
        }
        let mut seq = Vec::new();
        let mut cur = dst;
        while cur != src {
            let l = via[cur.0 as usize].ok_or(no_path.clone())?;
            seq.push(l);
            cur = self.links[l].other(cur);
        }
        seq.reverse();
        Ok(self.assemble_from(src, &seq))
    }

    fn assemble(&self, links: &[usize]) -> PathResult {
        PathResult {
            links: links.to_vec(),
            latency: SimDuration::ZERO,
            vi_traversals: 0,
            switches: 0,
            bandwidths: Vec::new(),
            kinds: Vec::new(),
        }
    }

    fn assemble_from(&self, src: NodeId, links: &[usize]) -> PathResult {
        let mut out = self.assemble(links);
        let mut cur = src;
        for (i, &l) in links.iter().enumerate() {
            let link = &self.links[l];
            out.latency += link.latency;
            out.bandwidths.push(link.bandwidth);
            out.kinds.push(link.kind);
            cur = link.other(cur);
            if i + 1 < links.len() {
                if let NodeKind::Switch { kind, .. } = self.nodes[cur.0 as usize].kind {
                    out.switches += 1;
                    if kind == SwitchKind::ExternalBridge {
                        out.vi_traversals += 1;
                    }
                }
            }
        }
        out.latency += self.switch_delay.saturating_mul(out.switches as u64);
        out
    }

    /// Intermediate nodes of a path, in order.
    pub fn path_nodes(&self, src: NodeId, path: &PathResult) -> Vec<NodeId> {
        let mut cur = src;
        let mut out = Vec::new();
        for &l in &path.links {
            cur = self.links[l].other(cur);
            out.push(cur);
        }
        out.pop();
        out
    }
}
