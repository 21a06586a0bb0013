//! Discrete-event engine for one scenario run.
//!
//! Events are ordered by `(time, sequence)`, the sequence being assigned
//! when the event is scheduled. Randomness comes only from the per-tenant
//! ChaCha8 streams of [`crate::workload`], so a scenario and a seed fully
//! determine the output.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{
    AccessLog, AccessLogRecord, CacheDigest, CacheStore, ContentId, ContentObject, Lookup, Outcome,
};
use crate::config::{Issue, PeerSelection, ScenarioConfig};
use crate::ids::{CacheId, DestinationId, TenantId};
use crate::interception::{
    derive_rules, destination_stats, FlowRule, RuleAction, RuleTable, DERIVED_RULE_PRIORITY,
};
use crate::peering::{
    connect_peers, peer_fetch, AccessRuleSet, AuthToken, DelayPool, IcpKind, IcpMessage,
    PeerFetchError, PeeringAccounting, PeeringError, PeeringLink, Port, Verdict,
};
use crate::report::{
    CacheReport, Counters, LinkReport, MetricsReport, Sample, ServedBy, TenantMetrics,
};
use crate::time::{SimDuration, SimTime};
use crate::topology::{FlowScope, PathResult, TopologyError};
use crate::workload::Workload;

/// Priority of rules given in the scenario; above derived ones.
pub const STATIC_RULE_PRIORITY: u32 = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("scenario is invalid ({} issue(s))", .0.len())]
    ConfigInvalid(Vec<Issue>),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Peering(#[from] PeeringError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub tenant: TenantId,
    pub content: ContentId,
    pub size: u64,
    pub cacheable: bool,
    pub issued_at: SimTime,
    pub completed_at: SimTime,
    pub served_by: ServedBy,
    /// The sibling that served it, for `served_by == Peer`.
    pub peer: Option<CacheId>,
    pub vi_traversals: u32,
}

impl RequestRecord {
    pub fn latency(&self) -> SimDuration {
        self.completed_at.saturating_since(self.issued_at)
    }
}

/// One availability query or reply as seen by its receiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcpTraceRecord {
    pub time: SimTime,
    pub kind: IcpKind,
    pub request_id: u64,
    pub sender: CacheId,
    pub receiver: CacheId,
    pub content: ContentId,
    pub verdict: Verdict,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: MetricsReport,
    /// Ordered by request id, which is issue order.
    pub requests: Vec<RequestRecord>,
    pub icp_trace: Vec<IcpTraceRecord>,
    pub access_logs: BTreeMap<CacheId, AccessLog>,
    pub rules: BTreeMap<TenantId, RuleTable>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Route {
    Link(usize),
    Rogue(usize),
}

#[derive(Clone, Copy, Debug)]
enum EventKind {
    RequestArrival {
        tenant: usize,
    },
    CacheArrival {
        req: usize,
    },
    IcpDelivery {
        req: usize,
        attempt: u32,
        route: Route,
        duplicate: bool,
    },
    IcpReply {
        req: usize,
        attempt: u32,
        kind: IcpKind,
    },
    IcpTimeout {
        req: usize,
        attempt: u32,
    },
    FetchArrival {
        req: usize,
        attempt: u32,
        route: Route,
    },
    FetchFailed {
        req: usize,
        attempt: u32,
    },
    PoolAdmission {
        req: usize,
        bytes: u64,
    },
    TransferCompletion {
        req: usize,
        bytes: u64,
    },
    OriginResponse {
        req: usize,
    },
    DigestRebuild,
    RuleDerivation {
        tenant: usize,
    },
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    AtCache,
    AwaitingReply { route: Route, digest_hit: bool },
    Fetching { route: Route },
    Origin,
    Done,
}

struct Pending {
    tenant: usize,
    cache: usize,
    obj: ContentObject,
    issued_at: SimTime,
    candidates: VecDeque<Route>,
    attempt: u32,
    phase: Phase,
}

/// Precomputed one-way legs between a cache and its sibling.
struct RouteInfo {
    from: usize,
    to: usize,
    path: PathResult,
    timeout: SimDuration,
}

struct CacheState {
    id: CacheId,
    tenant: TenantId,
    store: CacheStore,
    log: AccessLog,
    rules: AccessRuleSet,
    digest: Option<CacheDigest>,
    pool: Option<DelayPool>,
    processing: SimDuration,
    offload: bool,
    /// Links and rogue routes this cache originates, in scenario order.
    routes: Vec<Route>,
    to_user: PathResult,
    to_origin: PathResult,
    from_origin: PathResult,
}

struct TenantState {
    id: TenantId,
    workload: Workload,
    cache: Option<usize>,
    rules: RuleTable,
    user_to_cache: Option<PathResult>,
    user_to_origin: PathResult,
    origin_to_user: PathResult,
    rule_lookups: u64,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    tenants: Vec<TenantState>,
    caches: Vec<CacheState>,
    links: Vec<PeeringLink>,
    /// Per link, the route from `caches.0` and from `caches.1`.
    link_routes: Vec<[RouteInfo; 2]>,
    rogue_routes: Vec<RouteInfo>,
    rogue_tokens: Vec<AuthToken>,
    pending: Vec<Pending>,
    records: Vec<Option<RequestRecord>>,
    rule_lookup: Vec<bool>,
    icp_trace: Vec<IcpTraceRecord>,
    counters: Counters,
    end: SimTime,
}

/// Runs a scenario to completion. Arrivals stop at the configured duration;
/// requests already issued are carried through to delivery.
pub fn run(cfg: &ScenarioConfig) -> Result<SimOutput, SimError> {
    let issues = cfg.validate();
    if ScenarioConfig::has_errors(&issues) {
        return Err(SimError::ConfigInvalid(issues));
    }
    let mut engine = Engine::new(cfg)?;
    engine.start();
    while let Some(Reverse(ev)) = engine.queue.pop() {
        engine.now = ev.time;
        engine.counters.events += 1;
        engine.dispatch(ev.kind);
    }
    Ok(engine.finish())
}

fn icp_timeout(cfg: &ScenarioConfig, path: &PathResult) -> SimDuration {
    match cfg.peering.icp_timeout_ms {
        Some(ms) => SimDuration::from_millis_f64(ms),
        None => path
            .latency
            .saturating_mul(8)
            .max(SimDuration::from_millis(1)),
    }
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, SimError> {
        let mut topo = cfg.build_topology()?;
        let cache_index: BTreeMap<CacheId, usize> = cfg
            .caches
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();

        let mut links = Vec::new();
        for l in &cfg.peering.links {
            links.push(connect_peers(&mut topo, l.a, l.b, cfg.seed)?);
        }

        let origin = topo.origin();
        let mut caches = Vec::new();
        for c in &cfg.caches {
            let node = topo.cache(c.id)?.node;
            let vlan = topo.vlan_of(c.tenant)?;
            let users = topo.users(c.tenant)?;
            let scope = FlowScope::Vlan(vlan);
            let pool = cfg
                .peering
                .delay_pools
                .iter()
                .find(|p| p.cache == c.id)
                .map(|p| DelayPool::new(p.params(), SimTime::ZERO));
            caches.push(CacheState {
                id: c.id,
                tenant: c.tenant,
                store: CacheStore::new(c.capacity_bytes),
                log: AccessLog::new(),
                rules: AccessRuleSet::for_cache(c.id, &links),
                digest: None,
                pool,
                processing: SimDuration::from_millis_f64(c.processing_delay_ms),
                offload: cfg.peering.offload.contains(&c.id),
                routes: Vec::new(),
                to_user: topo.compute_path(node, users, scope)?,
                to_origin: topo.compute_path(node, origin, scope)?,
                from_origin: topo.compute_path(origin, node, scope)?,
            });
        }

        let mut link_routes = Vec::new();
        for (li, link) in links.iter().enumerate() {
            let (a, b) = (cache_index[&link.caches.0], cache_index[&link.caches.1]);
            let (na, nb) = (
                topo.cache(link.caches.0)?.node,
                topo.cache(link.caches.1)?.node,
            );
            let scope = FlowScope::Shared(link.network);
            let ab = topo.compute_path(na, nb, scope)?;
            let ba = topo.compute_path(nb, na, scope)?;
            caches[a].routes.push(Route::Link(li));
            caches[b].routes.push(Route::Link(li));
            link_routes.push([
                RouteInfo {
                    from: a,
                    to: b,
                    timeout: icp_timeout(cfg, &ab),
                    path: ab,
                },
                RouteInfo {
                    from: b,
                    to: a,
                    timeout: icp_timeout(cfg, &ba),
                    path: ba,
                },
            ]);
        }

        let mut rogue_routes = Vec::new();
        let mut rogue_tokens = Vec::new();
        for (ri, r) in cfg.peering.rogue.iter().enumerate() {
            let (from, to) = (cache_index[&r.from], cache_index[&r.to]);
            let path = topo.compute_path(
                topo.cache(r.from)?.node,
                topo.cache(r.to)?.node,
                FlowScope::Unisolated,
            )?;
            // rogue queries go out before any legitimate ones
            let pos = caches[from]
                .routes
                .iter()
                .take_while(|r| matches!(r, Route::Rogue(_)))
                .count();
            caches[from].routes.insert(pos, Route::Rogue(ri));
            rogue_tokens.push(AuthToken(cfg.seed ^ 0xbad0_bad0_bad0_bad0 ^ ri as u64));
            rogue_routes.push(RouteInfo {
                from,
                to,
                timeout: icp_timeout(cfg, &path),
                path,
            });
        }

        let mut tenants = Vec::new();
        for t in &cfg.tenants {
            let peer_catalog = t
                .workload
                .overlap
                .and_then(|o| cfg.tenants.iter().find(|p| p.id == o.peer))
                .map(|p| p.workload.catalog_size);
            let vlan = topo.vlan_of(t.id)?;
            let users = topo.users(t.id)?;
            let scope = FlowScope::Vlan(vlan);
            let cache = t.cache.map(|c| cache_index[&c]);
            let user_to_cache = match t.cache {
                Some(c) => Some(topo.compute_path(users, topo.cache(c)?.node, scope)?),
                None => None,
            };
            let mut rules = RuleTable::new(t.id);
            for r in cfg
                .interception
                .static_rules
                .iter()
                .filter(|r| r.tenant == t.id)
            {
                rules.install(FlowRule {
                    destination: r.destination,
                    action: r.action,
                    priority: STATIC_RULE_PRIORITY,
                });
            }
            tenants.push(TenantState {
                id: t.id,
                workload: Workload::new(t.id, &t.workload, peer_catalog, cfg.seed),
                cache,
                rules,
                user_to_cache,
                user_to_origin: topo.compute_path(users, origin, scope)?,
                origin_to_user: topo.compute_path(origin, users, scope)?,
                rule_lookups: 0,
            });
        }

        Ok(Engine {
            cfg,
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            tenants,
            caches,
            links,
            link_routes,
            rogue_routes,
            rogue_tokens,
            pending: Vec::new(),
            records: Vec::new(),
            rule_lookup: Vec::new(),
            icp_trace: Vec::new(),
            counters: Counters::default(),
            end: SimTime::from_secs_f64(cfg.duration_s),
        })
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time: at,
            seq,
            kind,
        }));
    }

    fn start(&mut self) {
        if self.end == SimTime::ZERO {
            return;
        }
        if !self.links.is_empty() && self.cfg.peering.selection == PeerSelection::Digest {
            self.schedule(SimTime::ZERO, EventKind::DigestRebuild);
        }
        for i in 0..self.tenants.len() {
            self.schedule_arrival(i, SimTime::ZERO);
        }
        if self.cfg.interception.derive {
            let period = SimDuration::from_secs_f64(self.cfg.interception.period_s);
            for i in 0..self.tenants.len() {
                if self.tenants[i].cache.is_some() && SimTime::ZERO + period < self.end {
                    self.schedule(
                        SimTime::ZERO + period,
                        EventKind::RuleDerivation { tenant: i },
                    );
                }
            }
        }
    }

    fn schedule_arrival(&mut self, tenant: usize, from: SimTime) {
        if let Some(gap) = self.tenants[tenant].workload.next_gap() {
            let at = from + gap;
            if at < self.end {
                self.schedule(at, EventKind::RequestArrival { tenant });
            }
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::RequestArrival { tenant } => self.on_arrival(tenant),
            EventKind::CacheArrival { req } => self.on_cache_arrival(req),
            EventKind::IcpDelivery {
                req,
                attempt,
                route,
                duplicate,
            } => self.on_icp_delivery(req, attempt, route, duplicate),
            EventKind::IcpReply { req, attempt, kind } => self.on_icp_reply(req, attempt, kind),
            EventKind::IcpTimeout { req, attempt } => self.on_icp_timeout(req, attempt),
            EventKind::FetchArrival {
                req,
                attempt,
                route,
            } => self.on_fetch_arrival(req, attempt, route),
            EventKind::FetchFailed { req, attempt } => {
                if self.pending[req].attempt == attempt
                    && matches!(self.pending[req].phase, Phase::Fetching { .. })
                {
                    self.go_to_origin(req, self.now);
                }
            }
            EventKind::PoolAdmission { req, bytes } => self.on_pool_admission(req, bytes),
            EventKind::TransferCompletion { req, bytes } => self.on_transfer_completion(req, bytes),
            EventKind::OriginResponse { req } => self.on_origin_response(req),
            EventKind::DigestRebuild => self.on_digest_rebuild(),
            EventKind::RuleDerivation { tenant } => self.on_rule_derivation(tenant),
        }
    }

    fn on_arrival(&mut self, tenant: usize) {
        self.counters.request_arrivals += 1;
        let now = self.now;
        let obj = self.tenants[tenant]
            .workload
            .sample_request(&self.cfg.objects);
        self.schedule_arrival(tenant, now);

        let req = self.pending.len();
        self.records.push(None);
        let t = &mut self.tenants[tenant];
        let intercept = match t.cache {
            Some(_) => {
                t.rule_lookups += 1;
                t.rules.rule_match(obj.id.destination) == RuleAction::Intercept
            }
            None => false,
        };
        self.rule_lookup.push(t.cache.is_some());
        self.pending.push(Pending {
            tenant,
            cache: t.cache.unwrap_or(usize::MAX),
            obj,
            issued_at: now,
            candidates: VecDeque::new(),
            attempt: 0,
            phase: Phase::AtCache,
        });

        if intercept {
            let at = now
                + t.user_to_cache
                    .as_ref()
                    .map_or(SimDuration::ZERO, |p| p.latency);
            self.schedule(at, EventKind::CacheArrival { req });
        } else {
            let done = now + t.user_to_origin.latency + t.origin_to_user.transfer_latency(obj.size);
            let vi = t.user_to_origin.vi_traversals + t.origin_to_user.vi_traversals;
            self.complete(req, done, ServedBy::OriginBypassed, None, vi);
        }
    }

    fn on_cache_arrival(&mut self, req: usize) {
        let now = self.now;
        let p = &self.pending[req];
        let ci = p.cache;
        let obj = p.obj;
        let ready = now + self.caches[ci].processing;
        if self.caches[ci].store.lookup(&obj.id, now) == Lookup::Hit {
            self.log(ci, obj, Outcome::Hit);
            let done = ready + self.caches[ci].to_user.transfer_latency(obj.size);
            let vi = self.edge_vi(req);
            self.complete(req, done, ServedBy::Local, None, vi);
            return;
        }
        let candidates = self.candidates(ci, &obj.id);
        self.pending[req].candidates = candidates;
        self.try_next(req, ready);
    }

    /// Sibling routes worth asking about `id`, in order.
    fn candidates(&self, ci: usize, id: &ContentId) -> VecDeque<Route> {
        let cache = &self.caches[ci];
        let mut out = VecDeque::new();
        for &r in &cache.routes {
            match r {
                Route::Rogue(_) => out.push_back(r),
                Route::Link(li) => {
                    if !self.links[li].is_active() {
                        continue;
                    }
                    let peer = self.route(r, ci).to;
                    let ask = cache.offload
                        || self.cfg.peering.selection == PeerSelection::AlwaysIcp
                        || self.caches[peer]
                            .digest
                            .as_ref()
                            .is_some_and(|d| d.contains(id));
                    if ask {
                        out.push_back(r);
                    }
                }
            }
        }
        out
    }

    fn route(&self, r: Route, from: usize) -> &RouteInfo {
        match r {
            Route::Link(li) => {
                let pair = &self.link_routes[li];
                if pair[0].from == from {
                    &pair[0]
                } else {
                    &pair[1]
                }
            }
            Route::Rogue(ri) => &self.rogue_routes[ri],
        }
    }

    fn token(&self, r: Route, from: usize) -> AuthToken {
        match r {
            Route::Link(li) => self.links[li]
                .token_of(self.caches[from].id)
                .unwrap_or(AuthToken(0)),
            Route::Rogue(ri) => self.rogue_tokens[ri],
        }
    }

    fn try_next(&mut self, req: usize, at: SimTime) {
        let ci = self.pending[req].cache;
        let Some(route) = self.pending[req].candidates.pop_front() else {
            self.go_to_origin(req, at);
            return;
        };
        let p = &mut self.pending[req];
        p.attempt += 1;
        let attempt = p.attempt;
        let digest_hit = matches!(route, Route::Link(_))
            && self.cfg.peering.selection == PeerSelection::Digest
            && !self.caches[ci].offload;
        p.phase = Phase::AwaitingReply { route, digest_hit };
        if let Route::Link(li) = route {
            let _ = self.links[li].record_query_sent(self.caches[ci].id);
        }
        self.counters.icp_queries_sent += 1;
        let info = self.route(route, ci);
        let (latency, timeout) = (info.path.latency, info.timeout);
        self.schedule(
            at + latency,
            EventKind::IcpDelivery {
                req,
                attempt,
                route,
                duplicate: false,
            },
        );
        if self.cfg.faults.duplicate_icp {
            self.schedule(
                at + latency,
                EventKind::IcpDelivery {
                    req,
                    attempt,
                    route,
                    duplicate: true,
                },
            );
        }
        if let Route::Rogue(_) = route {
            // a rogue sibling does not wait for an answer before fetching
            self.schedule(
                at + latency,
                EventKind::FetchArrival {
                    req,
                    attempt,
                    route,
                },
            );
        }
        self.schedule(at + timeout, EventKind::IcpTimeout { req, attempt });
    }

    fn current_route(&self, req: usize) -> Option<Route> {
        match self.pending[req].phase {
            Phase::AwaitingReply { route, .. } | Phase::Fetching { route } => Some(route),
            _ => None,
        }
    }

    /// The receiver answers even if the requester has moved on meanwhile.
    fn on_icp_delivery(&mut self, req: usize, attempt: u32, route: Route, duplicate: bool) {
        if duplicate {
            self.counters.icp_duplicate_deliveries += 1;
        }
        let p = &self.pending[req];
        let ci = p.cache;
        let info = self.route(route, ci);
        let (to, back) = (info.to, info.path.latency);
        let sender = self.caches[ci].id;
        let token = self.token(route, ci);
        let content = p.obj.id;
        let mut verdict = self.caches[to].rules.acl_check(sender, Port::ICP, token);
        let link = match route {
            Route::Link(li) if self.links[li].is_active() => Some(li),
            _ => None,
        };
        if link.is_none() {
            verdict = Verdict::Drop;
        }
        self.icp_trace.push(IcpTraceRecord {
            time: self.now,
            kind: IcpKind::Query,
            request_id: req as u64,
            sender,
            receiver: self.caches[to].id,
            content,
            verdict,
        });
        let (Verdict::Allow, Some(li)) = (verdict, link) else {
            self.counters.acl_drops += 1;
            return;
        };
        let msg = IcpMessage {
            kind: IcpKind::Query,
            request_id: req as u64,
            content,
            sender,
            token,
        };
        let receiver = self.caches[to].id;
        let reply = match self.links[li].icp_handle_query(receiver, &self.caches[to].store, &msg) {
            Ok(r) => r,
            Err(_) => return,
        };
        self.schedule(
            self.now + back,
            EventKind::IcpReply {
                req,
                attempt,
                kind: reply.kind,
            },
        );
    }

    fn on_icp_reply(&mut self, req: usize, attempt: u32, kind: IcpKind) {
        let p = &self.pending[req];
        let Phase::AwaitingReply { route, digest_hit } = p.phase else {
            self.counters.icp_stale_replies += 1;
            return;
        };
        if p.attempt != attempt {
            self.counters.icp_stale_replies += 1;
            return;
        }
        let ci = p.cache;
        let info = self.route(route, ci);
        let (to, latency) = (info.to, info.path.latency);
        self.icp_trace.push(IcpTraceRecord {
            time: self.now,
            kind,
            request_id: req as u64,
            sender: self.caches[to].id,
            receiver: self.caches[ci].id,
            content: p.obj.id,
            verdict: Verdict::Allow,
        });
        match kind {
            IcpKind::Hit => {
                self.pending[req].phase = Phase::Fetching { route };
                self.schedule(
                    self.now + latency,
                    EventKind::FetchArrival {
                        req,
                        attempt,
                        route,
                    },
                );
            }
            _ => {
                if digest_hit {
                    self.counters.digest_false_hits += 1;
                }
                self.try_next(req, self.now);
            }
        }
    }

    fn on_icp_timeout(&mut self, req: usize, attempt: u32) {
        let p = &self.pending[req];
        if p.attempt == attempt && matches!(p.phase, Phase::AwaitingReply { .. }) {
            self.counters.icp_timeouts += 1;
            self.try_next(req, self.now);
        }
    }

    fn on_fetch_arrival(&mut self, req: usize, attempt: u32, route: Route) {
        let p = &self.pending[req];
        let ci = p.cache;
        let id = p.obj.id;
        let info = self.route(route, ci);
        let (to, back) = (info.to, info.path.latency);
        let requester = self.caches[ci].id;
        let token = self.token(route, ci);
        let li = match route {
            Route::Link(li) => li,
            Route::Rogue(_) => {
                // no agreement, so nothing to serve under; the filter decides
                // what is counted
                let _ = self.caches[to]
                    .rules
                    .acl_check(requester, Port::FETCH, token);
                self.counters.acl_drops += 1;
                return;
            }
        };
        if self.pending[req].attempt != attempt
            || self.pending[req].phase != (Phase::Fetching { route })
        {
            return;
        }
        let now = self.now;
        let serving = &mut self.caches[to];
        let result = peer_fetch(
            &self.links[li],
            &serving.rules,
            &mut serving.store,
            serving.pool.as_mut(),
            requester,
            token,
            &id,
            now,
        );
        match result {
            Ok(grant) => self.schedule(
                grant.admit_at,
                EventKind::PoolAdmission {
                    req,
                    bytes: grant.bytes,
                },
            ),
            Err(PeerFetchError::Dropped(_)) => self.counters.acl_drops += 1,
            Err(PeerFetchError::EvictedSinceHit) | Err(PeerFetchError::Inactive) => {
                self.counters.evicted_since_hit += 1;
                self.schedule(now + back, EventKind::FetchFailed { req, attempt });
            }
        }
    }

    fn on_pool_admission(&mut self, req: usize, bytes: u64) {
        let ci = self.pending[req].cache;
        let Some(route) = self.current_route(req) else {
            return;
        };
        let info = self.route(route, ci);
        let done = self.now + self.caches[info.to].processing + info.path.transfer_latency(bytes);
        self.schedule(done, EventKind::TransferCompletion { req, bytes });
    }

    fn on_transfer_completion(&mut self, req: usize, bytes: u64) {
        let ci = self.pending[req].cache;
        let Some(route) = self.current_route(req) else {
            return;
        };
        let info = self.route(route, ci);
        let (to, shared_vi) = (info.to, 2 * info.path.vi_traversals);
        let serving = self.caches[to].id;
        if let Route::Link(li) = route {
            let _ = self.links[li].record_transfer(serving, bytes);
        }
        let obj = self.pending[req].obj;
        let cache = &mut self.caches[ci];
        if self.cfg.peering.read_through && obj.cacheable && !cache.offload {
            let _ = cache.store.insert(&obj, self.now);
        }
        self.log(ci, obj, Outcome::PeerHit);
        let done = self.now + self.caches[ci].to_user.transfer_latency(obj.size);
        let vi = self.edge_vi(req) + shared_vi;
        self.complete(req, done, ServedBy::Peer, Some(serving), vi);
    }

    fn go_to_origin(&mut self, req: usize, at: SimTime) {
        let p = &mut self.pending[req];
        p.phase = Phase::Origin;
        let c = &self.caches[p.cache];
        let done = at + c.to_origin.latency + c.from_origin.transfer_latency(p.obj.size);
        self.schedule(done, EventKind::OriginResponse { req });
    }

    fn on_origin_response(&mut self, req: usize) {
        let p = &self.pending[req];
        let (ci, obj) = (p.cache, p.obj);
        if obj.cacheable {
            let _ = self.caches[ci].store.insert(&obj, self.now);
        }
        self.log(ci, obj, Outcome::LocalMiss);
        let c = &self.caches[ci];
        let done = self.now + c.to_user.transfer_latency(obj.size);
        let vi = self.edge_vi(req) + c.to_origin.vi_traversals + c.from_origin.vi_traversals;
        self.complete(req, done, ServedBy::Origin, None, vi);
    }

    /// Traversals of the user-to-cache and cache-to-user legs.
    fn edge_vi(&self, req: usize) -> u32 {
        let p = &self.pending[req];
        let t = &self.tenants[p.tenant];
        t.user_to_cache.as_ref().map_or(0, |x| x.vi_traversals)
            + self.caches[p.cache].to_user.vi_traversals
    }

    fn log(&mut self, ci: usize, obj: ContentObject, outcome: Outcome) {
        let rec = AccessLogRecord {
            time: self.now,
            content: obj.id,
            outcome,
            cacheable: obj.cacheable,
        };
        // events are processed in time order, so appends never regress
        let _ = self.caches[ci].log.append(rec);
    }

    fn complete(
        &mut self,
        req: usize,
        at: SimTime,
        served_by: ServedBy,
        peer: Option<CacheId>,
        vi: u32,
    ) {
        let p = &mut self.pending[req];
        debug_assert!(p.phase != Phase::Done, "request {req} delivered twice");
        p.phase = Phase::Done;
        p.candidates.clear();
        self.counters.deliveries += 1;
        self.records[req] = Some(RequestRecord {
            id: req as u64,
            tenant: self.tenants[p.tenant].id,
            content: p.obj.id,
            size: p.obj.size,
            cacheable: p.obj.cacheable,
            issued_at: p.issued_at,
            completed_at: at,
            served_by,
            peer,
            vi_traversals: vi,
        });
    }

    fn on_digest_rebuild(&mut self) {
        self.counters.digest_rebuilds += 1;
        let params = self.cfg.peering.digest;
        let generation = self.counters.digest_rebuilds;
        for c in &mut self.caches {
            let bits = params
                .bits
                .unwrap_or_else(|| params.bits_for(c.store.len()));
            let mut d = CacheDigest::build(
                c.store.iter_lru(),
                bits,
                params.hash_count,
                self.cfg.seed ^ c.id.0 as u64,
            );
            d.generation = generation;
            d.built_at = self.now;
            c.digest = Some(d);
        }
        let next = self.now + SimDuration::from_secs_f64(self.cfg.peering.digest_period_s);
        if next < self.end {
            self.schedule(next, EventKind::DigestRebuild);
        }
    }

    fn on_rule_derivation(&mut self, tenant: usize) {
        self.counters.rule_derivations += 1;
        let Some(ci) = self.tenants[tenant].cache else {
            return;
        };
        let cfg = self.cfg.interception.predictor();
        let log = &self.caches[ci].log;
        let derived = derive_rules(self.tenants[tenant].id, log, &cfg, self.now);
        let stats = destination_stats(log, cfg.window, self.now);
        let table = &mut self.tenants[tenant].rules;
        // a bypassed destination stops producing log records; keep its rule
        // until the window holds enough fresh samples to judge it again
        let stale: Vec<DestinationId> = table
            .rules()
            .into_iter()
            .filter(|r| r.priority == DERIVED_RULE_PRIORITY)
            .map(|r| r.destination)
            .collect();
        let keep: BTreeSet<DestinationId> = stale
            .iter()
            .copied()
            .filter(|d| {
                stats
                    .get(d)
                    .is_none_or(|s| s.samples < cfg.min_samples.max(1))
            })
            .collect();
        for d in stale {
            if !keep.contains(&d) {
                table.remove(d);
            }
        }
        for r in derived.rules() {
            if table
                .get(r.destination)
                .is_none_or(|old| old.priority <= r.priority)
            {
                table.install(r);
            }
        }
        let next = self.now + SimDuration::from_secs_f64(self.cfg.interception.period_s);
        if next < self.end {
            self.schedule(next, EventKind::RuleDerivation { tenant });
        }
    }

    fn finish(self) -> SimOutput {
        let warmup = SimTime::from_secs_f64(self.cfg.warmup_s);
        let requests: Vec<RequestRecord> = self
            .records
            .into_iter()
            .map(|r| r.expect("every request is delivered"))
            .collect();

        let mut per_tenant: BTreeMap<TenantId, Vec<Sample>> =
            self.tenants.iter().map(|t| (t.id, Vec::new())).collect();
        let mut all = Vec::new();
        for (r, &lookup) in requests.iter().zip(&self.rule_lookup) {
            if r.issued_at < warmup {
                continue;
            }
            let s = Sample {
                served_by: r.served_by,
                latency: r.latency(),
                vi_traversals: r.vi_traversals,
                bytes: r.size,
                rule_lookup: lookup,
            };
            per_tenant.entry(r.tenant).or_default().push(s);
            all.push(s);
        }

        let mut cache_reports = Vec::new();
        for c in &self.caches {
            let mut acc = PeeringAccounting::default();
            for l in self.links.iter().filter(|l| l.involves(c.id)) {
                if let Some(a) = l.accounting(c.id) {
                    acc.merge(a);
                }
            }
            let mut rep = CacheReport::new(c.id, c.tenant, acc);
            rep.stored_objects = c.store.len();
            rep.used_bytes = c.store.used_bytes();
            rep.log_records = c.log.len();
            cache_reports.push(rep);
        }
        let links = self
            .links
            .iter()
            .map(|l| {
                let a = *l.accounting(l.caches.0).expect("endpoint");
                let b = *l.accounting(l.caches.1).expect("endpoint");
                LinkReport {
                    a: l.caches.0,
                    b: l.caches.1,
                    network: l.network,
                    a_accounting: a,
                    b_accounting: b,
                    symmetry: crate::peering::Ratio::of(
                        a.bytes_served_to_peer as f64,
                        b.bytes_served_to_peer as f64,
                    ),
                }
            })
            .collect();

        let report = MetricsReport {
            seed: self.cfg.seed,
            duration_s: self.cfg.duration_s,
            warmup_s: self.cfg.warmup_s,
            global: TenantMetrics::from_samples(&all),
            tenants: per_tenant
                .iter()
                .map(|(t, s)| (*t, TenantMetrics::from_samples(s)))
                .collect(),
            caches: cache_reports,
            links,
            counters: self.counters,
        };
        SimOutput {
            report,
            requests,
            icp_trace: self.icp_trace,
            access_logs: self.caches.into_iter().map(|c| (c.id, c.log)).collect(),
            rules: self.tenants.into_iter().map(|t| (t.id, t.rules)).collect(),
        }
    }
}
