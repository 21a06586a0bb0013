//! Sibling relationships between caches of different tenants: link setup
//! over a shared network, per-direction credentials, the cache-side input
//! filter, ICP-style availability queries, class-2 delay pools and the
//! byte accounting that lets each side watch the link's symmetry.

use alloc::collections::{BTreeMap, BTreeSet};
use core::fmt;
use core::hash::{Hash, Hasher};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use siphasher::sip::SipHasher13;
use thiserror::Error;

use crate::cache::{CacheStore, ContentId};
use crate::ids::{CacheId, NetworkId};
use crate::time::{SimDuration, SimTime};
use crate::topology::{MicroDcTopology, TopologyError};

/// Opaque credential a cache presents to its sibling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuthToken(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Port(pub u16);

impl Port {
    pub const ICP: Port = Port(3130);
    pub const FETCH: Port = Port(3128);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Allow,
    Drop,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Allow => "allow",
            Verdict::Drop => "drop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "allow" => Some(Verdict::Allow),
            "drop" => Some(Verdict::Drop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeeringError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{0} and {1} belong to the same tenant; peering is between tenants")]
    SameTenant(CacheId, CacheId),
    #[error("cache {cache} is not attached to {network}")]
    NotAttached { network: NetworkId, cache: CacheId },
    #[error("cache {0} is not an endpoint of this link")]
    NotOnLink(CacheId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkState {
    Proposed,
    Active,
    Revoked,
}

/// Per-side counters; "peer" is the other end of the link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeeringAccounting {
    pub bytes_served_to_peer: u64,
    pub bytes_fetched_from_peer: u64,
    pub queries_sent: u64,
    pub queries_received: u64,
    pub hits_returned: u64,
    pub misses_returned: u64,
}

impl PeeringAccounting {
    pub fn merge(&mut self, other: &PeeringAccounting) {
        self.bytes_served_to_peer += other.bytes_served_to_peer;
        self.bytes_fetched_from_peer += other.bytes_fetched_from_peer;
        self.queries_sent += other.queries_sent;
        self.queries_received += other.queries_received;
        self.hits_returned += other.hits_returned;
        self.misses_returned += other.misses_returned;
    }
}

/// A ratio that may have a zero denominator. Serialized as a number or the
/// string `"undefined"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ratio {
    Defined(f64),
    Undefined,
}

impl Ratio {
    pub fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio::Undefined
        } else {
            Ratio::Defined(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Defined(v) => Some(v),
            Ratio::Undefined => None,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Defined(v) => write!(f, "{v}"),
            Ratio::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Defined(v) => s.serialize_f64(*v),
            Ratio::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Ratio;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"undefined\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<Ratio, E> {
                Ok(Ratio::Defined(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Ratio, E> {
                Ok(Ratio::Defined(v as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Ratio, E> {
                Ok(Ratio::Defined(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Ratio, E> {
                if v == "undefined" {
                    Ok(Ratio::Undefined)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Served over fetched bytes; `Undefined` when nothing was fetched.
pub fn symmetry_ratio(acc: &PeeringAccounting) -> Ratio {
    Ratio::of(
        acc.bytes_served_to_peer as f64,
        acc.bytes_fetched_from_peer as f64,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcpKind {
    Query,
    Hit,
    Miss,
}

impl IcpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IcpKind::Query => "query",
            IcpKind::Hit => "hit",
            IcpKind::Miss => "miss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(IcpKind::Query),
            "hit" => Some(IcpKind::Hit),
            "miss" => Some(IcpKind::Miss),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcpMessage {
    pub kind: IcpKind,
    pub request_id: u64,
    pub content: ContentId,
    pub sender: CacheId,
    pub token: AuthToken,
}

/// A sibling link between two caches on one shared network.
#[derive(Clone, Debug)]
pub struct PeeringLink {
    pub caches: (CacheId, CacheId),
    pub network: NetworkId,
    /// `tokens[0]` is presented by `caches.0`, `tokens[1]` by `caches.1`.
    pub tokens: [AuthToken; 2],
    pub state: LinkState,
    accounting: [PeeringAccounting; 2],
    answered: BTreeMap<(CacheId, u64), IcpKind>,
}

fn derive_token(seed: u64, from: CacheId, to: CacheId, network: NetworkId) -> AuthToken {
    let mut h = SipHasher13::new_with_keys(seed, 0x6c6f_6769_6e00_0000);
    (from, to, network).hash(&mut h);
    AuthToken(h.finish())
}

/// Activates a link between two caches already attached to `network`.
/// Credentials are derived from `seed`.
pub fn establish_peering(
    topology: &MicroDcTopology,
    a: CacheId,
    b: CacheId,
    network: NetworkId,
    seed: u64,
) -> Result<PeeringLink, PeeringError> {
    let pa = topology.cache(a)?;
    let pb = topology.cache(b)?;
    if a == b || pa.tenant == pb.tenant {
        return Err(PeeringError::SameTenant(a, b));
    }
    let net = topology.shared_network(network)?;
    for c in [a, b] {
        if !net.attached.contains(&c) {
            return Err(PeeringError::NotAttached { network, cache: c });
        }
    }
    Ok(PeeringLink {
        caches: (a, b),
        network,
        tokens: [
            derive_token(seed, a, b, network),
            derive_token(seed, b, a, network),
        ],
        state: LinkState::Active,
        accounting: [PeeringAccounting::default(); 2],
        answered: BTreeMap::new(),
    })
}

/// The full tenant-side procedure: `a`'s tenant creates a shared network,
/// grants `b`'s tenant, both caches attach, and the link is activated.
pub fn connect_peers(
    topology: &mut MicroDcTopology,
    a: CacheId,
    b: CacheId,
    seed: u64,
) -> Result<PeeringLink, PeeringError> {
    let ta = topology.cache(a)?.tenant;
    let tb = topology.cache(b)?.tenant;
    if a == b || ta == tb {
        return Err(PeeringError::SameTenant(a, b));
    }
    let net = topology.create_shared_network(ta)?;
    topology.grant_network_access(net, ta, tb)?;
    topology.attach_cache(net, a)?;
    topology.attach_cache(net, b)?;
    establish_peering(topology, a, b, net, seed)
}

impl PeeringLink {
    fn side(&self, cache: CacheId) -> Result<usize, PeeringError> {
        if cache == self.caches.0 {
            Ok(0)
        } else if cache == self.caches.1 {
            Ok(1)
        } else {
            Err(PeeringError::NotOnLink(cache))
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == LinkState::Active
    }

    pub fn involves(&self, cache: CacheId) -> bool {
        self.side(cache).is_ok()
    }

    pub fn peer_of(&self, cache: CacheId) -> Option<CacheId> {
        match self.side(cache) {
            Ok(0) => Some(self.caches.1),
            Ok(_) => Some(self.caches.0),
            Err(_) => None,
        }
    }

    /// The token `cache` presents to its sibling.
    pub fn token_of(&self, cache: CacheId) -> Option<AuthToken> {
        self.side(cache).ok().map(|s| self.tokens[s])
    }

    pub fn accounting(&self, cache: CacheId) -> Option<&PeeringAccounting> {
        self.side(cache).ok().map(|s| &self.accounting[s])
    }

    pub fn revoke(&mut self) {
        self.state = LinkState::Revoked;
    }

    pub fn record_query_sent(&mut self, sender: CacheId) -> Result<(), PeeringError> {
        let s = self.side(sender)?;
        self.accounting[s].queries_sent += 1;
        Ok(())
    }

    /// Books a completed transfer on both sides.
    pub fn record_transfer(&mut self, serving: CacheId, bytes: u64) -> Result<(), PeeringError> {
        let s = self.side(serving)?;
        self.accounting[s].bytes_served_to_peer += bytes;
        self.accounting[1 - s].bytes_fetched_from_peer += bytes;
        Ok(())
    }

    /// Answers an availability query addressed to `receiver`.
    ///
    /// The probe does not promote the entry. A replayed query (same sender
    /// and request id) gets the original answer and is not counted again.
    pub fn icp_handle_query(
        &mut self,
        receiver: CacheId,
        store: &CacheStore,
        msg: &IcpMessage,
    ) -> Result<IcpMessage, PeeringError> {
        let side = self.side(receiver)?;
        let key = (msg.sender, msg.request_id);
        let kind = match self.answered.get(&key) {
            Some(&k) => k,
            None => {
                let kind = if store.contains(&msg.content) {
                    IcpKind::Hit
                } else {
                    IcpKind::Miss
                };
                let acc = &mut self.accounting[side];
                acc.queries_received += 1;
                match kind {
                    IcpKind::Hit => acc.hits_returned += 1,
                    _ => acc.misses_returned += 1,
                }
                self.answered.insert(key, kind);
                kind
            }
        };
        Ok(IcpMessage {
            kind,
            request_id: msg.request_id,
            content: msg.content,
            sender: receiver,
            token: self.tokens[side],
        })
    }
}

/// A cache's input filter for peering traffic. Anything not explicitly
/// allowed is dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessRuleSet {
    allowed_sources: BTreeMap<CacheId, AuthToken>,
    allowed_ports: BTreeSet<Port>,
}

impl AccessRuleSet {
    /// Rules for `cache` derived from the active links it takes part in.
    pub fn for_cache<'a>(cache: CacheId, links: impl IntoIterator<Item = &'a PeeringLink>) -> Self {
        let mut rules = Self::default();
        for link in links.into_iter().filter(|l| l.is_active()) {
            if let (Some(peer), true) = (link.peer_of(cache), link.involves(cache)) {
                rules
                    .allowed_sources
                    .insert(peer, link.token_of(peer).unwrap_or(AuthToken(0)));
            }
        }
        if !rules.allowed_sources.is_empty() {
            rules.allowed_ports.insert(Port::ICP);
            rules.allowed_ports.insert(Port::FETCH);
        }
        rules
    }

    pub fn allowed_sources(&self) -> impl Iterator<Item = CacheId> + '_ {
        self.allowed_sources.keys().copied()
    }

    pub fn acl_check(&self, sender: CacheId, port: Port, token: AuthToken) -> Verdict {
        match self.allowed_sources.get(&sender) {
            Some(&t) if t == token && self.allowed_ports.contains(&port) => Verdict::Allow,
            _ => Verdict::Drop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketParams {
    /// Bytes.
    pub capacity: u64,
    /// Bytes per second.
    pub rate: u64,
}

const SCALE: u128 = 1_000_000_000;

/// Token bucket with exact integer refill. The level is kept in
/// byte-nanoseconds so a rate in bytes/second refills exactly per
/// nanosecond of simulated time.
#[derive(Clone, Debug)]
pub struct TokenBucket {
    params: BucketParams,
    level: u128,
    last: SimTime,
}

impl TokenBucket {
    /// A full bucket.
    pub fn new(params: BucketParams, now: SimTime) -> Self {
        Self {
            params,
            level: params.capacity as u128 * SCALE,
            last: now,
        }
    }

    pub fn params(&self) -> BucketParams {
        self.params
    }

    /// Current level in whole bytes (rounded down).
    pub fn level_bytes(&self) -> u64 {
        (self.level / SCALE) as u64
    }

    pub fn refill(&mut self, now: SimTime) {
        let dt = now.saturating_since(self.last).as_nanos() as u128;
        let cap = self.params.capacity as u128 * SCALE;
        self.level = (self.level + dt * self.params.rate as u128).min(cap);
        self.last = self.last.max(now);
    }

    /// Time until the bucket holds `bytes`, assuming it was just refilled.
    fn wait_for(&self, bytes: u64) -> SimDuration {
        let need = bytes as u128 * SCALE;
        if self.level >= need || self.params.rate == 0 {
            return SimDuration::ZERO;
        }
        SimDuration::from_nanos((need - self.level).div_ceil(self.params.rate as u128) as u64)
    }

    fn debit(&mut self, bytes: u64) {
        self.level = self.level.saturating_sub(bytes as u128 * SCALE);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayPoolParams {
    pub aggregate: BucketParams,
    pub individual: BucketParams,
}

/// Two-level limiter: one aggregate bucket for the shared network and one
/// bucket per requesting sibling. Admissions are served in FIFO order.
#[derive(Clone, Debug)]
pub struct DelayPool {
    params: DelayPoolParams,
    aggregate: TokenBucket,
    individual: BTreeMap<CacheId, TokenBucket>,
    tail: SimTime,
}

impl DelayPool {
    pub fn new(params: DelayPoolParams, now: SimTime) -> Self {
        Self {
            params,
            aggregate: TokenBucket::new(params.aggregate, now),
            individual: BTreeMap::new(),
            tail: now,
        }
    }

    pub fn params(&self) -> DelayPoolParams {
        self.params
    }

    pub fn aggregate_level(&self) -> u64 {
        self.aggregate.level_bytes()
    }

    pub fn individual_level(&self, peer: CacheId) -> Option<u64> {
        self.individual.get(&peer).map(TokenBucket::level_bytes)
    }

    /// Schedules `bytes` for `peer` and returns the time the last byte is
    /// admitted. Requests larger than a bucket are admitted in
    /// bucket-sized chunks; nothing is ever refused.
    pub fn admit(&mut self, peer: CacheId, bytes: u64, now: SimTime) -> SimTime {
        let ind_params = self.params.individual;
        let start = self.tail;
        let ind = self
            .individual
            .entry(peer)
            .or_insert_with(|| TokenBucket::new(ind_params, start));
        let chunk_max = self
            .aggregate
            .params
            .capacity
            .min(ind.params.capacity)
            .max(1);
        let mut t = now.max(self.tail);
        let mut remaining = bytes;
        while remaining > 0 {
            let chunk = remaining.min(chunk_max);
            self.aggregate.refill(t);
            ind.refill(t);
            t += self.aggregate.wait_for(chunk).max(ind.wait_for(chunk));
            self.aggregate.refill(t);
            ind.refill(t);
            self.aggregate.debit(chunk);
            ind.debit(chunk);
            remaining -= chunk;
        }
        self.tail = t;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerFetchError {
    #[error("fetch from {0} dropped by the serving cache's access rules")]
    Dropped(CacheId),
    #[error("object was evicted after the availability reply")]
    EvictedSinceHit,
    #[error("peering link is not active")]
    Inactive,
}

/// A transfer accepted by the serving cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferGrant {
    pub content: ContentId,
    pub bytes: u64,
    pub admit_at: SimTime,
}

/// Serving side of a content fetch: filter, presence check with recency
/// promotion, and delay-pool admission. Byte counters move only when the
/// caller reports completion through [`PeeringLink::record_transfer`].
#[allow(clippy::too_many_arguments)]
pub fn peer_fetch(
    link: &PeeringLink,
    rules: &AccessRuleSet,
    serving_store: &mut CacheStore,
    pool: Option<&mut DelayPool>,
    requester: CacheId,
    token: AuthToken,
    id: &ContentId,
    now: SimTime,
) -> Result<TransferGrant, PeerFetchError> {
    if rules.acl_check(requester, Port::FETCH, token) == Verdict::Drop {
        return Err(PeerFetchError::Dropped(requester));
    }
    if !link.is_active() {
        return Err(PeerFetchError::Inactive);
    }
    let Some(bytes) = serving_store.size_of(id) else {
        return Err(PeerFetchError::EvictedSinceHit);
    };
    serving_store.lookup(id, now);
    let admit_at = match pool {
        Some(p) => p.admit(requester, bytes, now),
        None => now,
    };
    Ok(TransferGrant {
        content: *id,
        bytes,
        admit_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::ContentObject;
    use crate::ids::{TenantId, VlanId};
    use crate::topology::{FabricParams, TopologyBuilder};
    use alloc::vec;
    use alloc::vec::Vec;
    use std::collections::VecDeque;

    fn topo() -> MicroDcTopology {
        let mut b = TopologyBuilder::new(FabricParams::default());
        b.tenant(TenantId(0), VlanId(10))
            .tenant(TenantId(1), VlanId(11))
            .tenant(TenantId(2), VlanId(12));
        let h = b.host();
        b.cache(CacheId(0), TenantId(0), h)
            .cache(CacheId(1), TenantId(1), h)
            .cache(CacheId(2), TenantId(2), h)
            .cache(CacheId(3), TenantId(0), h);
        b.build().unwrap()
    }

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn full_setup_activates() {
        let mut tp = topo();
        let link = connect_peers(&mut tp, CacheId(0), CacheId(1), 7).unwrap();
        assert!(link.is_active());
        assert_ne!(link.tokens[0], link.tokens[1]);
        assert_eq!(
            link.accounting(CacheId(0)),
            Some(&PeeringAccounting::default())
        );
    }

    #[test]
    fn missing_grant_is_reported() {
        let mut tp = topo();
        let net = tp.create_shared_network(TenantId(0)).unwrap();
        tp.attach_cache(net, CacheId(0)).unwrap();
        let err = tp.attach_cache(net, CacheId(1)).unwrap_err();
        assert_eq!(
            err,
            TopologyError::NotGranted {
                network: net,
                tenant: TenantId(1)
            }
        );
        assert_eq!(
            establish_peering(&tp, CacheId(0), CacheId(1), net, 1).unwrap_err(),
            PeeringError::NotAttached {
                network: net,
                cache: CacheId(1)
            }
        );
    }

    #[test]
    fn same_tenant_rejected() {
        let mut tp = topo();
        assert_eq!(
            connect_peers(&mut tp, CacheId(0), CacheId(0), 1).unwrap_err(),
            PeeringError::SameTenant(CacheId(0), CacheId(0))
        );
        assert_eq!(
            connect_peers(&mut tp, CacheId(0), CacheId(3), 1).unwrap_err(),
            PeeringError::SameTenant(CacheId(0), CacheId(3))
        );
    }

    #[test]
    fn acl() {
        let mut tp = topo();
        let link = connect_peers(&mut tp, CacheId(0), CacheId(1), 7).unwrap();
        let rules = AccessRuleSet::for_cache(CacheId(0), [&link]);
        let good = link.token_of(CacheId(1)).unwrap();
        assert_eq!(rules.acl_check(CacheId(1), Port::ICP, good), Verdict::Allow);
        assert_eq!(
            rules.acl_check(CacheId(1), Port::FETCH, good),
            Verdict::Allow
        );
        assert_eq!(rules.acl_check(CacheId(1), Port(80), good), Verdict::Drop);
        assert_eq!(rules.acl_check(CacheId(2), Port::ICP, good), Verdict::Drop);
        assert_eq!(
            rules.acl_check(CacheId(1), Port::ICP, AuthToken(good.0 ^ 1)),
            Verdict::Drop
        );
        // a cache's own token is not accepted from the peer
        assert_eq!(
            rules.acl_check(CacheId(1), Port::ICP, link.token_of(CacheId(0)).unwrap()),
            Verdict::Drop
        );
        let lone = AccessRuleSet::for_cache(CacheId(2), [&link]);
        assert_eq!(lone.acl_check(CacheId(1), Port::ICP, good), Verdict::Drop);
    }

    fn store_with(keys: &[u64]) -> CacheStore {
        let mut s = CacheStore::new(1_000_000);
        for &k in keys {
            s.insert(
                &ContentObject {
                    id: ContentId::new(k, 0),
                    size: 10_000,
                    cacheable: true,
                },
                t(0.0),
            )
            .unwrap();
        }
        s
    }

    fn query(link: &PeeringLink, id: u64, key: u64) -> IcpMessage {
        IcpMessage {
            kind: IcpKind::Query,
            request_id: id,
            content: ContentId::new(key, 0),
            sender: CacheId(0),
            token: link.token_of(CacheId(0)).unwrap(),
        }
    }

    #[test]
    fn icp_replies() {
        let mut tp = topo();
        let mut link = connect_peers(&mut tp, CacheId(0), CacheId(1), 7).unwrap();
        let store = store_with(&[1, 2]);
        let before: Vec<_> = store.iter_lru().copied().collect();
        let hit = link
            .icp_handle_query(CacheId(1), &store, &query(&link, 9, 1))
            .unwrap();
        assert_eq!((hit.kind, hit.request_id), (IcpKind::Hit, 9));
        let miss = link
            .icp_handle_query(CacheId(1), &store, &query(&link, 10, 5))
            .unwrap();
        assert_eq!(miss.kind, IcpKind::Miss);
        let after: Vec<_> = store.iter_lru().copied().collect();
        assert_eq!(before, after);
        let acc = link.accounting(CacheId(1)).unwrap();
        assert_eq!(
            (acc.queries_received, acc.hits_returned, acc.misses_returned),
            (2, 1, 1)
        );
    }

    #[test]
    fn duplicate_query_counted_once() {
        let mut tp = topo();
        let mut link = connect_peers(&mut tp, CacheId(0), CacheId(1), 7).unwrap();
        let mut store = store_with(&[1]);
        let q = query(&link, 3, 1);
        let first = link.icp_handle_query(CacheId(1), &store, &q).unwrap();
        // state changes between deliveries do not alter the replayed answer
        store
            .insert(
                &ContentObject {
                    id: ContentId::new(99, 0),
                    size: 999_000,
                    cacheable: true,
                },
                t(1.0),
            )
            .unwrap();
        store
            .insert(
                &ContentObject {
                    id: ContentId::new(98, 0),
                    size: 999_000,
                    cacheable: true,
                },
                t(1.0),
            )
            .unwrap();
        let second = link.icp_handle_query(CacheId(1), &store, &q).unwrap();
        assert_eq!(first, second);
        assert_eq!(link.accounting(CacheId(1)).unwrap().queries_received, 1);
    }

    #[test]
    fn fetch_paths() {
        let mut tp = topo();
        let mut link = connect_peers(&mut tp, CacheId(0), CacheId(1), 7).unwrap();
        let rules = AccessRuleSet::for_cache(CacheId(1), [&link]);
        let mut store = store_with(&[1]);
        let tok = link.token_of(CacheId(0)).unwrap();
        let g = peer_fetch(
            &link,
            &rules,
            &mut store,
            None,
            CacheId(0),
            tok,
            &ContentId::new(1, 0),
            t(1.0),
        )
        .unwrap();
        assert_eq!((g.bytes, g.admit_at), (10_000, t(1.0)));
        link.record_transfer(CacheId(1), g.bytes).unwrap();
        assert_eq!(
            link.accounting(CacheId(1)).unwrap().bytes_served_to_peer,
            10_000
        );
        assert_eq!(
            link.accounting(CacheId(0)).unwrap().bytes_fetched_from_peer,
            10_000
        );

        let gone = peer_fetch(
            &link,
            &rules,
            &mut store,
            None,
            CacheId(0),
            tok,
            &ContentId::new(2, 0),
            t(1.0),
        );
        assert_eq!(gone, Err(PeerFetchError::EvictedSinceHit));
        let rogue = peer_fetch(
            &link,
            &rules,
            &mut store,
            None,
            CacheId(2),
            tok,
            &ContentId::new(1, 0),
            t(1.0),
        );
        assert_eq!(rogue, Err(PeerFetchError::Dropped(CacheId(2))));
        assert_eq!(
            link.accounting(CacheId(1)).unwrap().bytes_served_to_peer,
            10_000
        );
    }

    #[test]
    fn symmetry() {
        let mut acc = PeeringAccounting::default();
        assert_eq!(symmetry_ratio(&acc), Ratio::Undefined);
        acc.bytes_served_to_peer = 1_000_000;
        acc.bytes_fetched_from_peer = 1_000_000;
        assert_eq!(symmetry_ratio(&acc), Ratio::Defined(1.0));
    }

    fn pool() -> DelayPool {
        DelayPool::new(
            DelayPoolParams {
                aggregate: BucketParams {
                    capacity: 8000,
                    rate: 1000,
                },
                individual: BucketParams {
                    capacity: 4000,
                    rate: 500,
                },
            },
            SimTime::ZERO,
        )
    }

    #[test]
    fn admit_immediately_when_full() {
        let mut p = pool();
        assert_eq!(p.admit(CacheId(1), 500, SimTime::ZERO), SimTime::ZERO);
    }

    #[test]
    fn individual_bucket_binds_after_drain() {
        let mut p = pool();
        assert_eq!(p.admit(CacheId(1), 4000, SimTime::ZERO), SimTime::ZERO);
        assert_eq!(p.admit(CacheId(2), 4000, SimTime::ZERO), SimTime::ZERO);
        assert_eq!(p.aggregate_level(), 0);
        assert_eq!(p.individual_level(CacheId(1)), Some(0));
        // aggregate alone would allow it at 1.0 s; individual at 500 B/s needs 2.0 s
        assert_eq!(p.admit(CacheId(1), 1000, SimTime::ZERO), t(2.0));
    }

    #[test]
    fn oversized_requests_are_chunked() {
        let mut p = pool();
        // 4000 now, then 4000 more at 500 B/s
        assert_eq!(p.admit(CacheId(1), 8000, SimTime::ZERO), t(8.0));
    }

    /// Fixed-step simulation of the same FIFO two-bucket pool.
    fn stepped_oracle(params: DelayPoolParams, sizes: &[u64], horizon_ms: u64) -> Vec<u64> {
        let (mut agg, mut ind) = (
            params.aggregate.capacity as f64,
            params.individual.capacity as f64,
        );
        let mut queue: VecDeque<u64> = sizes.iter().copied().collect();
        let mut admitted = vec![0u64; horizon_ms as usize + 1];
        let mut total = 0;
        for ms in 0..=horizon_ms {
            if ms > 0 {
                agg = (agg + params.aggregate.rate as f64 / 1000.0)
                    .min(params.aggregate.capacity as f64);
                ind = (ind + params.individual.rate as f64 / 1000.0)
                    .min(params.individual.capacity as f64);
            }
            while let Some(&s) = queue.front() {
                if agg + 1e-9 >= s as f64 && ind + 1e-9 >= s as f64 {
                    agg -= s as f64;
                    ind -= s as f64;
                    total += s;
                    queue.pop_front();
                } else {
                    break;
                }
            }
            admitted[ms as usize] = total;
        }
        admitted
    }

    #[test]
    fn matches_stepped_oracle_under_saturation() {
        let params = pool().params();
        let sizes = vec![700u64; 200];
        let oracle = stepped_oracle(params, &sizes, 100_000);
        let mut p = pool();
        let mut admits = Vec::new();
        for &s in &sizes {
            admits.push(p.admit(CacheId(1), s, SimTime::ZERO));
        }
        for ms in (0..=100_000u64).step_by(250) {
            let now = SimTime::from_nanos(ms * 1_000_000);
            let ours: u64 = admits
                .iter()
                .zip(&sizes)
                .filter(|(a, _)| **a <= now)
                .map(|(_, s)| s)
                .sum();
            let diff = ours.abs_diff(oracle[ms as usize]);
            assert!(
                diff <= 700,
                "t={ms}ms ours={ours} oracle={}",
                oracle[ms as usize]
            );
            assert!(ours <= 4000 + 500 * ms / 1000 + 1);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shaping_bounds(
                reqs in proptest::collection::vec((0u32..3, 1u64..3000, 0u64..2_000), 1..200),
            ) {
                let params = DelayPoolParams {
                    aggregate: BucketParams { capacity: 6000, rate: 1500 },
                    individual: BucketParams { capacity: 3000, rate: 600 },
                };
                let mut p = DelayPool::new(params, SimTime::ZERO);
                let mut now = SimTime::ZERO;
                let mut grants = Vec::new();
                let mut last = SimTime::ZERO;
                for (peer, bytes, gap_ms) in reqs {
                    now += SimDuration::from_millis(gap_ms);
                    let at = p.admit(CacheId(peer), bytes, now);
                    prop_assert!(at >= now);
                    prop_assert!(at >= last, "fifo");
                    last = at;
                    grants.push((peer, bytes, at));
                }
                for &(_, _, horizon) in &grants {
                    let secs = horizon.as_secs_f64();
                    let total: u64 = grants.iter().filter(|g| g.2 <= horizon).map(|g| g.1).sum();
                    prop_assert!(total as f64 <= 6000.0 + 1500.0 * secs + 1.0);
                    for peer in 0..3 {
                        let mine: u64 = grants.iter().filter(|g| g.0 == peer && g.2 <= horizon).map(|g| g.1).sum();
                        prop_assert!(mine as f64 <= 3000.0 + 600.0 * secs + 1.0);
                    }
                }
                prop_assert!(p.aggregate_level() <= 6000);
            }
        }
    }
}
