//! Per-tenant flow tables on the integration bridge, and the offline
//! derivation of bypass rules from cache access logs.
//!
//! A destination is considered miss-prone when, among its recent log
//! records, the share of misses that could never have paid off reaches a
//! threshold. Those misses are local misses of non-cacheable responses and
//! local misses of objects that were not hit again later in the window.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cache::{AccessLog, ContentId, Outcome};
use crate::ids::{DestinationId, TenantId};
use crate::peering::Ratio;
use crate::time::{SimDuration, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleAction {
    Intercept,
    Bypass,
}

impl RuleAction {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleAction::Intercept => "intercept",
            RuleAction::Bypass => "bypass",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "intercept" => Some(RuleAction::Intercept),
            "bypass" => Some(RuleAction::Bypass),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub destination: DestinationId,
    pub action: RuleAction,
    pub priority: u32,
}

/// Priority given to derived bypass rules.
pub const DERIVED_RULE_PRIORITY: u32 = 100;

/// One rule per destination; unmatched traffic is intercepted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub tenant: TenantId,
    rules: BTreeMap<DestinationId, FlowRule>,
}

impl RuleTable {
    pub fn new(tenant: TenantId) -> Self {
        Self {
            tenant,
            rules: BTreeMap::new(),
        }
    }

    /// Installs `rule`, replacing any rule for the same destination.
    pub fn install(&mut self, rule: FlowRule) -> Option<FlowRule> {
        self.rules.insert(rule.destination, rule)
    }

    pub fn remove(&mut self, destination: DestinationId) -> Option<FlowRule> {
        self.rules.remove(&destination)
    }

    pub fn get(&self, destination: DestinationId) -> Option<&FlowRule> {
        self.rules.get(&destination)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules by descending priority, then destination.
    pub fn rules(&self) -> Vec<FlowRule> {
        let mut out: Vec<FlowRule> = self.rules.values().copied().collect();
        out.sort_by(|a, b| {
            b.priority
                .cmp(&a.priority)
                .then(a.destination.cmp(&b.destination))
        });
        out
    }

    pub fn bypassed(&self) -> BTreeSet<DestinationId> {
        self.rules
            .values()
            .filter(|r| r.action == RuleAction::Bypass)
            .map(|r| r.destination)
            .collect()
    }

    pub fn rule_match(&self, destination: DestinationId) -> RuleAction {
        self.rules
            .get(&destination)
            .map_or(RuleAction::Intercept, |r| r.action)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissPredictorConfig {
    pub window: SimDuration,
    pub min_samples: u64,
    pub miss_threshold: f64,
}

impl Default for MissPredictorConfig {
    fn default() -> Self {
        Self {
            window: SimDuration::from_secs(300),
            min_samples: 10,
            miss_threshold: 0.8,
        }
    }
}

/// Per-destination tallies over the derivation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DestinationStats {
    pub samples: u64,
    pub uncacheable_misses: u64,
    pub unrepeated_misses: u64,
}

impl DestinationStats {
    pub fn miss_ratio(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            (self.uncacheable_misses + self.unrepeated_misses) as f64 / self.samples as f64
        }
    }
}

/// Tallies the records inside `[now - window, now]`.
pub fn destination_stats(
    log: &AccessLog,
    window: SimDuration,
    now: SimTime,
) -> BTreeMap<DestinationId, DestinationStats> {
    let start = SimTime::from_nanos(now.as_nanos().saturating_sub(window.as_nanos()));
    let records: Vec<_> = log
        .records()
        .iter()
        .filter(|r| r.time >= start && r.time <= now && r.outcome != Outcome::Bypassed)
        .collect();

    // index of the last local hit per object, to answer "hit again later?"
    let mut last_hit: BTreeMap<ContentId, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.outcome == Outcome::Hit {
            last_hit.insert(r.content, i);
        }
    }

    let mut stats: BTreeMap<DestinationId, DestinationStats> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let s = stats.entry(r.content.destination).or_default();
        s.samples += 1;
        if r.outcome != Outcome::LocalMiss {
            continue;
        }
        if !r.cacheable {
            s.uncacheable_misses += 1;
        } else if last_hit.get(&r.content).is_none_or(|&h| h < i) {
            s.unrepeated_misses += 1;
        }
    }
    stats
}

/// Builds a bypass table for the destinations whose miss ratio reaches the
/// threshold. Destinations with too few samples are left to the default.
pub fn derive_rules(
    tenant: TenantId,
    log: &AccessLog,
    cfg: &MissPredictorConfig,
    now: SimTime,
) -> RuleTable {
    let mut table = RuleTable::new(tenant);
    for (dest, s) in destination_stats(log, cfg.window, now) {
        if s.samples >= cfg.min_samples.max(1) && s.miss_ratio() >= cfg.miss_threshold {
            table.install(FlowRule {
                destination: dest,
                action: RuleAction::Bypass,
                priority: DERIVED_RULE_PRIORITY,
            });
        }
    }
    table
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub requests: u64,
    pub bypassed: u64,
    /// Bypassed requests that the cache would not have answered.
    pub true_positive_bypass: u64,
    /// Share of bypassed requests that would have been answered by the cache.
    pub false_bypass: Ratio,
    pub intercepted: u64,
    pub intercept_hits: u64,
    pub intercept_hit_rate: Ratio,
    pub footprint_rule_count: usize,
}

/// Replays a holdout log against `table`. The holdout's own outcomes say
/// what the cache would have done for each request.
pub fn evaluate_rules(table: &RuleTable, holdout: &AccessLog) -> AccuracyReport {
    let mut r = AccuracyReport {
        requests: 0,
        bypassed: 0,
        true_positive_bypass: 0,
        false_bypass: Ratio::Undefined,
        intercepted: 0,
        intercept_hits: 0,
        intercept_hit_rate: Ratio::Undefined,
        footprint_rule_count: table.len(),
    };
    let mut false_bypass = 0u64;
    for rec in holdout
        .records()
        .iter()
        .filter(|r| r.outcome != Outcome::Bypassed)
    {
        r.requests += 1;
        let cache_answers = rec.outcome.served_by_cache();
        match table.rule_match(rec.content.destination) {
            RuleAction::Bypass => {
                r.bypassed += 1;
                if cache_answers {
                    false_bypass += 1;
                } else {
                    r.true_positive_bypass += 1;
                }
            }
            RuleAction::Intercept => {
                r.intercepted += 1;
                if cache_answers {
                    r.intercept_hits += 1;
                }
            }
        }
    }
    r.false_bypass = if r.bypassed == 0 {
        Ratio::Defined(0.0)
    } else {
        Ratio::of(false_bypass as f64, r.bypassed as f64)
    };
    r.intercept_hit_rate = Ratio::of(r.intercept_hits as f64, r.intercepted as f64);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::AccessLogRecord;
    use alloc::vec;

    fn rec(ms: u64, key: u64, dest: u32, outcome: Outcome, cacheable: bool) -> AccessLogRecord {
        AccessLogRecord {
            time: SimTime::from_nanos(ms * 1_000_000),
            content: ContentId::new(key, dest),
            outcome,
            cacheable,
        }
    }

    fn cfg(theta: f64, min: u64) -> MissPredictorConfig {
        MissPredictorConfig {
            window: SimDuration::from_secs(1000),
            min_samples: min,
            miss_threshold: theta,
        }
    }

    /// Independent one-pass tally: a miss counts if non-cacheable or if no
    /// later record of the same object in the log is a hit.
    fn oracle_ratio(records: &[AccessLogRecord], dest: u32) -> (u64, f64) {
        let mine: Vec<_> = records
            .iter()
            .filter(|r| r.content.destination.0 == dest)
            .collect();
        let prone = mine
            .iter()
            .enumerate()
            .filter(|(i, r)| {
                r.outcome == Outcome::LocalMiss
                    && (!r.cacheable
                        || !mine[i + 1..]
                            .iter()
                            .any(|o| o.content == r.content && o.outcome == Outcome::Hit))
            })
            .count();
        (mine.len() as u64, prone as f64 / mine.len() as f64)
    }

    #[test]
    fn empty_table_intercepts() {
        assert_eq!(
            RuleTable::new(TenantId(0)).rule_match(DestinationId(4)),
            RuleAction::Intercept
        );
    }

    #[test]
    fn rules_match_independently() {
        let mut t = RuleTable::new(TenantId(0));
        t.install(FlowRule {
            destination: DestinationId(1),
            action: RuleAction::Bypass,
            priority: 5,
        });
        t.install(FlowRule {
            destination: DestinationId(2),
            action: RuleAction::Intercept,
            priority: 9,
        });
        assert_eq!(t.rule_match(DestinationId(1)), RuleAction::Bypass);
        assert_eq!(t.rule_match(DestinationId(2)), RuleAction::Intercept);
        assert_eq!(t.rule_match(DestinationId(3)), RuleAction::Intercept);
        assert_eq!(t.rules()[0].destination, DestinationId(2));
        t.install(FlowRule {
            destination: DestinationId(1),
            action: RuleAction::Intercept,
            priority: 1,
        });
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn fully_personalized_destination_is_bypassed() {
        let records: Vec<_> = (0..100)
            .map(|i| rec(i, i, 7, Outcome::LocalMiss, false))
            .collect();
        let (n, ratio) = oracle_ratio(&records, 7);
        assert_eq!((n, ratio), (100, 1.0));
        let log = AccessLog::from_records(records).unwrap();
        let t = derive_rules(
            TenantId(0),
            &log,
            &cfg(0.8, 10),
            SimTime::from_secs_f64(1.0),
        );
        assert_eq!(
            t.bypassed().into_iter().collect::<Vec<_>>(),
            [DestinationId(7)]
        );
    }

    #[test]
    fn always_hit_destination_is_not_bypassed() {
        let records: Vec<_> = (0..100).map(|i| rec(i, 1, 3, Outcome::Hit, true)).collect();
        let log = AccessLog::from_records(records).unwrap();
        assert!(derive_rules(
            TenantId(0),
            &log,
            &cfg(0.8, 10),
            SimTime::from_secs_f64(1.0)
        )
        .is_empty());
    }

    #[test]
    fn too_few_samples() {
        let records: Vec<_> = (0..5)
            .map(|i| rec(i, i, 7, Outcome::LocalMiss, false))
            .collect();
        let log = AccessLog::from_records(records).unwrap();
        assert!(derive_rules(
            TenantId(0),
            &log,
            &cfg(0.8, 10),
            SimTime::from_secs_f64(1.0)
        )
        .is_empty());
    }

    #[test]
    fn window_excludes_old_records() {
        let mut records: Vec<_> = (0..50)
            .map(|i| rec(i, i, 7, Outcome::LocalMiss, false))
            .collect();
        records.extend((0..50).map(|i| rec(10_000 + i, 1, 7, Outcome::Hit, true)));
        let log = AccessLog::from_records(records).unwrap();
        let c = MissPredictorConfig {
            window: SimDuration::from_secs(5),
            ..cfg(0.5, 10)
        };
        assert!(derive_rules(TenantId(0), &log, &c, SimTime::from_secs_f64(10.05)).is_empty());
        let c = MissPredictorConfig {
            window: SimDuration::from_secs(100),
            ..cfg(0.5, 10)
        };
        assert_eq!(
            derive_rules(TenantId(0), &log, &c, SimTime::from_secs_f64(10.05)).len(),
            1
        );
    }

    #[test]
    fn unrepeated_cacheable_misses_count() {
        // one-hit wonders: cacheable, never seen again
        let mut records: Vec<_> = (0..20)
            .map(|i| rec(i, 1000 + i, 2, Outcome::LocalMiss, true))
            .collect();
        // a missed object that is hit later does not count
        records.push(rec(20, 5, 2, Outcome::LocalMiss, true));
        records.push(rec(21, 5, 2, Outcome::Hit, true));
        let (_, expected) = oracle_ratio(&records, 2);
        let log = AccessLog::from_records(records).unwrap();
        let stats = destination_stats(
            &log,
            SimDuration::from_secs(1000),
            SimTime::from_secs_f64(1.0),
        );
        assert_eq!(stats[&DestinationId(2)].miss_ratio(), expected);
        assert_eq!(expected, 20.0 / 22.0);
    }

    #[test]
    fn unsatisfiable_threshold() {
        let records: Vec<_> = (0..100)
            .map(|i| rec(i, i, 7, Outcome::LocalMiss, false))
            .collect();
        let log = AccessLog::from_records(records).unwrap();
        assert!(derive_rules(
            TenantId(0),
            &log,
            &cfg(1.01, 1),
            SimTime::from_secs_f64(1.0)
        )
        .is_empty());
    }

    #[test]
    fn evaluate_empty_table() {
        let records = vec![
            rec(0, 1, 1, Outcome::LocalMiss, true),
            rec(1, 1, 1, Outcome::Hit, true),
            rec(2, 2, 2, Outcome::PeerHit, true),
            rec(3, 3, 2, Outcome::LocalMiss, false),
        ];
        let log = AccessLog::from_records(records).unwrap();
        let r = evaluate_rules(&RuleTable::new(TenantId(0)), &log);
        assert_eq!(r.false_bypass, Ratio::Defined(0.0));
        assert_eq!(r.intercept_hit_rate, Ratio::Defined(0.5));
        assert_eq!(r.footprint_rule_count, 0);
    }

    #[test]
    fn evaluate_bypass_everything() {
        let log = AccessLog::from_records(vec![
            rec(0, 1, 1, Outcome::Hit, true),
            rec(1, 2, 2, Outcome::LocalMiss, false),
        ])
        .unwrap();
        let mut t = RuleTable::new(TenantId(0));
        for d in [1, 2] {
            t.install(FlowRule {
                destination: DestinationId(d),
                action: RuleAction::Bypass,
                priority: 1,
            });
        }
        let r = evaluate_rules(&t, &log);
        assert_eq!(r.intercept_hit_rate, Ratio::Undefined);
        assert_eq!(r.false_bypass, Ratio::Defined(0.5));
        assert_eq!(r.true_positive_bypass, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_log() -> impl Strategy<Value = AccessLog> {
            proptest::collection::vec((0u64..20, 0u32..4, 0u8..3, any::<bool>()), 0..300).prop_map(
                |v| {
                    let records = v
                        .into_iter()
                        .enumerate()
                        .map(|(i, (k, d, o, c))| {
                            let outcome =
                                [Outcome::Hit, Outcome::LocalMiss, Outcome::PeerHit][o as usize];
                            rec(i as u64, k, d, outcome, c)
                        })
                        .collect();
                    AccessLog::from_records(records).unwrap()
                },
            )
        }

        proptest! {
            #[test]
            fn raising_threshold_never_adds_rules(log in arb_log(), lo in 0.0f64..1.0, bump in 0.0f64..0.5, min in 1u64..20) {
                let now = SimTime::from_secs_f64(1.0);
                let a = derive_rules(TenantId(0), &log, &cfg(lo, min), now).bypassed();
                let b = derive_rules(TenantId(0), &log, &cfg(lo + bump, min), now).bypassed();
                prop_assert!(b.is_subset(&a));
                prop_assert_eq!(&a, &derive_rules(TenantId(0), &log, &cfg(lo, min), now).bypassed());
            }

            #[test]
            fn matches_one_pass_oracle(log in arb_log(), theta in 0.0f64..1.0) {
                let now = SimTime::from_secs_f64(1.0);
                let table = derive_rules(TenantId(0), &log, &cfg(theta, 1), now);
                for d in 0..4u32 {
                    let (n, ratio) = if log.records().iter().any(|r| r.content.destination.0 == d) {
                        oracle_ratio(log.records(), d)
                    } else {
                        (0, 0.0)
                    };
                    let expect = n >= 1 && ratio >= theta;
                    prop_assert_eq!(table.rule_match(DestinationId(d)) == RuleAction::Bypass, expect);
                }
            }
        }
    }
}
