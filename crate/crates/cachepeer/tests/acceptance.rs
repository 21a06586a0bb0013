//! Acceptance checks. Runs as a plain binary and prints one PASS/FAIL line
//! per criterion; exits nonzero if any fails.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cachepeer::commands::{compare_runs, report_bytes, Format};
use cachepeer::scenario::parse_json;
use cachepeer::traces::{self, RequestRow};
use cachepeer_core::cache::{
    expected_false_positive_rate, AccessLog, AccessLogRecord, CacheDigest, CacheStore, ContentId,
    ContentObject, Lookup, Outcome,
};
use cachepeer_core::config::{
    CacheSpec, InterceptionSpec, PeerSelection, RogueSpec, ScenarioConfig,
};
use cachepeer_core::ids::{CacheId, DestinationId, TenantId, VlanId};
use cachepeer_core::interception::{derive_rules, evaluate_rules, MissPredictorConfig};
use cachepeer_core::peering::{BucketParams, DelayPool, DelayPoolParams, PeeringAccounting, Ratio};
use cachepeer_core::report::ServedBy;
use cachepeer_core::sim::{self, SimOutput};
use cachepeer_core::time::{SimDuration, SimTime};
use cachepeer_core::workload::Stream;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn savings_scenario() -> ScenarioConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/savings.json");
    parse_json(&fs::read_to_string(p).expect("scenario file")).expect("valid scenario")
}

fn run(cfg: &ScenarioConfig) -> Result<SimOutput, String> {
    sim::run(cfg).map_err(|e| e.to_string())
}

fn traversal_scenario() -> ScenarioConfig {
    let mut c = savings_scenario();
    c.peering.links.clear();
    c.duration_s = 100.0;
    c.warmup_s = 0.0;
    for t in &mut c.tenants {
        t.workload.request_rate = 50.0;
        t.workload.catalog_size = 1000;
    }
    for k in &mut c.caches {
        k.capacity_bytes = 1_000_000;
    }
    c
}

/// Every origin-served cacheable request crosses the external bridge four
/// times, every local hit twice.
fn traversal_anchor() -> Verdict {
    let cfg = traversal_scenario();
    let start = Instant::now();
    let out = run(&cfg)?;
    let elapsed = start.elapsed();
    let (mut origin, mut local) = (0, 0);
    for r in &out.requests {
        match r.served_by {
            ServedBy::Origin if r.cacheable => {
                ensure(r.vi_traversals == 4, || {
                    format!("origin request {} has {} traversals", r.id, r.vi_traversals)
                })?;
                origin += 1;
            }
            ServedBy::Local => {
                ensure(r.vi_traversals == 2, || {
                    format!("local hit {} has {} traversals", r.id, r.vi_traversals)
                })?;
                local += 1;
            }
            other => return Err(format!("unexpected {other:?} without peering")),
        }
    }
    ensure(origin > 0 && local > 0, || "both paths must occur".into())?;
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{} requests: {origin} origin x4, {local} local x2, {elapsed:.2?}",
        out.requests.len()
    ))
}

const PEER_RATIO_REFERENCE: f64 = 0.333;

/// Paired on/off runs with full overlap; peering must win on latency and WAN
/// bytes, and the peer share of misses must sit near its reference value.
fn savings_direction() -> Verdict {
    let start = Instant::now();
    let mut ratios = Vec::new();
    let mut detail = String::new();
    for seed in [1, 2, 3] {
        let mut cfg = savings_scenario();
        cfg.seed = seed;
        let (on, off) = compare_runs(&cfg).map_err(|e| e.to_string())?;
        let (on, off) = (&on.report.global, &off.report.global);
        let (lon, loff) = (
            on.latency_mean_ms.unwrap_or(f64::NAN),
            off.latency_mean_ms.unwrap_or(f64::NAN),
        );
        ensure(lon < loff, || {
            format!("seed {seed}: latency on {lon} >= off {loff}")
        })?;
        ensure(on.wan_bytes < off.wan_bytes, || {
            format!(
                "seed {seed}: WAN on {} >= off {}",
                on.wan_bytes, off.wan_bytes
            )
        })?;
        let ratio = on.peer_resolved_miss_ratio.value().unwrap_or(0.0);
        ensure(ratio > 0.3, || {
            format!("seed {seed}: peer ratio {ratio:.4} <= 0.3")
        })?;
        ensure(
            (ratio - PEER_RATIO_REFERENCE).abs() <= 0.1 * PEER_RATIO_REFERENCE,
            || format!("seed {seed}: peer ratio {ratio:.4} outside ±10% of {PEER_RATIO_REFERENCE}"),
        )?;
        if seed == 1 {
            detail = format!(
                "{} requests, latency {lon:.2} vs {loff:.2} ms, WAN {} vs {} B",
                on.requests, on.wan_bytes, off.wan_bytes
            );
        }
        ratios.push(ratio);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{detail}, peer ratio {ratios:.3?}, {elapsed:.2?}"))
}

/// Brute-force recency list.
struct ListLru {
    capacity: u64,
    items: VecDeque<(ContentId, u64)>,
}

impl ListLru {
    fn lookup(&mut self, id: ContentId) -> bool {
        match self.items.iter().position(|(i, _)| *i == id) {
            Some(p) => {
                let e = self.items.remove(p).unwrap();
                self.items.push_back(e);
                true
            }
            None => false,
        }
    }

    fn insert(&mut self, id: ContentId, size: u64) -> Vec<ContentId> {
        if self.lookup(id) {
            return Vec::new();
        }
        let mut evicted = Vec::new();
        while self.items.iter().map(|e| e.1).sum::<u64>() + size > self.capacity {
            evicted.push(self.items.pop_front().unwrap().0);
        }
        self.items.push_back((id, size));
        evicted
    }
}

fn lru_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = Stream::new(2024, 0);
    let mut store = CacheStore::new(50_000);
    let mut oracle = ListLru {
        capacity: 50_000,
        items: VecDeque::new(),
    };
    let (mut hits, mut evictions) = (0, 0);
    for step in 0..10_000u64 {
        let key = (rng.unit() * 60.0) as u64;
        let id = ContentId::new(key, 0);
        let size = 1_000 + (key * 7919) % 9_000;
        let now = SimTime::from_nanos(step);
        if rng.unit() < 0.5 {
            let a = store.lookup(&id, now) == Lookup::Hit;
            let b = oracle.lookup(id);
            ensure(a == b, || format!("step {step}: lookup {a} vs oracle {b}"))?;
            hits += a as u32;
        } else {
            let a = store
                .insert(
                    &ContentObject {
                        id,
                        size,
                        cacheable: true,
                    },
                    now,
                )
                .map_err(|e| format!("step {step}: {e}"))?;
            let b = oracle.insert(id, size);
            ensure(a == b, || {
                format!("step {step}: evicted {a:?} vs oracle {b:?}")
            })?;
            evictions += a.len();
        }
        let order: Vec<ContentId> = store.iter_lru().copied().collect();
        let expect: Vec<ContentId> = oracle.items.iter().map(|e| e.0).collect();
        ensure(order == expect, || {
            format!("step {step}: recency order differs")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "10000 ops, {hits} hits, {evictions} evictions, {elapsed:.2?}"
    ))
}

fn digest_fpr() -> Verdict {
    let start = Instant::now();
    let (n, m, k) = (1000usize, 9600usize, 7u32);
    let members: Vec<ContentId> = (0..n as u64)
        .map(|i| ContentId::new(i * 3 + 1, (i % 5) as u32))
        .collect();
    let digest = CacheDigest::build(members.iter(), m, k, 99);
    let misses = members.iter().filter(|id| !digest.contains(id)).count();
    ensure(misses == 0, || format!("{misses} false negatives"))?;
    let probes = 100_000u64;
    let fp = (0..probes)
        .filter(|i| digest.contains(&ContentId::new(10_000_000 + i, 0)))
        .count();
    let measured = fp as f64 / probes as f64;
    let expected = expected_false_positive_rate(n, m, k);
    ensure((measured - expected).abs() <= 0.25 * expected, || {
        format!("measured {measured:.5} vs expected {expected:.5}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "fpr {measured:.5} vs (1-e^(-kn/m))^k = {expected:.5}, 0 false negatives, {elapsed:.2?}"
    ))
}

/// FIFO token-bucket pair advanced in 1 ms steps.
fn stepped_pool(
    params: DelayPoolParams,
    requests: &[(CacheId, u64)],
    horizon_ms: u64,
) -> BTreeMap<CacheId, u64> {
    let rate_per_ms = |b: BucketParams| b.rate as f64 / 1000.0;
    let mut agg = params.aggregate.capacity as f64;
    let mut ind: BTreeMap<CacheId, f64> = BTreeMap::new();
    let mut delivered: BTreeMap<CacheId, u64> = BTreeMap::new();
    let mut queue: VecDeque<(CacheId, u64)> = requests.iter().copied().collect();
    for step in 0..=horizon_ms {
        if step > 0 {
            agg = (agg + rate_per_ms(params.aggregate)).min(params.aggregate.capacity as f64);
            for v in ind.values_mut() {
                *v = (*v + rate_per_ms(params.individual)).min(params.individual.capacity as f64);
            }
        }
        while let Some(&(peer, bytes)) = queue.front() {
            let own = ind.entry(peer).or_insert(params.individual.capacity as f64);
            if agg + 1e-9 < bytes as f64 || *own + 1e-9 < bytes as f64 {
                break;
            }
            agg -= bytes as f64;
            *own -= bytes as f64;
            *delivered.entry(peer).or_default() += bytes;
            queue.pop_front();
        }
    }
    delivered
}

fn delay_pool_bound() -> Verdict {
    let start = Instant::now();
    let obj = 10_000u64;
    let params = DelayPoolParams {
        aggregate: BucketParams {
            capacity: 50_000,
            rate: 30_000,
        },
        individual: BucketParams {
            capacity: 20_000,
            rate: 20_000,
        },
    };
    let horizon = SimTime::from_nanos(100_000_000_000);
    // two peers keep the pool saturated for the whole horizon
    let requests: Vec<(CacheId, u64)> = (0..800).map(|i| (CacheId(i % 2), obj)).collect();
    let mut pool = DelayPool::new(params, SimTime::ZERO);
    let mut delivered: BTreeMap<CacheId, u64> = BTreeMap::new();
    for &(peer, bytes) in &requests {
        if pool.admit(peer, bytes, SimTime::ZERO) <= horizon {
            *delivered.entry(peer).or_default() += bytes;
        }
    }
    let secs = 100u64;
    let ind_bound = params.individual.capacity + params.individual.rate * secs;
    let agg_bound = params.aggregate.capacity + params.aggregate.rate * secs;
    let total: u64 = delivered.values().sum();
    for (peer, &b) in &delivered {
        ensure(b <= ind_bound + obj, || {
            format!("{peer}: {b} B exceeds {ind_bound} + {obj}")
        })?;
    }
    ensure(total <= agg_bound + obj, || {
        format!("aggregate {total} B exceeds {agg_bound} + {obj}")
    })?;
    ensure(total + obj >= agg_bound, || {
        format!("aggregate {total} B leaves the pool unsaturated")
    })?;
    let oracle = stepped_pool(params, &requests, secs * 1000);
    for (peer, &b) in &delivered {
        let o = oracle.get(peer).copied().unwrap_or(0);
        ensure(b.abs_diff(o) <= obj, || {
            format!("{peer}: {b} B vs stepped oracle {o} B")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("per-peer {:?} B (bound {ind_bound}+{obj}), aggregate {total} B (bound {agg_bound}+{obj}), oracle {:?}", delivered.values().collect::<Vec<_>>(), oracle.values().collect::<Vec<_>>()))
}

fn rogue_scenario() -> ScenarioConfig {
    let mut c = savings_scenario();
    c.duration_s = 20.0;
    c.warmup_s = 0.0;
    let mut intruder = c.tenants[0].clone();
    intruder.id = TenantId(2);
    intruder.vlan = VlanId(102);
    intruder.cache = Some(CacheId(2));
    intruder.workload.overlap = None;
    c.tenants.push(intruder);
    c.caches.push(CacheSpec {
        id: CacheId(2),
        tenant: TenantId(2),
        host: 0,
        capacity_bytes: 5_000_000,
        processing_delay_ms: 0.5,
    });
    c.peering.rogue = vec![
        RogueSpec {
            from: CacheId(2),
            to: CacheId(0),
        },
        RogueSpec {
            from: CacheId(2),
            to: CacheId(1),
        },
    ];
    c
}

fn isolation_and_acl() -> Verdict {
    let mut off = savings_scenario();
    off.peering.links.clear();
    off.duration_s = 20.0;
    let out = run(&off)?;
    let inter: u64 = out
        .report
        .caches
        .iter()
        .map(|c| c.accounting.bytes_served_to_peer + c.accounting.bytes_fetched_from_peer)
        .sum();
    ensure(inter == 0 && out.report.global.peering_bytes == 0, || {
        format!("{inter} inter-tenant bytes with peering off")
    })?;
    ensure(out.icp_trace.is_empty(), || {
        "peering traffic with peering off".into()
    })?;

    let out = run(&rogue_scenario())?;
    let rep = &out.report;
    let intruder = rep
        .caches
        .iter()
        .find(|c| c.cache == CacheId(2))
        .ok_or("missing intruder cache")?;
    ensure(intruder.accounting == PeeringAccounting::default(), || {
        format!("intruder accounting {:?}", intruder.accounting)
    })?;
    let served_to_intruder: u64 = out
        .requests
        .iter()
        .filter(|r| r.tenant == TenantId(2) && r.served_by == ServedBy::Peer)
        .map(|r| r.size)
        .sum();
    ensure(served_to_intruder == 0, || {
        format!("{served_to_intruder} B served to the intruder")
    })?;
    let answered = out
        .icp_trace
        .iter()
        .filter(|t| t.receiver == CacheId(2))
        .count();
    ensure(answered == 0, || {
        format!("{answered} replies reached the intruder")
    })?;
    let attempts = out
        .icp_trace
        .iter()
        .filter(|t| t.sender == CacheId(2))
        .count();
    ensure(attempts > 0 && rep.counters.acl_drops > 0, || {
        "intruder never probed".into()
    })?;
    ensure(rep.tenants[&TenantId(0)].served_peer > 0, || {
        "legitimate peering stopped working".into()
    })?;
    Ok(format!(
        "peering off: 0 B across tenants; intruder: {attempts} queries, {} drops, 0 B served, 0 answered",
        rep.counters.acl_drops
    ))
}

fn synthetic_log(from_s: u64, n: u64) -> AccessLog {
    let mut v = Vec::new();
    for i in 0..n {
        let t = SimTime::from_nanos((from_s + i) * 1_000_000_000);
        v.push(AccessLogRecord {
            time: t,
            content: ContentId::new(5000 + from_s + i, 1),
            outcome: Outcome::LocalMiss,
            cacheable: false,
        });
        let key = i % 4;
        let outcome = if from_s == 0 && i < 4 {
            Outcome::LocalMiss
        } else {
            Outcome::Hit
        };
        v.push(AccessLogRecord {
            time: t,
            content: ContentId::new(key, 0),
            outcome,
            cacheable: true,
        });
    }
    AccessLog::from_records(v).expect("ordered")
}

fn interception_scenario() -> ScenarioConfig {
    let mut c = traversal_scenario();
    c.duration_s = 60.0;
    c.objects.destinations = 2;
    c.objects.personalized_destinations = vec![1];
    c.interception = InterceptionSpec {
        derive: true,
        window_s: 10.0,
        period_s: 10.0,
        ..Default::default()
    };
    c
}

fn interception_fidelity() -> Verdict {
    let train = synthetic_log(0, 60);
    let cfg = MissPredictorConfig {
        window: SimDuration::from_secs(300),
        min_samples: 10,
        miss_threshold: 0.8,
    };
    let table = derive_rules(
        TenantId(0),
        &train,
        &cfg,
        train.records().last().unwrap().time,
    );
    let bypassed: Vec<DestinationId> = table.bypassed().into_iter().collect();
    ensure(bypassed == vec![DestinationId(1)], || {
        format!("bypassed {bypassed:?}")
    })?;
    let holdout = synthetic_log(1000, 60);
    let acc = evaluate_rules(&table, &holdout);
    ensure(acc.false_bypass == Ratio::Defined(0.0), || {
        format!("falseBypass {}", acc.false_bypass)
    })?;

    let out = run(&interception_scenario())?;
    let mut detail = Vec::new();
    for t in &interception_scenario().tenants {
        let cache = t.cache.ok_or("tenant without cache")?;
        let log = &out.access_logs[&cache];
        let intercepted = out
            .requests
            .iter()
            .filter(|r| r.tenant == t.id && r.served_by != ServedBy::OriginBypassed)
            .count();
        let bypassed = out
            .requests
            .iter()
            .filter(|r| r.tenant == t.id && r.served_by == ServedBy::OriginBypassed)
            .count();
        ensure(log.len() == intercepted, || {
            format!(
                "{}: {} log records for {intercepted} intercepted requests",
                t.id,
                log.len()
            )
        })?;
        ensure(
            log.records().iter().all(|r| r.outcome != Outcome::Bypassed),
            || "bypass outcome logged".into(),
        )?;
        let rules: Vec<DestinationId> = out.rules[&t.id].bypassed().into_iter().collect();
        ensure(rules == vec![DestinationId(1)], || {
            format!("{}: simulated rules {rules:?}", t.id)
        })?;
        detail.push(format!("{}: {bypassed} bypassed", t.id));
    }
    Ok(format!(
        "rules bypass d1 only, falseBypass 0 over {} holdout requests; {}",
        acc.requests,
        detail.join(", ")
    ))
}

fn race_scenario() -> ScenarioConfig {
    let mut c = savings_scenario();
    c.hosts = 2;
    c.caches[1].host = 1;
    c.duration_s = 2.0;
    c.warmup_s = 0.0;
    for k in &mut c.caches {
        k.capacity_bytes = 30_000;
    }
    for t in &mut c.tenants {
        t.workload.catalog_size = 8;
        t.workload.zipf_alpha = 0.0;
        t.workload.request_rate = 5000.0;
    }
    c.peering.selection = PeerSelection::Digest;
    c.peering.read_through = true;
    c.peering.digest_period_s = 0.01;
    c.faults.duplicate_icp = true;
    c
}

fn exactly_once() -> Verdict {
    let out = run(&race_scenario())?;
    let k = &out.report.counters;
    ensure(k.digest_false_hits > 0, || {
        "no digest false positive was triggered".into()
    })?;
    ensure(k.evicted_since_hit > 0, || {
        "no hit/eviction race was triggered".into()
    })?;
    ensure(k.request_arrivals == out.requests.len() as u64, || {
        format!(
            "{} arrivals, {} records",
            k.request_arrivals,
            out.requests.len()
        )
    })?;
    ensure(k.deliveries == k.request_arrivals, || {
        format!(
            "{} deliveries for {} requests",
            k.deliveries, k.request_arrivals
        )
    })?;
    for (i, r) in out.requests.iter().enumerate() {
        ensure(r.id == i as u64 && r.completed_at >= r.issued_at, || {
            format!("record {i} malformed")
        })?;
    }
    ensure(out.report.reconciles(), || {
        "served-by counts do not reconcile".into()
    })?;
    Ok(format!(
        "{} requests, {} deliveries; {} digest false hits, {} evicted-since-hit, {} duplicate queries",
        k.request_arrivals, k.deliveries, k.digest_false_hits, k.evicted_since_hit, k.icp_duplicate_deliveries
    ))
}

/// Everything a run writes, as bytes.
fn artifacts(out: &SimOutput) -> Vec<Vec<u8>> {
    let mut v = vec![
        report_bytes(&out.report, Format::Json),
        traces::requests_csv(out.requests.iter().map(RequestRow::from)),
        traces::icp_csv(&out.icp_trace),
        traces::rules_csv(out.rules.values()),
    ];
    v.extend(out.access_logs.values().map(traces::access_log_csv));
    v
}

fn determinism() -> Verdict {
    let scenarios = [
        ("traversal", traversal_scenario()),
        ("savings", savings_scenario()),
        ("rogue", rogue_scenario()),
        ("interception", interception_scenario()),
        ("races", race_scenario()),
    ];
    for (name, cfg) in &scenarios {
        let a = artifacts(&run(cfg)?);
        let b = artifacts(&run(cfg)?);
        ensure(a == b, || format!("{name}: outputs differ between runs"))?;
    }
    Ok(format!(
        "{} scenarios byte-identical across two runs",
        scenarios.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("traversal anchor", traversal_anchor),
        ("savings direction", savings_direction),
        ("LRU oracle", lru_oracle),
        ("digest false-positive rate", digest_fpr),
        ("delay-pool bound", delay_pool_bound),
        ("isolation and ACL", isolation_and_acl),
        ("interception fidelity", interception_fidelity),
        ("determinism", determinism),
        ("exactly-once delivery", exactly_once),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
