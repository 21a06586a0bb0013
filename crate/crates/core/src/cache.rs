//! The vCache: a byte-bounded LRU store, its Bloom-filter digest and the
//! append-only access log.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hash;

use serde::{Deserialize, Serialize};
use siphasher::sip128::{Hasher128, SipHasher13};
use thiserror::Error;

use crate::ids::{DestinationId, ObjectKey};
use crate::time::SimTime;

/// An object as addressed by a request: the object and the origin serving it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContentId {
    pub key: ObjectKey,
    pub destination: DestinationId,
}

impl ContentId {
    pub const fn new(key: u64, destination: u32) -> Self {
        Self {
            key: ObjectKey(key),
            destination: DestinationId(destination),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentObject {
    pub id: ContentId,
    pub size: u64,
    /// `false` for personalized responses, which are never stored.
    pub cacheable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("object of {size} bytes exceeds cache capacity of {capacity} bytes")]
    ObjectTooLarge { size: u64, capacity: u64 },
    #[error("object is not cacheable")]
    NotCacheable,
    #[error("object size must be positive")]
    EmptyObject,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    size: u64,
    last_access: SimTime,
    stamp: u64,
}

/// Byte-bounded least-recently-used store.
///
/// Recency is tracked by a monotone stamp, so entries touched at the same
/// simulated instant still have a strict order.
#[derive(Clone, Debug)]
pub struct CacheStore {
    capacity: u64,
    used: u64,
    next_stamp: u64,
    entries: BTreeMap<ContentId, Entry>,
    recency: BTreeMap<u64, ContentId>,
}

impl CacheStore {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            used: 0,
            next_stamp: 0,
            entries: BTreeMap::new(),
            recency: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Presence test that leaves recency untouched.
    pub fn contains(&self, id: &ContentId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn size_of(&self, id: &ContentId) -> Option<u64> {
        self.entries.get(id).map(|e| e.size)
    }

    pub fn last_access(&self, id: &ContentId) -> Option<SimTime> {
        self.entries.get(id).map(|e| e.last_access)
    }

    /// Stored ids from least to most recently used.
    pub fn iter_lru(&self) -> impl Iterator<Item = &ContentId> {
        self.recency.values()
    }

    fn promote(&mut self, id: &ContentId, now: SimTime) {
        let stamp = self.next_stamp;
        if let Some(e) = self.entries.get_mut(id) {
            self.recency.remove(&e.stamp);
            e.stamp = stamp;
            e.last_access = e.last_access.max(now);
            self.recency.insert(stamp, *id);
            self.next_stamp += 1;
        }
    }

    /// Looks `id` up, promoting it on a hit.
    pub fn lookup(&mut self, id: &ContentId, now: SimTime) -> Lookup {
        if self.entries.contains_key(id) {
            self.promote(id, now);
            Lookup::Hit
        } else {
            Lookup::Miss
        }
    }

    /// Stores `obj`, evicting least-recently-used entries as needed.
    /// Returns the evicted ids in eviction order. Re-inserting a stored id
    /// only refreshes its recency.
    pub fn insert(
        &mut self,
        obj: &ContentObject,
        now: SimTime,
    ) -> Result<Vec<ContentId>, CacheError> {
        if !obj.cacheable {
            return Err(CacheError::NotCacheable);
        }
        if obj.size == 0 {
            return Err(CacheError::EmptyObject);
        }
        if obj.size > self.capacity {
            return Err(CacheError::ObjectTooLarge {
                size: obj.size,
                capacity: self.capacity,
            });
        }
        if self.entries.contains_key(&obj.id) {
            self.promote(&obj.id, now);
            return Ok(Vec::new());
        }
        let mut evicted = Vec::new();
        while self.used + obj.size > self.capacity {
            let Some((_, victim)) = self.recency.pop_first() else {
                break;
            };
            if let Some(e) = self.entries.remove(&victim) {
                self.used -= e.size;
            }
            evicted.push(victim);
        }
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.entries.insert(
            obj.id,
            Entry {
                size: obj.size,
                last_access: now,
                stamp,
            },
        );
        self.recency.insert(stamp, obj.id);
        self.used += obj.size;
        Ok(evicted)
    }
}

/// Bloom-filter summary of a store's contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDigest {
    words: Vec<u64>,
    bits: usize,
    hash_count: u32,
    seed: u64,
    pub generation: u64,
    pub built_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigestParams {
    /// Filter size in bits; when absent it is `bits_per_entry` times the
    /// number of stored objects.
    #[serde(default)]
    pub bits: Option<usize>,
    #[serde(default = "default_bits_per_entry")]
    pub bits_per_entry: usize,
    #[serde(default = "default_hash_count")]
    pub hash_count: u32,
}

fn default_bits_per_entry() -> usize {
    10
}

fn default_hash_count() -> u32 {
    7
}

impl Default for DigestParams {
    fn default() -> Self {
        Self {
            bits: None,
            bits_per_entry: default_bits_per_entry(),
            hash_count: default_hash_count(),
        }
    }
}

impl DigestParams {
    pub fn bits_for(&self, entries: usize) -> usize {
        self.bits
            .unwrap_or_else(|| (self.bits_per_entry * entries).max(64))
            .max(1)
    }
}

impl CacheDigest {
    /// An empty digest; `bits` and `hash_count` are clamped to at least 1.
    pub fn empty(bits: usize, hash_count: u32, seed: u64) -> Self {
        let bits = bits.max(1);
        Self {
            words: vec![0; bits.div_ceil(64)],
            bits,
            hash_count: hash_count.max(1),
            seed,
            generation: 0,
            built_at: SimTime::ZERO,
        }
    }

    /// Builds a digest over `ids`.
    pub fn build<'a>(
        ids: impl IntoIterator<Item = &'a ContentId>,
        bits: usize,
        hash_count: u32,
        seed: u64,
    ) -> Self {
        let mut d = Self::empty(bits, hash_count, seed);
        for id in ids {
            d.insert(id);
        }
        d
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn hash_count(&self) -> u32 {
        self.hash_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// The `hash_count` bit positions probed for `id`.
    pub fn probes(&self, id: &ContentId) -> impl Iterator<Item = usize> {
        let (h1, h2) = content_hash(id, self.seed);
        let m = self.bits as u64;
        (0..self.hash_count as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    pub fn insert(&mut self, id: &ContentId) {
        let probes: Vec<usize> = self.probes(id).collect();
        for p in probes {
            self.words[p / 64] |= 1 << (p % 64);
        }
    }

    pub fn contains(&self, id: &ContentId) -> bool {
        self.probes(id)
            .all(|p| self.words[p / 64] & (1 << (p % 64)) != 0)
    }

    pub fn bit(&self, index: usize) -> bool {
        self.words[index / 64] & (1 << (index % 64)) != 0
    }
}

/// The two halves of a keyed 128-bit SipHash of the content id. The second
/// half is forced odd so the probe sequence does not collapse.
pub fn content_hash(id: &ContentId, seed: u64) -> (u64, u64) {
    let mut h = SipHasher13::new_with_keys(seed, seed ^ 0x9e37_79b9_7f4a_7c15);
    id.hash(&mut h);
    let out = h.finish128();
    (out.h1, out.h2 | 1)
}

/// Analytic Bloom-filter false-positive probability.
pub fn expected_false_positive_rate(entries: usize, bits: usize, hash_count: u32) -> f64 {
    let k = hash_count as f64;
    libm::pow(1.0 - libm::exp(-k * entries as f64 / bits as f64), k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Hit,
    LocalMiss,
    PeerHit,
    Bypassed,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Hit => "hit",
            Outcome::LocalMiss => "local-miss",
            Outcome::PeerHit => "peer-hit",
            Outcome::Bypassed => "bypassed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "hit" => Outcome::Hit,
            "local-miss" => Outcome::LocalMiss,
            "peer-hit" => Outcome::PeerHit,
            "bypassed" => Outcome::Bypassed,
            _ => return None,
        })
    }

    /// Whether the tenant's caching service answered without the origin.
    pub fn served_by_cache(self) -> bool {
        matches!(self, Outcome::Hit | Outcome::PeerHit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLogRecord {
    pub time: SimTime,
    pub content: ContentId,
    pub outcome: Outcome,
    pub cacheable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record at {record} precedes the last logged time {last}")]
pub struct TimeRegression {
    pub last: SimTime,
    pub record: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    records: Vec<AccessLogRecord>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: AccessLogRecord) -> Result<(), TimeRegression> {
        if let Some(last) = self.records.last() {
            if record.time < last.time {
                return Err(TimeRegression {
                    last: last.time,
                    record: record.time,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[AccessLogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Builds a log from records that must already be time-ordered.
    pub fn from_records(records: Vec<AccessLogRecord>) -> Result<Self, TimeRegression> {
        let mut log = Self::new();
        for r in records {
            log.append(r)?;
        }
        Ok(log)
    }

    /// Merges several logs into one time-ordered log; ties keep input order.
    pub fn merged<'a>(logs: impl IntoIterator<Item = &'a AccessLog>) -> Self {
        let mut records: Vec<AccessLogRecord> = logs
            .into_iter()
            .flat_map(|l| l.records.iter().copied())
            .collect();
        records.sort_by_key(|r| r.time);
        Self { records }
    }
}
