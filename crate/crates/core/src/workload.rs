//! Request generation: Poisson arrivals, Zipf popularity over a catalog, a
//! shared catalog prefix between two overlapping tenants and a
//! deterministic object-size and destination assignment per key.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded from the scenario
//! seed with one stream per tenant. ChaCha output is specified bit for bit,
//! which makes runs portable across platforms.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cache::{ContentId, ContentObject};
use crate::ids::TenantId;
use crate::time::SimDuration;

/// Portable per-tenant random stream.
#[derive(Clone, Debug)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Zipf(α) over ranks `1..=n`, sampled by inverting a precomputed CDF.
#[derive(Clone, Debug)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: u32, alpha: f64) -> Self {
        let n = n.max(1);
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += 1.0 / libm::pow(r as f64, alpha);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { cdf }
    }

    pub fn len(&self) -> u32 {
        self.cdf.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    /// Probability of `rank` (1-based).
    pub fn pmf(&self, rank: u32) -> f64 {
        let i = rank as usize - 1;
        if i == 0 {
            self.cdf[0]
        } else {
            self.cdf[i] - self.cdf[i - 1]
        }
    }

    pub fn sample(&self, rng: &mut Stream) -> u32 {
        let u = rng.unit();
        let i = self.cdf.partition_point(|&c| c <= u);
        (i.min(self.cdf.len() - 1) + 1) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overlap {
    pub peer: TenantId,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub catalog_size: u32,
    #[serde(default)]
    pub zipf_alpha: f64,
    /// Requests per simulated second.
    pub request_rate: f64,
    #[serde(default)]
    pub personalized_fraction: f64,
    #[serde(default)]
    pub overlap: Option<Overlap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SizeModel {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

/// How keys map to sizes and destinations, shared by all tenants so an id
/// always denotes the same object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub size: SizeModel,
    #[serde(default = "one")]
    pub destinations: u32,
    /// Destinations whose responses are always personalized.
    #[serde(default)]
    pub personalized_destinations: Vec<u32>,
}

fn one() -> u32 {
    1
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self {
            size: SizeModel::Fixed(10_000),
            destinations: 1,
            personalized_destinations: Vec::new(),
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ObjectSpec {
    pub fn content_id(&self, key: u64) -> ContentId {
        let d = (mix64(key) % self.destinations.max(1) as u64) as u32;
        ContentId::new(key, d)
    }

    pub fn size_of(&self, key: u64) -> u64 {
        match self.size {
            SizeModel::Fixed(s) => s,
            SizeModel::Uniform { min, max } => {
                let span = max.saturating_sub(min) + 1;
                min + mix64(key ^ 0x5157_e5e5) % span
            }
        }
    }

    pub fn is_personalized_destination(&self, id: &ContentId) -> bool {
        self.personalized_destinations.contains(&id.destination.0)
    }

    /// Mean object size over `catalog` keys of a namespace.
    pub fn mean_size(&self) -> f64 {
        match self.size {
            SizeModel::Fixed(s) => s as f64,
            SizeModel::Uniform { min, max } => (min as f64 + max as f64) / 2.0,
        }
    }
}

/// Key of catalog rank `rank` (1-based) in a tenant-private namespace.
pub fn private_key(tenant: TenantId, rank: u32) -> u64 {
    ((tenant.0 as u64 + 1) << 32) | rank as u64
}

/// Key of catalog rank `rank` in the namespace shared by two tenants.
pub fn shared_key(a: TenantId, b: TenantId, rank: u32) -> u64 {
    let ns = 0x8000_0000u64 | a.0.min(b.0) as u64;
    (ns << 32) | rank as u64
}

/// Number of leading ranks two overlapping catalogs share.
pub fn shared_prefix(fraction: f64, own: u32, peer: u32) -> u32 {
    libm::floor(fraction.clamp(0.0, 1.0) * own.min(peer) as f64) as u32
}

/// One tenant's request source.
#[derive(Clone, Debug)]
pub struct Workload {
    tenant: TenantId,
    rate: f64,
    personalized_fraction: f64,
    zipf: Zipf,
    shared: Option<(TenantId, u32)>,
    rng: Stream,
}

impl Workload {
    /// `peer_catalog` is the overlapping peer's catalog size, when any.
    pub fn new(
        tenant: TenantId,
        spec: &WorkloadSpec,
        peer_catalog: Option<u32>,
        seed: u64,
    ) -> Self {
        let shared = spec
            .overlap
            .zip(peer_catalog)
            .map(|(o, pc)| (o.peer, shared_prefix(o.fraction, spec.catalog_size, pc)));
        Self {
            tenant,
            rate: spec.request_rate,
            personalized_fraction: spec.personalized_fraction,
            zipf: Zipf::new(spec.catalog_size, spec.zipf_alpha),
            shared,
            rng: Stream::new(seed, tenant.0 as u64 + 1),
        }
    }

    /// Exponential gap to the next arrival; `None` for a silent tenant.
    pub fn next_gap(&mut self) -> Option<SimDuration> {
        if self.rate.is_nan() || self.rate <= 0.0 {
            return None;
        }
        let u = self.rng.unit();
        Some(SimDuration::from_secs_f64(-libm::log(1.0 - u) / self.rate))
    }

    pub fn key_for_rank(&self, rank: u32) -> u64 {
        match self.shared {
            Some((peer, prefix)) if rank <= prefix => shared_key(self.tenant, peer, rank),
            _ => private_key(self.tenant, rank),
        }
    }

    /// Draws the next requested object.
    pub fn sample_request(&mut self, objects: &ObjectSpec) -> ContentObject {
        let rank = self.zipf.sample(&mut self.rng);
        let personalized = self.rng.unit() < self.personalized_fraction;
        let key = self.key_for_rank(rank);
        let id = objects.content_id(key);
        ContentObject {
            id,
            size: objects.size_of(key).max(1),
            cacheable: !personalized && !objects.is_personalized_destination(&id),
        }
    }

    pub fn sample_rank(&mut self) -> u32 {
        self.zipf.sample(&mut self.rng)
    }
}
