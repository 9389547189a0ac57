//! Seeded random single-head problems for tests and benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cachestore::{split_zones, HeadCache, ZoneSplit};
use crate::error::Result;
use crate::numkit::Matrix;
use crate::queries::QuerySet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    /// Context length `N`.
    pub n: usize,
    /// Retain-zone size.
    pub m: usize,
    pub head_dim: usize,
    /// Query heads sharing the KV head.
    pub group: usize,
    /// Training queries per query head.
    pub n_q: usize,
    /// Standard deviation of key and query entries.
    pub scale: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            n: 16,
            m: 4,
            head_dim: 8,
            group: 2,
            n_q: 6,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadInstance {
    pub zone: ZoneSplit,
    pub queries: QuerySet,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Gaussian keys, values and queries. Query positions are nominal.
pub fn random_instance(spec: &InstanceSpec, seed: u64) -> Result<HeadInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = gaussian(&mut rng, spec.n, spec.head_dim, spec.scale);
    let values = gaussian(&mut rng, spec.n, spec.head_dim, 1.0);
    let cache = HeadCache::new(keys, values, (0..spec.n as i64).collect())?;
    let zone = split_zones(&cache, spec.m)?;
    let queries = (0..spec.group)
        .map(|_| gaussian(&mut rng, spec.n_q, spec.head_dim, spec.scale))
        .collect();
    Ok(HeadInstance {
        zone,
        queries: QuerySet {
            queries,
            positions: (spec.n..spec.n + spec.n_q).collect(),
            n_retain: 0,
            n_synth: spec.n_q,
        },
    })
}
