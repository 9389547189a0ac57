//! Training-query construction: retain queries plus synthetic future queries
//! built by de-rotating context queries to content vectors and re-rotating
//! them at positions past the end of the context.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cosine, Matrix};
use crate::rope::RopeConfig;

/// How synthetic content vectors are picked from the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryStrategy {
    /// Evenly spaced indices `floor(j·N/n_s)`.
    #[default]
    Uniform,
    /// The most recent `n_s` content vectors.
    Bootstrap,
    /// `n_s` distinct indices drawn uniformly (seeded).
    Random,
    /// `n_s` k-means centroids (seeded).
    Kmeans,
    /// Greedy farthest-point selection.
    Farthest,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 5] = [
        QueryStrategy::Bootstrap,
        QueryStrategy::Uniform,
        QueryStrategy::Random,
        QueryStrategy::Kmeans,
        QueryStrategy::Farthest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryStrategy::Uniform => "uniform",
            QueryStrategy::Bootstrap => "bootstrap",
            QueryStrategy::Random => "random",
            QueryStrategy::Kmeans => "kmeans",
            QueryStrategy::Farthest => "farthest",
        }
    }
}

impl fmt::Display for QueryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query strategy `{s}`")))
    }
}

/// Training queries for the query heads of one KV group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `n_q × d` per query head, retain block first.
    pub queries: Vec<Matrix>,
    pub positions: Vec<usize>,
    pub n_retain: usize,
    pub n_synth: usize,
}

impl QuerySet {
    pub fn n_q(&self) -> usize {
        self.n_retain + self.n_synth
    }

    pub fn num_heads(&self) -> usize {
        self.queries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub mean_consecutive_cosine: f64,
    pub pca_variance_captured: f64,
    pub effective_dim: usize,
}

/// De-rotates each query row at its position.
pub fn content_vectors(queries: &Matrix, positions: &[i64], rope: &RopeConfig) -> Result<Matrix> {
    if queries.rows() != positions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} queries, {} positions",
            queries.rows(),
            positions.len()
        )));
    }
    let mut out = queries.clone();
    for (i, &p) in positions.iter().enumerate() {
        let p = usize::try_from(p)
            .map_err(|_| Error::InvalidConfig(format!("negative query position {p}")))?;
        rope.invert_in_place(out.row_mut(i), p)?;
    }
    Ok(out)
}

/// Evenly spaced source indices `floor(j·n/n_s)`.
pub fn uniform_indices(n: usize, n_s: usize) -> Vec<usize> {
    (0..n_s).map(|j| j * n / n_s).collect()
}

/// Picks `n_s` content vectors per head with `strategy`. Index-based
/// strategies use the same indices for every head; k-means clusters the
/// heads' concatenated content features.
pub fn sample_content(
    contents: &[Matrix],
    n_s: usize,
    strategy: QueryStrategy,
    seed: u64,
) -> Result<Vec<Matrix>> {
    let n = contents.first().map_or(0, Matrix::rows);
    if contents.iter().any(|c| c.rows() != n) {
        return Err(Error::DimensionMismatch(
            "heads disagree on context length".into(),
        ));
    }
    if n_s > n {
        return Err(Error::NotEnoughContent {
            requested: n_s,
            available: n,
        });
    }
    if n_s == 0 {
        return Ok(contents
            .iter()
            .map(|c| Matrix::zeros(0, c.cols()))
            .collect());
    }
    let by_index = |idx: Vec<usize>| contents.iter().map(|c| c.select_rows(&idx)).collect();
    Ok(match strategy {
        QueryStrategy::Uniform => by_index(uniform_indices(n, n_s)),
        QueryStrategy::Bootstrap => by_index((n - n_s..n).collect()),
        QueryStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, n_s).into_vec();
            idx.sort_unstable();
            by_index(idx)
        }
        QueryStrategy::Farthest => {
            by_index(farthest_point_indices(&concat_features(contents), n_s))
        }
        QueryStrategy::Kmeans => {
            let features = concat_features(contents);
            let centroids = kmeans(&features, n_s, seed, 25);
            let mut out = Vec::with_capacity(contents.len());
            let mut col = 0;
            for c in contents {
                out.push(centroids.slice_cols(col, col + c.cols()));
                col += c.cols();
            }
            out
        }
    })
}

fn concat_features(contents: &[Matrix]) -> Matrix {
    let n = contents[0].rows();
    let width: usize = contents.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(n, width);
    for i in 0..n {
        let row = out.row_mut(i);
        let mut col = 0;
        for c in contents {
            row[col..col + c.cols()].copy_from_slice(c.row(i));
            col += c.cols();
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy max-min selection starting from index 0; returned ascending.
fn farthest_point_indices(x: &Matrix, count: usize) -> Vec<usize> {
    let n = x.rows();
    let mut chosen = vec![0usize];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(0))).collect();
    let mut taken = vec![false; n];
    taken[0] = true;
    while chosen.len() < count {
        let next = (0..n)
            .filter(|&i| !taken[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("count <= n");
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Lloyd's algorithm with k-means++ seeding. Clusters are returned ordered by
/// the mean source index of their members.
fn kmeans(x: &Matrix, k: usize, seed: u64, iters: usize) -> Matrix {
    let n = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), x.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center
            (0..n).find(|i| !centers.contains(i)).expect("k <= n")
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut centroids = x.select_rows(&centers);
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(x.row(i), centroids.row(a))
                        .total_cmp(&sq_dist(x.row(i), centroids.row(b)))
                })
                .expect("k >= 1");
            changed |= assign[i] != best;
            assign[i] = best;
        }
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums.row_mut(assign[i]).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let key = if members.is_empty() {
                centers[c] as f64
            } else {
                members.iter().sum::<usize>() as f64 / members.len() as f64
            };
            (key, c)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    centroids.select_rows(&order.into_iter().map(|(_, c)| c).collect::<Vec<_>>())
}

/// Rotates content vectors to consecutive positions starting at `first_position`.
pub fn place_at_positions(
    content: &Matrix,
    first_position: usize,
    rope: &RopeConfig,
) -> Result<Matrix> {
    let mut out = content.clone();
    for j in 0..out.rows() {
        rope.apply_in_place(out.row_mut(j), first_position + j)?;
    }
    Ok(out)
}

/// Synthetic future queries for each head with the given strategy: content
/// vectors re-rotated at positions `N..N + n_s`.
pub fn sample_synthetic_queries_with(
    context_queries: &[Matrix],
    positions: &[i64],
    n: usize,
    n_s: usize,
    rope: &RopeConfig,
    strategy: QueryStrategy,
    seed: u64,
) -> Result<Vec<Matrix>> {
    if positions.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "context length {n} but {} positions",
            positions.len()
        )));
    }
    let contents = context_queries
        .iter()
        .map(|q| content_vectors(q, positions, rope))
        .collect::<Result<Vec<_>>>()?;
    sample_content(&contents, n_s, strategy, seed)?
        .iter()
        .map(|c| place_at_positions(c, n, rope))
        .collect()
}

/// Uniform-spread synthetic future queries.
pub fn sample_synthetic_queries(
    context_queries: &[Matrix],
    positions: &[i64],
    n: usize,
    n_s: usize,
    rope: &RopeConfig,
) -> Result<Vec<Matrix>> {
    if n_s == 0 {
        return Err(Error::InvalidConfig("n_s must be at least 1".into()));
    }
    sample_synthetic_queries_with(
        context_queries,
        positions,
        n,
        n_s,
        rope,
        QueryStrategy::Uniform,
        0,
    )
}

/// Retain queries at their original positions followed by `n_s` synthetic
/// future queries, per query head.
pub fn build_training_queries(
    context_queries: &[Matrix],
    positions: &[i64],
    m: usize,
    n_s: usize,
    rope: &RopeConfig,
    strategy: QueryStrategy,
    seed: u64,
) -> Result<QuerySet> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::InvalidRetain { m, n });
    }
    if n_s > n {
        return Err(Error::NotEnoughContent {
            requested: n_s,
            available: n,
        });
    }
    if context_queries.iter().any(|q| q.rows() != n) {
        return Err(Error::DimensionMismatch(
            "context queries vs positions".into(),
        ));
    }
    let synth =
        sample_synthetic_queries_with(context_queries, positions, n, n_s, rope, strategy, seed)?;
    let queries = context_queries
        .iter()
        .zip(&synth)
        .map(|(q, s)| Matrix::vstack(&[&q.slice_rows(n - m, n), s]))
        .collect::<Result<Vec<_>>>()?;
    let mut qpos: Vec<usize> = positions[n - m..].iter().map(|&p| p as usize).collect();
    qpos.extend(n..n + n_s);
    Ok(QuerySet {
        queries,
        positions: qpos,
        n_retain: m,
        n_synth: n_s,
    })
}

/// Consecutive-cosine and PCA statistics of de-rotated content vectors.
pub fn stationarity_report(
    context_queries: &Matrix,
    positions: &[i64],
    rope: &RopeConfig,
    pca_dim_threshold: f64,
) -> Result<StationarityReport> {
    let n = context_queries.rows();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "stationarity needs at least 2 content vectors".into(),
        ));
    }
    if !(0.0..=1.0).contains(&pca_dim_threshold) {
        return Err(Error::InvalidConfig("pca threshold outside [0, 1]".into()));
    }
    let content = content_vectors(context_queries, positions, rope)?;
    let mean_consecutive_cosine = (1..n)
        .map(|i| cosine(content.row(i - 1), content.row(i)))
        .sum::<f64>()
        / (n - 1) as f64;

    let d = content.cols();
    let mut mean = vec![0.0; d];
    for row in content.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| content.get(i, j) - mean[j]);
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    let eig = nalgebra::SymmetricEigen::new(cov.to_nalgebra());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();

    // spread at rounding level counts as no spread
    let energy = content.frobenius_sq() / n as f64;
    let (effective_dim, captured) = if total <= 1e-20 * energy {
        (1, 1.0)
    } else {
        let mut acc = 0.0;
        let mut dim = d;
        for (i, v) in eigenvalues.iter().enumerate() {
            acc += v;
            if acc / total >= pca_dim_threshold - 1e-12 {
                dim = i + 1;
                break;
            }
        }
        let captured = eigenvalues[..dim].iter().sum::<f64>() / total;
        (dim.max(1), captured.min(1.0))
    };
    Ok(StationarityReport {
        mean_consecutive_cosine,
        pca_variance_captured: captured,
        effective_dim,
    })
}
