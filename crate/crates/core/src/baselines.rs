//! Eviction baselines: keep original old-zone pairs instead of optimizing them.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cachestore::{CompressedHead, ZoneSplit};
use crate::distiller::{
    check_budget, select_topk_positions, solve_values, AttentionTarget, DistillProblem,
};
use crate::error::{Error, Result};
use crate::queries::QuerySet;

/// Compression method selector shared by the CLI and the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Attn,
    Selectfit,
    Kvsculpt,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Random,
        Method::Attn,
        Method::Selectfit,
        Method::Kvsculpt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Attn => "attn",
            Method::Selectfit => "selectfit",
            Method::Kvsculpt => "kvsculpt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method '{s}' (expected random | attn | selectfit | kvsculpt)"
                ))
            })
    }
}

/// A fully specified eviction baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    Random { seed: u64 },
    AttnScore,
    SelectFit { lambda_ridge: f64 },
}

impl BaselineMethod {
    pub fn compress(
        &self,
        zone: &ZoneSplit,
        queries: &QuerySet,
        k: usize,
    ) -> Result<CompressedHead> {
        match *self {
            BaselineMethod::Random { seed } => evict_random(zone, k, seed),
            BaselineMethod::AttnScore => evict_attn_score(zone, queries, k),
            BaselineMethod::SelectFit { lambda_ridge } => {
                let problem = DistillProblem::from_zone(zone, queries, 1.0)?;
                select_and_fit_with(&problem, zone, queries, k, lambda_ridge)
            }
        }
    }
}

/// Keeps the old-zone rows at `picked` unchanged.
pub fn keep_positions(zone: &ZoneSplit, picked: &[usize]) -> Result<CompressedHead> {
    if let Some(&bad) = picked.iter().find(|&&i| i >= zone.old.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: zone.old.len(),
        });
    }
    CompressedHead::new(
        zone.old.keys.select_rows(picked),
        zone.old.values.select_rows(picked),
        zone.retain.keys.clone(),
        zone.retain.values.clone(),
    )
}

/// Uniformly random old-zone positions, ascending.
pub fn random_positions(zone_len: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > zone_len {
        return Err(Error::BudgetExceedsZone { k, zone: zone_len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, zone_len, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn evict_random(zone: &ZoneSplit, k: usize, seed: u64) -> Result<CompressedHead> {
    check_budget(zone, k)?;
    keep_positions(zone, &random_positions(zone.old.len(), k, seed)?)
}

pub fn evict_attn_score(zone: &ZoneSplit, queries: &QuerySet, k: usize) -> Result<CompressedHead> {
    keep_positions(zone, &select_topk_positions(zone, queries, k)?)
}

/// Attention-score selection followed by a ridge refit of the kept values.
pub fn select_and_fit(
    zone: &ZoneSplit,
    queries: &QuerySet,
    target: &AttentionTarget,
    k: usize,
    lambda_ridge: f64,
) -> Result<CompressedHead> {
    let problem = DistillProblem::new(&zone.retain, queries, target.clone(), 1.0)?;
    select_and_fit_with(&problem, zone, queries, k, lambda_ridge)
}

fn select_and_fit_with(
    problem: &DistillProblem,
    zone: &ZoneSplit,
    queries: &QuerySet,
    k: usize,
    lambda_ridge: f64,
) -> Result<CompressedHead> {
    let picked = select_topk_positions(zone, queries, k)?;
    fit_positions(problem, zone, &picked, lambda_ridge)
}

/// Keeps the keys at `picked` and refits their values.
pub fn fit_positions(
    problem: &DistillProblem,
    zone: &ZoneSplit,
    picked: &[usize],
    lambda_ridge: f64,
) -> Result<CompressedHead> {
    let kept = keep_positions(zone, picked)?;
    let weights = problem.attention_weights(&kept.k_c)?;
    let v_c = solve_values(&weights, problem.v_ret(), problem.target(), lambda_ridge)?;
    CompressedHead::new(kept.k_c, v_c, kept.k_ret, kept.v_ret)
}
