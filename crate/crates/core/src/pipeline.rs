//! Whole-cache compression: per-head inputs, budget planning and the parallel
//! map over `(layer, kv_head)` tasks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    allocate_heads, allocate_layers, allocate_layers_even_heads, BudgetPlan, HeadBounds,
    PilotReport,
};
use crate::baselines::{evict_attn_score, evict_random, BaselineMethod, Method};
use crate::cachestore::{
    budget_for_ratio, split_zones, CompressedCache, CompressedHead, ModelKvCache, ZoneSplit,
};
use crate::distiller::{distill_head, DistillConfig, DistillProblem, DistillTrace};
use crate::error::{Error, Result};
use crate::queries::{build_training_queries, QuerySet, QueryStrategy};
use crate::seeds::task_seed;

/// How the total pair budget is spread over layers and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AllocMode {
    #[default]
    Uniform,
    Layer,
    Head,
}

impl AllocMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocMode::Uniform => "uniform",
            AllocMode::Layer => "layer",
            AllocMode::Head => "head",
        }
    }
}

impl fmt::Display for AllocMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocMode::Uniform),
            "layer" => Ok(AllocMode::Layer),
            "head" => Ok(AllocMode::Head),
            _ => Err(Error::InvalidConfig(format!(
                "unknown alloc mode '{s}' (expected uniform | layer | head)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressOptions {
    pub ratio: f64,
    /// Retain-zone size `m`.
    pub retain: usize,
    pub method: Method,
    pub query_strategy: QueryStrategy,
    pub distill: DistillConfig,
    pub alloc: AllocMode,
    pub alpha: f64,
    pub k_min_floor: usize,
    pub layer_pilot_steps: usize,
    pub head_pilot_steps: usize,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            ratio: 0.3,
            retain: 32,
            method: Method::Kvsculpt,
            query_strategy: QueryStrategy::Uniform,
            distill: DistillConfig::default(),
            alloc: AllocMode::Uniform,
            alpha: 0.5,
            k_min_floor: 4,
            layer_pilot_steps: 60,
            head_pilot_steps: 30,
        }
    }
}

impl CompressOptions {
    pub fn validate(&self, context_len: usize) -> Result<()> {
        self.distill.validate()?;
        budget_for_ratio(self.ratio, self.retain, context_len)?;
        if self.k_min_floor == 0 {
            return Err(Error::InvalidConfig(
                "k_min_floor must be at least 1".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha = {} must be >= 0",
                self.alpha
            )));
        }
        if self.layer_pilot_steps == 0 || self.head_pilot_steps == 0 {
            return Err(Error::InvalidConfig(
                "pilot steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Synthetic-query count, capped at the context length.
    pub fn n_synth(&self, context_len: usize) -> usize {
        self.distill.n_synth.min(context_len)
    }
}

/// Compress zone and training queries of one `(layer, kv_head)`.
pub fn head_inputs(
    cache: &ModelKvCache,
    layer: usize,
    kv_head: usize,
    options: &CompressOptions,
) -> Result<(ZoneSplit, QuerySet)> {
    let s = cache.shape;
    if layer >= s.num_layers {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: s.num_layers,
        });
    }
    if kv_head >= s.num_kv_heads {
        return Err(Error::IndexOutOfRange {
            index: kv_head,
            len: s.num_kv_heads,
        });
    }
    let n = cache.context_len();
    let zone = split_zones(&cache.layers[layer].kv_heads[kv_head], options.retain)?;
    let ctx = &cache.layers[layer].queries[s.q_heads_for(kv_head)];
    let queries = build_training_queries(
        ctx,
        &cache.positions,
        options.retain,
        options.n_synth(n),
        &cache.rope,
        options.query_strategy,
        task_seed(options.distill.seed, layer, kv_head),
    )?;
    Ok((zone, queries))
}

/// One head under the configured method. Only distillation yields a trace.
pub fn compress_head(
    zone: &ZoneSplit,
    queries: &QuerySet,
    k: usize,
    method: Method,
    distill: &DistillConfig,
    seed: u64,
) -> Result<(CompressedHead, Option<DistillTrace>)> {
    match method {
        Method::Random => Ok((evict_random(zone, k, seed)?, None)),
        Method::Attn => Ok((evict_attn_score(zone, queries, k)?, None)),
        Method::Selectfit => Ok((
            BaselineMethod::SelectFit {
                lambda_ridge: distill.lambda_ridge,
            }
            .compress(zone, queries, k)?,
            None,
        )),
        Method::Kvsculpt => {
            let cfg = DistillConfig { seed, ..*distill };
            let (head, trace) = distill_head(zone, queries, k, &cfg)?;
            Ok((head, Some(trace)))
        }
    }
}

/// Per-head outcome of a compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    pub loss: f64,
    pub output_mse: f64,
    pub lse_mse: f64,
    #[serde(skip)]
    pub trace: Option<DistillTrace>,
}

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub compressed: CompressedCache,
    pub plan: BudgetPlan,
    pub pilots: Vec<PilotReport>,
    /// Layer-major.
    pub heads: Vec<HeadReport>,
    pub wall_ms: f64,
}

fn tasks(cache: &ModelKvCache) -> Vec<(usize, usize)> {
    let s = cache.shape;
    (0..s.num_layers)
        .flat_map(|l| (0..s.num_kv_heads).map(move |h| (l, h)))
        .collect()
}

/// Compresses every head with the budgets in `plan`.
pub fn compress_with_plan(
    cache: &ModelKvCache,
    plan: &BudgetPlan,
    options: &CompressOptions,
) -> Result<CompressOutcome> {
    let start = Instant::now();
    cache.validate()?;
    options.validate(cache.context_len())?;
    let s = cache.shape;
    let zone_len = cache.context_len() - options.retain;
    plan.validate(s.num_layers, s.num_kv_heads, zone_len)?;

    let results = tasks(cache)
        .par_iter()
        .map(|&(l, h)| {
            let (zone, queries) = head_inputs(cache, l, h, options)?;
            let k = plan.k[l][h];
            let seed = task_seed(options.distill.seed, l, h);
            let (head, trace) =
                compress_head(&zone, &queries, k, options.method, &options.distill, seed)?;
            let problem = DistillProblem::from_zone(&zone, &queries, options.distill.lambda_lse)?;
            let parts = problem.loss_of(&head)?;
            log::debug!("layer {l} kv head {h}: k = {k}, loss {:.4e}", parts.total);
            Ok((
                head,
                HeadReport {
                    layer: l,
                    head: h,
                    k,
                    loss: parts.total,
                    output_mse: parts.output_mse,
                    lse_mse: parts.lse_mse,
                    trace,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut heads_grid: Vec<Vec<CompressedHead>> = vec![Vec::new(); s.num_layers];
    let mut reports = Vec::with_capacity(results.len());
    for (head, report) in results {
        heads_grid[report.layer].push(head);
        reports.push(report);
    }
    let n = cache.context_len();
    let compressed = CompressedCache {
        shape: s,
        rope: cache.rope,
        context_len: n,
        retain_positions: cache.positions[n - options.retain..].to_vec(),
        heads: heads_grid,
        reference: cache.reference.clone(),
        toy_model: cache.toy_model.clone(),
    };
    compressed.validate()?;
    Ok(CompressOutcome {
        compressed,
        plan: plan.clone(),
        pilots: Vec::new(),
        heads: reports,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Uniform per-head budget for the configured ratio.
pub fn uniform_budget(cache: &ModelKvCache, options: &CompressOptions) -> Result<usize> {
    budget_for_ratio(options.ratio, options.retain, cache.context_len())
}

/// Short uniform-budget distillation on every head; records the output term.
pub fn run_pilot(
    cache: &ModelKvCache,
    options: &CompressOptions,
    pilot_steps: usize,
) -> Result<PilotReport> {
    cache.validate()?;
    options.validate(cache.context_len())?;
    let k = uniform_budget(cache, options)?;
    let s = cache.shape;
    let distill = DistillConfig {
        outer_steps: pilot_steps,
        ..options.distill
    };
    let mse = tasks(cache)
        .par_iter()
        .map(|&(l, h)| {
            let (zone, queries) = head_inputs(cache, l, h, options)?;
            let cfg = DistillConfig {
                seed: task_seed(options.distill.seed, l, h),
                ..distill
            };
            let (head, _) = distill_head(&zone, &queries, k, &cfg)?;
            let problem = DistillProblem::from_zone(&zone, &queries, cfg.lambda_lse)?;
            Ok(problem.loss_of(&head)?.output_mse)
        })
        .collect::<Result<Vec<_>>>()?;
    log::debug!("pilot ({pilot_steps} steps, k = {k}) done");
    Ok(PilotReport {
        mse: mse.chunks(s.num_kv_heads).map(<[f64]>::to_vec).collect(),
        pilot_steps,
        uniform_k: k,
    })
}

/// Budget plan for the configured allocation mode, with the pilots it used.
pub fn plan_budgets(
    cache: &ModelKvCache,
    options: &CompressOptions,
) -> Result<(BudgetPlan, Vec<PilotReport>)> {
    let s = cache.shape;
    let k = uniform_budget(cache, options)?;
    let total = k * s.num_layers * s.num_kv_heads;
    let bounds = HeadBounds {
        floor: options.k_min_floor,
        cap: cache.context_len() - options.retain,
    };
    match options.alloc {
        AllocMode::Uniform => Ok((
            BudgetPlan::uniform(s.num_layers, s.num_kv_heads, k),
            Vec::new(),
        )),
        AllocMode::Layer => {
            let pilot = run_pilot(cache, options, options.layer_pilot_steps)?;
            let plan = allocate_layers_even_heads(&pilot, total, options.alpha, bounds)?;
            Ok((plan, vec![pilot]))
        }
        AllocMode::Head => {
            let layer_pilot = run_pilot(cache, options, options.layer_pilot_steps)?;
            let head_pilot = run_pilot(cache, options, options.head_pilot_steps)?;
            let layers = allocate_layers(&layer_pilot, total, options.alpha, bounds)?;
            let plan = allocate_heads(&head_pilot, &layers, options.alpha, bounds)?;
            Ok((plan, vec![layer_pilot, head_pilot]))
        }
    }
}

/// Plans budgets and compresses every head.
pub fn compress_model(cache: &ModelKvCache, options: &CompressOptions) -> Result<CompressOutcome> {
    let start = Instant::now();
    options.validate(cache.context_len())?;
    let (plan, pilots) = plan_budgets(cache, options)?;
    let mut outcome = compress_with_plan(cache, &plan, options)?;
    outcome.pilots = pilots;
    outcome.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(outcome)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
