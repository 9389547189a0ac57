//! Per-head distillation of the compress zone into `k` free key/value pairs.
//!
//! Keys are optimized with L-BFGS against the full-cache attention output and
//! log-sum-exp on a fixed set of training queries; values are re-solved in
//! closed form every few outer steps.

pub mod adam;
pub mod lbfgs;

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::attend;
use crate::cachestore::{CompressedHead, HeadCache, ZoneSplit};
use crate::error::{Error, Result};
use crate::numkit::{dot, ridge_solve, softmax_into, Matrix, RidgeProblem};
use crate::queries::QuerySet;
use crate::seeds::stream_seed;

pub use adam::{adam_step, AdamParams, AdamState};
pub use lbfgs::{lbfgs_minimize, LbfgsMemory, LbfgsOutcome, LbfgsParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub outer_steps: usize,
    pub v_solve_every: usize,
    pub lbfgs_lr: f64,
    pub lbfgs_inner_iters: usize,
    pub lbfgs_history: usize,
    pub lambda_lse: f64,
    pub lambda_ridge: f64,
    pub n_synth: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            outer_steps: 100,
            v_solve_every: 5,
            lbfgs_lr: 0.5,
            lbfgs_inner_iters: 10,
            lbfgs_history: 10,
            lambda_lse: 1.0,
            lambda_ridge: 1e-3,
            n_synth: 128,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("outer_steps", self.outer_steps),
            ("v_solve_every", self.v_solve_every),
            ("lbfgs_inner_iters", self.lbfgs_inner_iters),
            ("lbfgs_history", self.lbfgs_history),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        // lambda_lse = 0 is allowed as a term ablation
        let scalars = [
            ("lbfgs_lr", self.lbfgs_lr, false),
            ("lambda_lse", self.lambda_lse, true),
            ("lambda_ridge", self.lambda_ridge, true),
        ];
        for (name, v, zero_ok) in scalars {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v} is not allowed")));
            }
        }
        Ok(())
    }

    pub fn lbfgs_params(&self) -> LbfgsParams {
        LbfgsParams {
            lr: self.lbfgs_lr,
            max_iters: self.lbfgs_inner_iters,
            history: self.lbfgs_history,
            ..LbfgsParams::default()
        }
    }
}

/// Full-cache attention output and log-sum-exp per query head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTarget {
    pub y_full: Vec<Matrix>,
    pub lse_full: Vec<Vec<f64>>,
}

pub fn attention_targets(zone: &ZoneSplit, queries: &QuerySet) -> Result<AttentionTarget> {
    let keys = zone.full_keys();
    let values = zone.full_values();
    let d = zone.head_dim();
    let mut y_full = Vec::with_capacity(queries.num_heads());
    let mut lse_full = Vec::with_capacity(queries.num_heads());
    for q in &queries.queries {
        let out = attend(q, &keys, &values, d)?;
        y_full.push(out.output);
        lse_full.push(out.lse);
    }
    Ok(AttentionTarget { y_full, lse_full })
}

/// Attention of the stacked training queries (all heads of the group) over
/// `[K_c; K_ret]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub weights: Matrix,
    pub k: usize,
}

impl AttentionWeights {
    pub fn new(weights: Matrix, k: usize) -> Result<Self> {
        if k > weights.cols() {
            return Err(Error::DimensionMismatch(format!(
                "k = {k} exceeds {} weight columns",
                weights.cols()
            )));
        }
        for row in weights.iter_rows() {
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(
                    "attention weight rows must sum to 1".into(),
                ));
            }
        }
        Ok(Self { weights, k })
    }

    pub fn a_c(&self) -> Matrix {
        self.weights.slice_cols(0, self.k)
    }

    pub fn a_r(&self) -> Matrix {
        self.weights.slice_cols(self.k, self.weights.cols())
    }
}

/// Breakdown of the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub output_mse: f64,
    pub lse_mse: f64,
}

/// Everything the loss needs that does not depend on `(K_c, V_c)`.
#[derive(Debug, Clone)]
pub struct DistillProblem {
    queries: Vec<Matrix>,
    k_ret: Matrix,
    v_ret: Matrix,
    target: AttentionTarget,
    lambda_lse: f64,
    head_dim: usize,
    scale: f64,
    /// Scaled retain-zone scores, `n_q × m` per query head.
    retain_scores: Vec<Matrix>,
}

impl DistillProblem {
    pub fn new(
        retain: &HeadCache,
        queries: &QuerySet,
        target: AttentionTarget,
        lambda_lse: f64,
    ) -> Result<Self> {
        let d = retain.keys.cols();
        let n_q = queries.n_q();
        if queries.queries.is_empty() {
            return Err(Error::InvalidConfig("no query heads".into()));
        }
        if target.y_full.len() != queries.num_heads()
            || target.lse_full.len() != queries.num_heads()
        {
            return Err(Error::DimensionMismatch("targets vs query heads".into()));
        }
        for (h, q) in queries.queries.iter().enumerate() {
            if q.shape() != (n_q, d) || target.y_full[h].shape() != (n_q, d) {
                return Err(Error::DimensionMismatch(format!(
                    "query head {h}: queries {:?}, targets {:?}, expected ({n_q}, {d})",
                    q.shape(),
                    target.y_full[h].shape()
                )));
            }
            if target.lse_full[h].len() != n_q {
                return Err(Error::DimensionMismatch(format!(
                    "query head {h}: lse length"
                )));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let retain_scores = queries
            .queries
            .iter()
            .map(|q| Ok(q.matmul_t(&retain.keys)?.scale(scale)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: queries.queries.clone(),
            k_ret: retain.keys.clone(),
            v_ret: retain.values.clone(),
            target,
            lambda_lse,
            head_dim: d,
            scale,
            retain_scores,
        })
    }

    /// Builds the problem with targets computed from the full zone split.
    pub fn from_zone(zone: &ZoneSplit, queries: &QuerySet, lambda_lse: f64) -> Result<Self> {
        let target = attention_targets(zone, queries)?;
        Self::new(&zone.retain, queries, target, lambda_lse)
    }

    pub fn target(&self) -> &AttentionTarget {
        &self.target
    }

    pub fn v_ret(&self) -> &Matrix {
        &self.v_ret
    }

    pub fn k_ret(&self) -> &Matrix {
        &self.k_ret
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn lambda_lse(&self) -> f64 {
        self.lambda_lse
    }

    /// Loss at `(K_c, V_c)`; with `grad`, also writes `∂L/∂K_c` (row-major).
    pub fn evaluate(
        &self,
        k_c: &[f64],
        v_c: &Matrix,
        mut grad: Option<&mut [f64]>,
    ) -> Result<LossParts> {
        let d = self.head_dim;
        let k = v_c.rows();
        if k_c.len() != k * d || v_c.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "k_c has {} entries, v_c is {:?}, head_dim {d}",
                k_c.len(),
                v_c.shape()
            )));
        }
        if let Some(g) = grad.as_deref_mut() {
            if g.len() != k * d {
                return Err(Error::DimensionMismatch("gradient buffer".into()));
            }
            g.fill(0.0);
        }
        let m = self.v_ret.rows();
        let n_heads = self.queries.len();
        let n_q = self.queries[0].rows();
        let w = 1.0 / (n_heads * n_q) as f64;

        let mut s = vec![0.0; k + m];
        let mut a = vec![0.0; k + m];
        let mut y_hat = vec![0.0; d];
        let mut resid = vec![0.0; d];
        let (mut out_sum, mut lse_sum) = (0.0, 0.0);

        for h in 0..n_heads {
            let q_h = &self.queries[h];
            let rs = &self.retain_scores[h];
            let y = &self.target.y_full[h];
            let ell = &self.target.lse_full[h];
            for i in 0..n_q {
                let q = q_h.row(i);
                for j in 0..k {
                    s[j] = dot(q, &k_c[j * d..(j + 1) * d]) * self.scale;
                }
                s[k..].copy_from_slice(rs.row(i));
                let lse = softmax_into(&s, &mut a);

                y_hat.fill(0.0);
                for j in 0..k {
                    axpy(a[j], v_c.row(j), &mut y_hat);
                }
                for j in 0..m {
                    axpy(a[k + j], self.v_ret.row(j), &mut y_hat);
                }
                let mut err = 0.0;
                for (t, r) in resid.iter_mut().enumerate() {
                    *r = y_hat[t] - y.get(i, t);
                    err += *r * *r;
                }
                let dl = lse - ell[i];
                out_sum += err;
                lse_sum += dl * dl;

                if let Some(g) = grad.as_deref_mut() {
                    let c_out = 2.0 * w;
                    let e = 2.0 * self.lambda_lse * w * dl;
                    let ry = c_out * dot(&resid, &y_hat);
                    for j in 0..k {
                        let coef = a[j] * (c_out * dot(&resid, v_c.row(j)) - ry + e) * self.scale;
                        if coef != 0.0 {
                            axpy(coef, q, &mut g[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
        }

        let output_mse = w * out_sum;
        let lse_mse = w * lse_sum;
        let total = output_mse + self.lambda_lse * lse_mse;
        if !total.is_finite() {
            return Err(Error::Diverged);
        }
        Ok(LossParts {
            total,
            output_mse,
            lse_mse,
        })
    }

    pub fn loss(&self, k_c: &Matrix, v_c: &Matrix) -> Result<LossParts> {
        self.evaluate(k_c.as_slice(), v_c, None)
    }

    pub fn loss_of(&self, head: &CompressedHead) -> Result<LossParts> {
        self.loss(&head.k_c, &head.v_c)
    }

    /// Stacked attention weights of every training query over `[K_c; K_ret]`.
    pub fn attention_weights(&self, k_c: &Matrix) -> Result<AttentionWeights> {
        let k = k_c.rows();
        let m = self.k_ret.rows();
        let n_q = self.queries[0].rows();
        let mut weights = Matrix::zeros(self.queries.len() * n_q, k + m);
        let mut s = vec![0.0; k + m];
        for (h, q_h) in self.queries.iter().enumerate() {
            for i in 0..n_q {
                let q = q_h.row(i);
                for j in 0..k {
                    s[j] = dot(q, k_c.row(j)) * self.scale;
                }
                s[k..].copy_from_slice(self.retain_scores[h].row(i));
                softmax_into(&s, weights.row_mut(h * n_q + i));
            }
        }
        Ok(AttentionWeights { weights, k })
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Loss and analytic key-gradient for one group of query heads.
pub fn distill_loss_and_grad(
    k_c: &Matrix,
    v_c: &Matrix,
    retain: &HeadCache,
    queries: &QuerySet,
    target: &AttentionTarget,
    lambda_lse: f64,
) -> Result<(f64, Matrix)> {
    let problem = DistillProblem::new(retain, queries, target.clone(), lambda_lse)?;
    let mut grad = vec![0.0; k_c.rows() * k_c.cols()];
    let parts = problem.evaluate(k_c.as_slice(), v_c, Some(&mut grad))?;
    Ok((parts.total, Matrix::from_vec(k_c.rows(), k_c.cols(), grad)?))
}

/// Ridge fit of `V_c` to the targets given the attention those keys induce.
pub fn solve_values(
    weights: &AttentionWeights,
    v_ret: &Matrix,
    target: &AttentionTarget,
    lambda_ridge: f64,
) -> Result<Matrix> {
    let stacked: Vec<&Matrix> = target.y_full.iter().collect();
    let y = Matrix::vstack(&stacked)?;
    let offset = weights.a_r().matmul(v_ret)?;
    ridge_solve(&RidgeProblem::new(weights.a_c(), y, lambda_ridge).with_offset(offset))
}

/// Total full-cache attention each old-zone position receives from the
/// training queries.
pub fn attention_importance(zone: &ZoneSplit, queries: &QuerySet) -> Result<Vec<f64>> {
    let keys = zone.full_keys();
    let zone_len = zone.old.len();
    let scale = 1.0 / (zone.head_dim() as f64).sqrt();
    let mut importance = vec![0.0; zone_len];
    let mut s = vec![0.0; keys.rows()];
    let mut a = vec![0.0; keys.rows()];
    for q_h in &queries.queries {
        if q_h.cols() != zone.head_dim() {
            return Err(Error::DimensionMismatch("query width vs head_dim".into()));
        }
        for q in q_h.iter_rows() {
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = dot(q, keys.row(j)) * scale;
            }
            softmax_into(&s, &mut a);
            for (imp, aj) in importance.iter_mut().zip(&a) {
                *imp += aj;
            }
        }
    }
    Ok(importance)
}

/// Indices of the `k` largest scores, ties toward the larger index, returned
/// in ascending order.
pub fn top_k_indices(importance: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > importance.len() {
        return Err(Error::BudgetExceedsZone {
            k,
            zone: importance.len(),
        });
    }
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(b.cmp(&a)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub(crate) fn check_budget(zone: &ZoneSplit, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::BudgetTooSmall("k must be at least 1".into()));
    }
    if k > zone.old.len() {
        return Err(Error::BudgetExceedsZone {
            k,
            zone: zone.old.len(),
        });
    }
    Ok(())
}

/// Positions selected by attention importance, ascending.
pub fn select_topk_positions(zone: &ZoneSplit, queries: &QuerySet, k: usize) -> Result<Vec<usize>> {
    check_budget(zone, k)?;
    top_k_indices(&attention_importance(zone, queries)?, k)
}

/// The `k` most attended old-zone pairs, values unchanged.
pub fn init_keys_topk(zone: &ZoneSplit, queries: &QuerySet, k: usize) -> Result<(Matrix, Matrix)> {
    let picked = select_topk_positions(zone, queries, k)?;
    Ok((
        zone.old.keys.select_rows(&picked),
        zone.old.values.select_rows(&picked),
    ))
}

/// Mutable optimizer state of one head.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub k_c: Matrix,
    pub v_c: Matrix,
    pub memory: LbfgsMemory,
    pub adam: AdamState,
}

impl DistillState {
    pub fn new(k_c: Matrix, v_c: Matrix) -> Self {
        Self {
            k_c,
            v_c,
            memory: LbfgsMemory::default(),
            adam: AdamState::default(),
        }
    }
}

/// Result of one key-update call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_evals: usize,
    pub stalled: bool,
    pub diverged: bool,
}

pub fn optimize_keys_lbfgs(
    problem: &DistillProblem,
    state: &mut DistillState,
    config: &DistillConfig,
) -> Result<StepReport> {
    let v_c = &state.v_c;
    let out = lbfgs_minimize(
        |x, g| Ok(problem.evaluate(x, v_c, Some(g))?.total),
        state.k_c.as_mut_slice(),
        &mut state.memory,
        &config.lbfgs_params(),
    )?;
    Ok(StepReport {
        loss: out.f,
        grad_evals: out.evals,
        stalled: out.stalled,
        diverged: false,
    })
}

/// First-order comparison settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderConfig {
    pub adam: AdamParams,
    /// Updates per outer step.
    pub iters_per_step: usize,
    /// Loss above `divergence_factor × reference` aborts the run.
    pub divergence_factor: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self {
            adam: AdamParams::default(),
            iters_per_step: 10,
            divergence_factor: 1e6,
        }
    }
}

impl FirstOrderConfig {
    /// Spreads `grad_evals` gradient evaluations over `outer_steps` steps.
    pub fn equal_budget(grad_evals: usize, outer_steps: usize) -> Self {
        Self {
            iters_per_step: (grad_evals / outer_steps.max(1)).max(1),
            ..Self::default()
        }
    }
}

pub fn optimize_keys_firstorder(
    problem: &DistillProblem,
    state: &mut DistillState,
    config: &FirstOrderConfig,
    reference_loss: f64,
) -> Result<StepReport> {
    let mut grad = vec![0.0; state.k_c.rows() * state.k_c.cols()];
    let mut evals = 0;
    let limit = config.divergence_factor * reference_loss;
    let diverged_report = |evals| StepReport {
        loss: f64::INFINITY,
        grad_evals: evals,
        stalled: false,
        diverged: true,
    };
    for _ in 0..config.iters_per_step {
        let f = match problem.evaluate(state.k_c.as_slice(), &state.v_c, Some(&mut grad)) {
            Ok(p) => p.total,
            Err(Error::Diverged) => return Ok(diverged_report(evals + 1)),
            Err(e) => return Err(e),
        };
        evals += 1;
        if f > limit {
            return Ok(diverged_report(evals));
        }
        adam_step(
            &config.adam,
            &mut state.adam,
            state.k_c.as_mut_slice(),
            &grad,
        );
    }
    let loss = match problem.loss(&state.k_c, &state.v_c) {
        Ok(p) => p.total,
        Err(Error::Diverged) => return Ok(diverged_report(evals)),
        Err(e) => return Err(e),
    };
    if loss > limit {
        return Ok(diverged_report(evals));
    }
    Ok(StepReport {
        loss,
        grad_evals: evals,
        stalled: false,
        diverged: false,
    })
}

/// Which key optimizer drives the outer loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyOptimizer {
    Lbfgs,
    FirstOrder(FirstOrderConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    /// Cumulative gradient evaluations.
    pub grad_evals: usize,
    pub elapsed_ms: f64,
    pub v_solved: bool,
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillTrace {
    pub initial_loss: f64,
    pub steps: Vec<TraceStep>,
    pub final_loss: f64,
    pub grad_evals: usize,
    /// Value solves performed (accepted or not).
    pub v_solves: usize,
    pub wall_ms: f64,
    pub diverged: bool,
}

/// One JSON-lines trace record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_evals: usize,
    pub elapsed_ms: f64,
}

impl DistillTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn stalled_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.stalled).count()
    }

    pub fn records(&self, layer: usize, head: usize) -> Vec<TraceRecord> {
        self.steps
            .iter()
            .map(|s| TraceRecord {
                layer,
                head,
                step: s.step,
                loss: s.loss,
                grad_evals: s.grad_evals,
                elapsed_ms: s.elapsed_ms,
            })
            .collect()
    }

    /// Same optimization path, ignoring wall-clock fields.
    pub fn same_path(&self, other: &DistillTrace) -> bool {
        let key = |t: &DistillTrace| {
            (
                t.initial_loss.to_bits(),
                t.final_loss.to_bits(),
                t.grad_evals,
                t.v_solves,
                t.diverged,
                t.steps
                    .iter()
                    .map(|s| {
                        (
                            s.step,
                            s.loss.to_bits(),
                            s.grad_evals,
                            s.v_solved,
                            s.stalled,
                        )
                    })
                    .collect::<Vec<_>>(),
            )
        };
        key(self) == key(other)
    }
}

/// Top-k initialization followed by the alternating L-BFGS / value-solve loop.
pub fn distill_head(
    zone: &ZoneSplit,
    queries: &QuerySet,
    k: usize,
    config: &DistillConfig,
) -> Result<(CompressedHead, DistillTrace)> {
    config.validate()?;
    let problem = DistillProblem::from_zone(zone, queries, config.lambda_lse)?;
    let (k_c, v_c) = init_keys_topk(zone, queries, k)?;
    run_distillation(&problem, zone, k_c, v_c, config, KeyOptimizer::Lbfgs)
}

/// The alternating loop from an explicit starting point.
pub fn distill_head_from(
    zone: &ZoneSplit,
    queries: &QuerySet,
    k_c: Matrix,
    v_c: Matrix,
    config: &DistillConfig,
    optimizer: KeyOptimizer,
) -> Result<(CompressedHead, DistillTrace)> {
    config.validate()?;
    let problem = DistillProblem::from_zone(zone, queries, config.lambda_lse)?;
    run_distillation(&problem, zone, k_c, v_c, config, optimizer)
}

/// Runs the outer loop on a prepared problem. A value solve is kept only if it
/// does not raise the two-term loss, so the per-step losses never increase
/// under L-BFGS.
pub fn run_distillation(
    problem: &DistillProblem,
    zone: &ZoneSplit,
    k_c: Matrix,
    v_c: Matrix,
    config: &DistillConfig,
    optimizer: KeyOptimizer,
) -> Result<(CompressedHead, DistillTrace)> {
    check_budget(zone, k_c.rows())?;
    if k_c.shape() != v_c.shape() || k_c.cols() != zone.head_dim() {
        return Err(Error::DimensionMismatch("initial k_c / v_c shape".into()));
    }
    let start = Instant::now();
    let mut state = DistillState::new(k_c, v_c);
    let initial_loss = problem.loss(&state.k_c, &state.v_c)?.total;
    let mut loss = initial_loss;
    let mut evals = 0usize;
    let mut v_solves = 0usize;
    let mut diverged = false;
    let mut steps = Vec::with_capacity(config.outer_steps);

    for step in 1..=config.outer_steps {
        let report = match optimizer {
            KeyOptimizer::Lbfgs => optimize_keys_lbfgs(problem, &mut state, config)?,
            KeyOptimizer::FirstOrder(fo) => {
                let snapshot = state.k_c.clone();
                let r = optimize_keys_firstorder(problem, &mut state, &fo, initial_loss)?;
                if r.diverged {
                    state.k_c = snapshot;
                }
                r
            }
        };
        evals += report.grad_evals;
        if report.diverged {
            diverged = true;
            break;
        }
        loss = report.loss;

        let mut v_solved = false;
        if step % config.v_solve_every == 0 {
            let weights = problem.attention_weights(&state.k_c)?;
            let v_new = solve_values(
                &weights,
                problem.v_ret(),
                problem.target(),
                config.lambda_ridge,
            )?;
            v_solves += 1;
            let new_loss = problem.loss(&state.k_c, &v_new)?.total;
            if new_loss <= loss {
                state.v_c = v_new;
                loss = new_loss;
                state.memory.reset();
                v_solved = true;
            }
        }
        steps.push(TraceStep {
            step,
            loss,
            grad_evals: evals,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            v_solved,
            stalled: report.stalled,
        });
    }

    let head = CompressedHead::new(
        state.k_c,
        state.v_c,
        zone.retain.keys.clone(),
        zone.retain.values.clone(),
    )?;
    let trace = DistillTrace {
        initial_loss,
        final_loss: steps.last().map_or(loss, |s| s.loss),
        steps,
        grad_evals: evals,
        v_solves,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        diverged,
    };
    Ok((head, trace))
}

#[derive(Debug, Clone)]
pub struct RestartResult {
    pub best: CompressedHead,
    pub best_restart: usize,
    /// Final loss of every restart, in restart order.
    pub losses: Vec<f64>,
    pub traces: Vec<DistillTrace>,
}

/// Random old-zone subset used to seed restart `index`.
pub fn random_subset_init(
    zone: &ZoneSplit,
    k: usize,
    seed: u64,
    index: usize,
) -> Result<(Matrix, Matrix)> {
    check_budget(zone, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index));
    let mut picked = sample(&mut rng, zone.old.len(), k).into_vec();
    picked.sort_unstable();
    Ok((
        zone.old.keys.select_rows(&picked),
        zone.old.values.select_rows(&picked),
    ))
}

/// Best of `restarts` distillations: restart 0 from the top-k selection, the
/// rest from seeded random old-zone subsets.
pub fn restart_oracle(
    zone: &ZoneSplit,
    queries: &QuerySet,
    k: usize,
    config: &DistillConfig,
    restarts: usize,
) -> Result<RestartResult> {
    if restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be at least 1".into()));
    }
    config.validate()?;
    let problem = DistillProblem::from_zone(zone, queries, config.lambda_lse)?;
    let mut best: Option<(CompressedHead, usize, f64)> = None;
    let mut losses = Vec::with_capacity(restarts);
    let mut traces = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let (k_c, v_c) = if r == 0 {
            init_keys_topk(zone, queries, k)?
        } else {
            random_subset_init(zone, k, config.seed, r)?
        };
        let (head, trace) =
            run_distillation(&problem, zone, k_c, v_c, config, KeyOptimizer::Lbfgs)?;
        let loss = trace.final_loss;
        if best.as_ref().is_none_or(|b| loss < b.2) {
            best = Some((head, r, loss));
        }
        losses.push(loss);
        traces.push(trace);
    }
    let (best, best_restart, _) = best.expect("at least one restart");
    Ok(RestartResult {
        best,
        best_restart,
        losses,
        traces,
    })
}
