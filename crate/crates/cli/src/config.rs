//! Run configuration: defaults, an optional JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use kvsculpt_core::{
    AllocMode, CompressOptions, DistillConfig, FloatDtype, Method, ModelShape, QueryStrategy,
    RopeConfig, ToyModelConfig,
};

use crate::UsageError;

/// Every tunable of every subcommand. A `--config` file may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; per-task seeds derive from it.
    pub seed: u64,
    pub dtype: FloatDtype,

    pub layers: usize,
    pub qheads: usize,
    pub kvheads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub ctx: usize,
    pub cont: usize,
    pub weight_scale: f64,
    pub qk_bias: f64,
    pub theta: f64,

    pub ratio: f64,
    pub retain: usize,
    pub method: Method,
    pub alloc: AllocMode,
    pub alpha: f64,
    pub pilot_steps: usize,
    pub head_pilot_steps: usize,
    pub k_min_floor: usize,
    pub strategy: QueryStrategy,
    pub outer_steps: usize,
    pub v_solve_every: usize,
    pub lbfgs_lr: f64,
    pub lbfgs_inner_iters: usize,
    pub lbfgs_history: usize,
    pub lambda_lse: f64,
    pub lambda_ridge: f64,
    pub n_synth: usize,

    pub budget: Option<usize>,
    pub cap: Option<usize>,

    pub n_s: usize,
    pub near: Option<usize>,
    pub far: Option<usize>,
    pub ratios: Vec<f64>,

    pub cache: Option<PathBuf>,
    pub compressed: Option<PathBuf>,
    pub pilot: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub pilot_out: Option<PathBuf>,
    pub plot_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opts = CompressOptions::default();
        let d = opts.distill;
        Self {
            seed: 0,
            dtype: FloatDtype::F64,
            layers: 4,
            qheads: 4,
            kvheads: 2,
            dim: 16,
            vocab: 64,
            ctx: 256,
            cont: 32,
            weight_scale: ToyModelConfig::DEFAULT_WEIGHT_SCALE,
            qk_bias: ToyModelConfig::DEFAULT_QK_BIAS,
            theta: RopeConfig::DEFAULT_THETA,
            ratio: opts.ratio,
            retain: opts.retain,
            method: opts.method,
            alloc: opts.alloc,
            alpha: opts.alpha,
            pilot_steps: opts.layer_pilot_steps,
            head_pilot_steps: opts.head_pilot_steps,
            k_min_floor: opts.k_min_floor,
            strategy: opts.query_strategy,
            outer_steps: d.outer_steps,
            v_solve_every: d.v_solve_every,
            lbfgs_lr: d.lbfgs_lr,
            lbfgs_inner_iters: d.lbfgs_inner_iters,
            lbfgs_history: d.lbfgs_history,
            lambda_lse: d.lambda_lse,
            lambda_ridge: d.lambda_ridge,
            n_synth: d.n_synth,
            budget: None,
            cap: None,
            n_s: 32,
            near: None,
            far: None,
            ratios: Vec::new(),
            cache: None,
            compressed: None,
            pilot: None,
            out: None,
            out_dir: None,
            report: None,
            trace: None,
            pilot_out: None,
            plot_data: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))
    }

    pub fn toy_model(&self) -> Result<ToyModelConfig, UsageError> {
        let shape =
            ModelShape::new(self.layers, self.qheads, self.kvheads, self.dim).map_err(usage)?;
        let mut cfg = ToyModelConfig::new(shape, self.vocab, self.seed).map_err(usage)?;
        cfg.rope = RopeConfig::new(self.dim, self.theta).map_err(usage)?;
        cfg.weight_scale = self.weight_scale;
        cfg.qk_bias = self.qk_bias;
        cfg.validate().map_err(usage)?;
        if self.ctx == 0 || self.cont == 0 {
            return Err(UsageError("--ctx and --cont must be >= 1".into()));
        }
        Ok(cfg)
    }

    /// Compression options; checks that need the cache length happen later.
    pub fn compress_options(&self) -> Result<CompressOptions, UsageError> {
        let distill = DistillConfig {
            outer_steps: self.outer_steps,
            v_solve_every: self.v_solve_every,
            lbfgs_lr: self.lbfgs_lr,
            lbfgs_inner_iters: self.lbfgs_inner_iters,
            lbfgs_history: self.lbfgs_history,
            lambda_lse: self.lambda_lse,
            lambda_ridge: self.lambda_ridge,
            n_synth: self.n_synth,
            seed: self.seed,
        };
        distill.validate().map_err(usage)?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(UsageError(format!("--ratio {} outside (0, 1]", self.ratio)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(UsageError(format!("--alpha {} must be >= 0", self.alpha)));
        }
        if self.retain == 0 {
            return Err(UsageError("--retain must be >= 1".into()));
        }
        Ok(CompressOptions {
            ratio: self.ratio,
            retain: self.retain,
            method: self.method,
            query_strategy: self.strategy,
            distill,
            alloc: self.alloc,
            alpha: self.alpha,
            k_min_floor: self.k_min_floor,
            layer_pilot_steps: self.pilot_steps,
            head_pilot_steps: self.head_pilot_steps,
        })
    }
}

fn usage(e: kvsculpt_core::Error) -> UsageError {
    UsageError(e.to_string())
}

pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, UsageError> {
    path.as_deref()
        .ok_or_else(|| UsageError(format!("missing required --{flag}")))
}

macro_rules! overlay {
    ($src:expr, $dst:expr; $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = $src.$field.clone() {
                $dst.$field = v.into();
            }
        )*
    };
}

#[derive(Debug, Clone, Args)]
pub struct CommonFlags {
    /// JSON file with any RunConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub qheads: Option<usize>,
    #[arg(long)]
    pub kvheads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Context length N.
    #[arg(long)]
    pub ctx: Option<usize>,
    /// Teacher-forced continuation length T.
    #[arg(long)]
    pub cont: Option<usize>,
    #[arg(long)]
    pub weight_scale: Option<f64>,
    #[arg(long)]
    pub qk_bias: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        overlay!(self, cfg; layers, qheads, kvheads, dim, vocab, ctx, cont, weight_scale, qk_bias, theta);
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompressFlags {
    /// Target ratio r = (k + m) / N.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Retain-zone size m.
    #[arg(long)]
    pub retain: Option<usize>,
    /// random | attn | selectfit | kvsculpt
    #[arg(long)]
    pub method: Option<Method>,
    /// uniform | layer | head
    #[arg(long)]
    pub alloc: Option<AllocMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Outer steps of the layer-level pilot.
    #[arg(long)]
    pub pilot_steps: Option<usize>,
    #[arg(long)]
    pub head_pilot_steps: Option<usize>,
    #[arg(long)]
    pub k_min_floor: Option<usize>,
    /// uniform | bootstrap | random | kmeans | farthest
    #[arg(long)]
    pub strategy: Option<QueryStrategy>,
    #[arg(long)]
    pub outer_steps: Option<usize>,
    #[arg(long)]
    pub v_solve_every: Option<usize>,
    #[arg(long)]
    pub lbfgs_lr: Option<f64>,
    #[arg(long)]
    pub lbfgs_inner_iters: Option<usize>,
    #[arg(long)]
    pub lbfgs_history: Option<usize>,
    #[arg(long)]
    pub lambda_lse: Option<f64>,
    #[arg(long)]
    pub lambda_ridge: Option<f64>,
    /// Synthetic training queries per q-head.
    #[arg(long)]
    pub n_synth: Option<usize>,
}

impl CompressFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        overlay!(self, cfg;
            ratio, retain, method, alloc, alpha, pilot_steps, head_pilot_steps, k_min_floor,
            strategy, outer_steps, v_solve_every, lbfgs_lr, lbfgs_inner_iters, lbfgs_history,
            lambda_lse, lambda_ridge, n_synth);
    }
}

pub(crate) use overlay;
