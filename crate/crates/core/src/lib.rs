//! Compresses transformer KV caches by distilling the oldest cache rows of
//! each head into a few freely optimized key/value pairs.
//!
//! The crate covers the numerical core (attention, RoPE, ridge solves), the
//! per-head distiller and its eviction baselines, pilot-based budget
//! allocation, the KVD cache file format and a seeded toy transformer for
//! end-to-end evaluation.

pub mod allocator;
pub mod attention;
pub mod baselines;
pub mod cachestore;
pub mod distiller;
pub mod error;
pub mod evalharness;
pub mod instances;
pub mod numkit;
pub mod pipeline;
pub mod queries;
pub mod rope;
pub mod seeds;

pub use allocator::{
    allocate_heads, allocate_layers, allocate_layers_even_heads, round_budgets, BudgetPlan,
    HeadBounds, PilotReport,
};
pub use attention::{attend, combine_chunks, gqa_expand, AttentionOutput, ModelShape};
pub use baselines::{evict_attn_score, evict_random, select_and_fit, BaselineMethod, Method};
pub use cachestore::{
    budget_for_ratio, compression_ratio, decode_kvd, encode_kvd, kvd_float_tensor, read_kvd,
    split_zones, write_kvd, CompressedCache, CompressedHead, FloatDtype, HeadCache, KvdFile,
    ModelKvCache, ZoneSplit,
};
pub use distiller::{
    attention_targets, distill_head, distill_loss_and_grad, init_keys_topk, restart_oracle,
    solve_values, AttentionTarget, AttentionWeights, DistillConfig, DistillTrace,
};
pub use error::{Error, KvdError, Result};
pub use evalharness::{build_toy_model, evaluate, kl_report, EvalReport, ToyModel, ToyModelConfig};
pub use numkit::{ridge_solve, Matrix, RidgeProblem};
pub use pipeline::{compress_model, AllocMode, CompressOptions, CompressOutcome};
pub use queries::{build_training_queries, QuerySet, QueryStrategy};
pub use rope::{rope_apply, rope_invert, RopeConfig, RopePairing};
