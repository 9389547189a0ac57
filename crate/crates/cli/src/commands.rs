use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::Deserialize;

use kvsculpt_core::allocator::{allocate_heads, allocate_layers, allocate_layers_even_heads};
use kvsculpt_core::evalharness::{generate_toy_cache, EvalOptions};
use kvsculpt_core::{
    build_toy_model, compress_model, evaluate, read_kvd, write_kvd, AllocMode, CompressOptions,
    CompressedCache, HeadBounds, KvdFile, ModelKvCache, PilotReport,
};

use crate::config::{require, RunConfig};
use crate::reports::{write_json, write_jsonl, write_plot_data, CompressReport, EvalRecord};
use crate::{CliError, UsageError};

type CmdResult = Result<(), CliError>;

fn read_full(path: &Path) -> anyhow::Result<ModelKvCache> {
    match read_kvd(path).with_context(|| format!("reading {}", path.display()))? {
        KvdFile::Full(c) => Ok(c),
        KvdFile::Compressed(_) => bail!(
            "{} holds a compressed cache, expected a full one",
            path.display()
        ),
    }
}

fn read_compressed(path: &Path) -> anyhow::Result<CompressedCache> {
    match read_kvd(path).with_context(|| format!("reading {}", path.display()))? {
        KvdFile::Compressed(c) => Ok(c),
        KvdFile::Full(_) => bail!(
            "{} holds a full cache, expected a compressed one",
            path.display()
        ),
    }
}

fn achieved_ratio(c: &CompressedCache) -> f64 {
    let heads: Vec<usize> = c.heads.iter().flatten().map(|h| h.k()).collect();
    let mean_k = heads.iter().sum::<usize>() as f64 / heads.len() as f64;
    (mean_k + c.retain() as f64) / c.context_len as f64
}

pub fn gen(cfg: &RunConfig) -> CmdResult {
    let out = require(&cfg.out, "out")?;
    let model = cfg.toy_model()?;
    let cache = generate_toy_cache(&model, cfg.ctx, cfg.cont)?;
    write_kvd(out, &KvdFile::Full(cache), cfg.dtype)
        .with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "wrote {} (N = {}, T = {})",
        out.display(),
        cfg.ctx,
        cfg.cont
    );
    Ok(())
}

pub fn compress(cfg: &RunConfig) -> CmdResult {
    let input = require(&cfg.cache, "cache")?;
    let out = require(&cfg.out, "out")?;
    let options = cfg.compress_options()?;
    let cache = read_full(input)?;
    let outcome = compress_model(&cache, &options)?;
    write_kvd(
        out,
        &KvdFile::Compressed(outcome.compressed.clone()),
        cfg.dtype,
    )
    .with_context(|| format!("writing {}", out.display()))?;

    if let Some(path) = &cfg.trace {
        let rows = outcome
            .heads
            .iter()
            .filter_map(|h| h.trace.as_ref().map(|t| t.records(h.layer, h.head)))
            .flatten();
        write_jsonl(path, rows)?;
    }
    if let Some(path) = &cfg.pilot_out {
        write_json(Some(path), &outcome.pilots)?;
    }
    let report = CompressReport {
        method: options.method,
        alloc: options.alloc,
        ratio: options.ratio,
        achieved_ratio: achieved_ratio(&outcome.compressed),
        retain: options.retain,
        context_len: cache.context_len(),
        seed: cfg.seed,
        plan: outcome.plan,
        pilots: outcome.pilots,
        heads: outcome.heads,
        wall_ms: outcome.wall_ms,
    };
    write_json(cfg.report.as_deref(), &report)?;
    log::info!(
        "wrote {} (ratio {:.4}, {:.0} ms)",
        out.display(),
        report.achieved_ratio,
        report.wall_ms
    );
    Ok(())
}

/// A pilot file holds one report or the list written by `compress --pilot-out`.
#[derive(Deserialize)]
#[serde(untagged)]
enum PilotFile {
    One(PilotReport),
    Many(Vec<PilotReport>),
}

pub fn allocate(cfg: &RunConfig) -> CmdResult {
    let path = require(&cfg.pilot, "pilot")?;
    let budget = cfg
        .budget
        .ok_or_else(|| UsageError("missing required --budget".into()))?;
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return Err(UsageError(format!("--alpha {} must be >= 0", cfg.alpha)).into());
    }
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pilots =
        match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
            PilotFile::One(p) => vec![p],
            PilotFile::Many(v) => v,
        };
    let (layer_pilot, head_pilot) = match pilots.as_slice() {
        [one] => (one, one),
        [l, h] => (l, h),
        _ => {
            return Err(anyhow!("expected one or two pilot reports, found {}", pilots.len()).into())
        }
    };
    let bounds = HeadBounds {
        floor: cfg.k_min_floor,
        cap: cfg.cap.unwrap_or(budget),
    };
    let plan = match cfg.alloc {
        AllocMode::Uniform => allocate_layers_even_heads(layer_pilot, budget, 0.0, bounds)?,
        AllocMode::Layer => allocate_layers_even_heads(layer_pilot, budget, cfg.alpha, bounds)?,
        AllocMode::Head => {
            let layers = allocate_layers(layer_pilot, budget, cfg.alpha, bounds)?;
            allocate_heads(head_pilot, &layers, cfg.alpha, bounds)?
        }
    };
    write_json(cfg.out.as_deref(), &plan)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CmdResult {
    let full_path = require(&cfg.cache, "cache")?;
    let sweep = !cfg.ratios.is_empty();
    let options = cfg.compress_options()?;
    if sweep {
        require(&cfg.out_dir, "out-dir")?;
        if let Some(r) = cfg.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(UsageError(format!("ratio {r} outside (0, 1]")).into());
        }
    } else {
        require(&cfg.compressed, "compressed")?;
    }

    let full = read_full(full_path)?;
    let toy = full.toy_model.as_ref().ok_or_else(|| {
        anyhow!(
            "{} has no toy model config; logits cannot be recomputed",
            full_path.display()
        )
    })?;
    let t = full
        .reference
        .as_ref()
        .map(|r| r.tokens.len())
        .ok_or_else(|| anyhow!("{} has no reference continuation", full_path.display()))?;
    let model = build_toy_model(toy)?;
    let mut eval_opts = EvalOptions::for_continuation(t, cfg.n_s, cfg.seed);
    eval_opts.strategy = cfg.strategy;
    eval_opts.near_t = cfg.near.unwrap_or(eval_opts.near_t);
    eval_opts.far_t = cfg.far.unwrap_or(eval_opts.far_t);

    let run = |compressed: &CompressedCache, method, out: Option<&Path>, plot: Option<&Path>| {
        let report = evaluate(&model, &full, compressed, &eval_opts)?;
        if let Some(prefix) = plot {
            write_plot_data(prefix, &report)?;
        }
        let record = EvalRecord {
            ratio: achieved_ratio(compressed),
            method,
            report,
        };
        log::info!(
            "ratio {:.4}: KL {:.4e}",
            record.ratio,
            record.report.kl_mean
        );
        write_json(out, &record)
    };

    if !sweep {
        let compressed = read_compressed(require(&cfg.compressed, "compressed")?)?;
        run(
            &compressed,
            None,
            cfg.out.as_deref(),
            cfg.plot_data.as_deref(),
        )?;
        return Ok(());
    }
    let dir = require(&cfg.out_dir, "out-dir")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for &ratio in &cfg.ratios {
        let opts = CompressOptions { ratio, ..options };
        let outcome = compress_model(&full, &opts)?;
        let out = dir.join(format!("eval_r{ratio}.json"));
        let plot = cfg
            .plot_data
            .as_ref()
            .map(|p| dir.join(format!("{}_r{ratio}", p.display())));
        run(
            &outcome.compressed,
            Some(opts.method),
            Some(&out),
            plot.as_deref(),
        )?;
    }
    Ok(())
}
