//! Exit criteria. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use kvsculpt_core::allocator::allocate_layers_even_heads;
use kvsculpt_core::baselines::fit_positions;
use kvsculpt_core::distiller::{distill_head_from, DistillProblem, FirstOrderConfig, KeyOptimizer};
use kvsculpt_core::evalharness::{generate_toy_cache, EvalOptions};
use kvsculpt_core::instances::{random_instance, InstanceSpec};
use kvsculpt_core::numkit::{dot, norm};
use kvsculpt_core::pipeline::{head_inputs, uniform_budget, with_threads};
use kvsculpt_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle inputs independent of the crate's samplers
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

// ---------------------------------------------------------------- gradient

/// Loop-level loss: per query row, attention over `[k_c; k_ret]` against
/// attention over the full cache.
fn naive_loss(
    k_c: &[f64],
    v_c: &Matrix,
    inst: &kvsculpt_core::instances::HeadInstance,
    lambda: f64,
) -> f64 {
    let d = v_c.cols();
    let k = v_c.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let full_k = inst.zone.full_keys();
    let full_v = inst.zone.full_values();
    let rk = &inst.zone.retain.keys;
    let rv = &inst.zone.retain.values;
    let g = inst.queries.queries.len();
    let n_q = inst.queries.queries[0].rows();
    let w = 1.0 / (g * n_q) as f64;
    let attend_rows = |q: &[f64], keys: &[&[f64]], values: &[&[f64]]| {
        let s: Vec<f64> = keys.iter().map(|kr| dot(q, kr) * scale).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
        let mut out = vec![0.0; d];
        for (x, vr) in s.iter().zip(values) {
            let p = (x - mx).exp() / z;
            for c in 0..d {
                out[c] += p * vr[c];
            }
        }
        (out, mx + z.ln())
    };
    let mut total = 0.0;
    for qh in &inst.queries.queries {
        for q in qh.iter_rows() {
            let fk: Vec<&[f64]> = full_k.iter_rows().collect();
            let fv: Vec<&[f64]> = full_v.iter_rows().collect();
            let (y, l) = attend_rows(q, &fk, &fv);
            let mut ck: Vec<&[f64]> = (0..k).map(|j| &k_c[j * d..(j + 1) * d]).collect();
            ck.extend(rk.iter_rows());
            let mut cv: Vec<&[f64]> = v_c.iter_rows().collect();
            cv.extend(rv.iter_rows());
            let (yh, lh) = attend_rows(q, &ck, &cv);
            let e: f64 = yh.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            total += w * (e + lambda * (lh - l).powi(2));
        }
    }
    total
}

fn gradient_correctness() -> Outcome {
    let spec = InstanceSpec {
        n: 16,
        m: 4,
        head_dim: 8,
        group: 2,
        n_q: 6,
        scale: 1.0,
    };
    let mut worst: f64 = 0.0;
    let mut loss_gap: f64 = 0.0;
    for seed in 0..20u64 {
        let inst = random_instance(&spec, 5000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_c = Matrix::from_fn(4, 8, |_, _| gaussian(&mut rng));
        let v_c = Matrix::from_fn(4, 8, |_, _| gaussian(&mut rng));
        let target = attention_targets(&inst.zone, &inst.queries).unwrap();
        let (loss, grad) =
            distill_loss_and_grad(&k_c, &v_c, &inst.zone.retain, &inst.queries, &target, 1.0)
                .unwrap();
        let base = k_c.as_slice().to_vec();
        loss_gap = loss_gap.max((loss - naive_loss(&base, &v_c, &inst, 1.0)).abs());
        let h = 1e-5;
        let fd: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                (naive_loss(&plus, &v_c, &inst, 1.0) - naive_loss(&minus, &v_c, &inst, 1.0))
                    / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = grad
            .as_slice()
            .iter()
            .zip(&fd)
            .map(|(a, b)| a - b)
            .collect();
        worst = worst.max(norm(&diff) / norm(&fd));
    }
    outcome(
        worst <= 1e-5 && loss_gap <= 1e-12,
        format!("max relative error {worst:.2e} (<= 1e-5), loss vs loop oracle {loss_gap:.1e}"),
    )
}

// ------------------------------------------------------------------- ridge

fn ridge_optimality() -> Outcome {
    let spec = InstanceSpec {
        n: 24,
        m: 6,
        head_dim: 8,
        group: 2,
        n_q: 10,
        scale: 1.0,
    };
    let lambda = DistillConfig::default().lambda_ridge;
    let (mut normal_worst, mut explicit_worst): (f64, f64) = (0.0, 0.0);
    for seed in 0..20u64 {
        let inst = random_instance(&spec, 7000 + seed).unwrap();
        let problem = DistillProblem::from_zone(&inst.zone, &inst.queries, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let k_c = Matrix::from_fn(5, 8, |_, _| gaussian(&mut rng));
        let weights = problem.attention_weights(&k_c).unwrap();
        let v = solve_values(&weights, problem.v_ret(), problem.target(), lambda).unwrap();

        let a = weights.a_c();
        let y = Matrix::vstack(&problem.target().y_full.iter().collect::<Vec<_>>()).unwrap();
        let b = y
            .sub(&weights.a_r().matmul(problem.v_ret()).unwrap())
            .unwrap();
        // (AᵀA + λI) V − Aᵀ B
        let lhs = a
            .t_matmul(&a)
            .unwrap()
            .matmul(&v)
            .unwrap()
            .add(&v.scale(lambda))
            .unwrap();
        let rhs = a.t_matmul(&b).unwrap();
        normal_worst = normal_worst.max(lhs.max_abs_diff(&rhs));

        // least squares on [A; √λ I] V = [B; 0] through an SVD
        let (r, k, d) = (a.rows(), a.cols(), b.cols());
        let aug = DMatrix::from_fn(r + k, k, |i, j| {
            if i < r {
                a.get(i, j)
            } else if i - r == j {
                lambda.sqrt()
            } else {
                0.0
            }
        });
        let rhs = DMatrix::from_fn(r + k, d, |i, j| if i < r { b.get(i, j) } else { 0.0 });
        let x = aug.svd(true, true).solve(&rhs, 1e-14).unwrap();
        for i in 0..k {
            for j in 0..d {
                explicit_worst = explicit_worst.max((x[(i, j)] - v.get(i, j)).abs());
            }
        }
    }
    outcome(
        normal_worst <= 1e-8 && explicit_worst <= 1e-10,
        format!(
            "normal-equation residual {normal_worst:.1e} (<= 1e-8), explicit solve gap {explicit_worst:.1e} (<= 1e-10)"
        ),
    )
}

// -------------------------------------------------------------------- rope

fn rope_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut round, mut relative): (f64, f64) = (0.0, 0.0);
    for case in 0..1000 {
        let d = 2 * rng.random_range(1..=32);
        let pairing = if case % 2 == 0 {
            RopePairing::Interleaved
        } else {
            RopePairing::HalfSplit
        };
        let cfg = RopeConfig::new(d, 10_000.0).unwrap().with_pairing(pairing);
        let q: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let k: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let p = rng.random_range(0..4096usize);
        let s = rng.random_range(0..4096usize);
        let shift = rng.random_range(0..4096usize);
        let back = rope_invert(&rope_apply(&q, p, &cfg).unwrap(), p, &cfg).unwrap();
        round = round.max(
            back.iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let a = dot(
            &rope_apply(&q, p, &cfg).unwrap(),
            &rope_apply(&k, s, &cfg).unwrap(),
        );
        let b = dot(
            &rope_apply(&q, p + shift, &cfg).unwrap(),
            &rope_apply(&k, s + shift, &cfg).unwrap(),
        );
        relative = relative.max((a - b).abs());
    }
    outcome(
        round <= 1e-12 && relative <= 1e-10,
        format!(
            "round trip {round:.1e} (<= 1e-12), relative-position gap {relative:.1e} (<= 1e-10)"
        ),
    )
}

// ------------------------------------------------------------ chunk combine

fn chunk_combine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..64usize);
        let d = 2 * rng.random_range(1..=16usize);
        let n_q = rng.random_range(1..8usize);
        let q = Matrix::from_fn(n_q, d, |_, _| 2.0 * gaussian(&mut rng));
        let k = Matrix::from_fn(n, d, |_, _| 2.0 * gaussian(&mut rng));
        let v = Matrix::from_fn(n, d, |_, _| gaussian(&mut rng));
        let split = rng.random_range(1..n);
        let whole = attend(&q, &k, &v, d).unwrap();
        let left = attend(&q, &k.slice_rows(0, split), &v.slice_rows(0, split), d).unwrap();
        let right = attend(&q, &k.slice_rows(split, n), &v.slice_rows(split, n), d).unwrap();
        let merged = combine_chunks(&left, &right).unwrap();
        worst = worst.max(whole.output.max_abs_diff(&merged.output));
        for (a, b) in whole.lse.iter().zip(&merged.lse) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max gap {worst:.1e} (<= 1e-10)"))
}

// -------------------------------------------------------------- containment

fn containment() -> Outcome {
    let spec = InstanceSpec {
        n: 8,
        m: 2,
        head_dim: 4,
        group: 2,
        n_q: 5,
        scale: 1.0,
    };
    let cfg = DistillConfig::default();
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let inst = random_instance(&spec, 9000 + seed).unwrap();
        let problem = DistillProblem::from_zone(&inst.zone, &inst.queries, cfg.lambda_lse).unwrap();
        let mut best: Option<(f64, CompressedHead)> = None;
        for i in 0..6 {
            for j in i + 1..6 {
                let head = fit_positions(&problem, &inst.zone, &[i, j], cfg.lambda_ridge).unwrap();
                let loss = problem.loss_of(&head).unwrap().total;
                if best.as_ref().is_none_or(|(l, _)| loss < *l) {
                    best = Some((loss, head));
                }
            }
        }
        let (oracle, head) = best.unwrap();
        let (_, trace) = distill_head_from(
            &inst.zone,
            &inst.queries,
            head.k_c,
            head.v_c,
            &cfg,
            KeyOptimizer::Lbfgs,
        )
        .unwrap();
        worst = worst.max(trace.final_loss - oracle);
    }
    outcome(
        worst <= 1e-9,
        format!("max (distilled - best subset) = {worst:.2e} (<= 1e-9)"),
    )
}

// ---------------------------------------------------------------- toy runs

const TOY_N: usize = 256;
const TOY_T: usize = 32;

struct ToyRun {
    model: ToyModel,
    cache: ModelKvCache,
}

fn toy_run(seed: u64) -> ToyRun {
    let cfg = ToyModelConfig::toy(seed);
    ToyRun {
        model: build_toy_model(&cfg).unwrap(),
        cache: generate_toy_cache(&cfg, TOY_N, TOY_T).unwrap(),
    }
}

fn toy_kl(run: &ToyRun, options: &CompressOptions) -> f64 {
    let out = compress_model(&run.cache, options).unwrap();
    evaluate(
        &run.model,
        &run.cache,
        &out.compressed,
        &EvalOptions::for_continuation(TOY_T, 32, 0),
    )
    .unwrap()
    .kl_mean
}

fn method_ordering(runs: &[ToyRun], kvsculpt_uniform: &[f64]) -> Outcome {
    let start = Instant::now();
    let mut means = [0.0; 4];
    for run in runs {
        for (slot, method) in [Method::Random, Method::Attn, Method::Selectfit]
            .into_iter()
            .enumerate()
        {
            let opts = CompressOptions {
                method,
                ..Default::default()
            };
            means[slot] += toy_kl(run, &opts) / runs.len() as f64;
        }
    }
    means[3] = kvsculpt_uniform.iter().sum::<f64>() / runs.len() as f64;
    let [random, attn, selectfit, kvsculpt] = means;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = kvsculpt < selectfit
        && selectfit <= attn
        && attn < random
        && kvsculpt <= 0.67 * selectfit
        && minutes < 10.0;
    outcome(
        pass,
        format!(
            "mean KL random {random:.4e}, attn {attn:.4e}, selectfit {selectfit:.4e}, kvsculpt {kvsculpt:.4e}; kvsculpt/selectfit {:.3} (<= 0.67)",
            kvsculpt / selectfit
        ),
    )
}

fn optimizer_comparison() -> Outcome {
    let start = Instant::now();
    let run = toy_run(0);
    let options = CompressOptions::default();
    let k = uniform_budget(&run.cache, &options).unwrap();
    let tasks: Vec<(usize, usize)> = (0..4).flat_map(|l| (0..2).map(move |h| (l, h))).collect();
    let rows: Vec<(f64, f64, f64)> = tasks
        .par_iter()
        .map(|&(l, h)| {
            let (zone, queries) = head_inputs(&run.cache, l, h, &options).unwrap();
            let (k0, v0) = init_keys_topk(&zone, &queries, k).unwrap();
            let cfg = options.distill;
            let (_, lbfgs) = distill_head_from(
                &zone,
                &queries,
                k0.clone(),
                v0.clone(),
                &cfg,
                KeyOptimizer::Lbfgs,
            )
            .unwrap();
            let first_order = FirstOrderConfig::equal_budget(lbfgs.grad_evals, cfg.outer_steps);
            let (_, adam) = distill_head_from(
                &zone,
                &queries,
                k0,
                v0,
                &cfg,
                KeyOptimizer::FirstOrder(first_order),
            )
            .unwrap();
            assert!(adam.grad_evals <= lbfgs.grad_evals);
            let restarts = restart_oracle(&zone, &queries, k, &cfg, 20).unwrap();
            let oracle = restarts.losses[restarts.best_restart];
            (
                lbfgs.final_loss,
                adam.final_loss,
                restarts.losses[0] / oracle,
            )
        })
        .collect();
    let lbfgs = median(rows.iter().map(|r| r.0).collect());
    let adam = median(rows.iter().map(|r| r.1).collect());
    let gap = median(rows.iter().map(|r| r.2).collect());
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        lbfgs <= 0.5 * adam && gap <= 1.10 && minutes < 10.0,
        format!(
            "median final loss lbfgs {lbfgs:.4e} vs first-order {adam:.4e}: ratio {:.3} (<= 0.5); single/20-restart median {gap:.3} (<= 1.10); {minutes:.1} min",
            lbfgs / adam
        ),
    )
}

fn layer_allocation(runs: &[ToyRun], uniform: &[f64]) -> Outcome {
    let layer: Vec<f64> = runs
        .iter()
        .map(|run| {
            toy_kl(
                run,
                &CompressOptions {
                    alloc: AllocMode::Layer,
                    ..Default::default()
                },
            )
        })
        .collect();
    let mean_u = uniform.iter().sum::<f64>() / uniform.len() as f64;
    let mean_l = layer.iter().sum::<f64>() / layer.len() as f64;
    let wins = layer.iter().zip(uniform).filter(|(l, u)| l < u).count();
    outcome(
        mean_l <= mean_u && wins >= 3,
        format!(
            "mean KL layer {mean_l:.4e} vs uniform {mean_u:.4e} (ratio {:.3} <= 1.00); strictly lower on {wins}/5 (>= 3)",
            mean_l / mean_u
        ),
    )
}

// ------------------------------------------------------------------ spread

fn spread_structure() -> Outcome {
    let alphas = [0.0, 0.3, 0.5, 0.7, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bounds = HeadBounds { floor: 4, cap: 224 };
    let mut failures = Vec::new();
    for case in 0..50 {
        let (layers, heads) = (rng.random_range(2..9usize), rng.random_range(1..5usize));
        let uniform_k = rng.random_range(8..80usize);
        let mse: Vec<Vec<f64>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| 10f64.powf(rng.random_range(-5.0..0.0)))
                    .collect()
            })
            .collect();
        let pilot = PilotReport {
            mse,
            pilot_steps: 60,
            uniform_k,
        };
        let total = uniform_k * layers * heads;
        let mut last_spread = 0;
        for &alpha in &alphas {
            let plan = allocate_layers_even_heads(&pilot, total, alpha, bounds).unwrap();
            let sum: usize = plan.k.iter().flatten().sum();
            let spread = plan.spread();
            if sum != total {
                failures.push(format!("case {case} alpha {alpha}: sum {sum} != {total}"));
            }
            if alpha == 0.0 && spread != 0 {
                failures.push(format!("case {case}: alpha 0 not uniform"));
            }
            if spread < last_spread {
                failures.push(format!("case {case} alpha {alpha}: spread decreased"));
            }
            last_spread = spread;
        }
    }
    let detail = if failures.is_empty() {
        "50 pilot reports x 5 alphas: sums exact, alpha 0 uniform, spread non-decreasing".into()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

// --------------------------------------------------------------- KL stats

/// Logits whose softmax against all-zero logits gives exactly `target` KL:
/// `KL(uniform || q)` with one raised logit `a` is increasing in `a`.
fn logits_with_kl(target: f64, vocab: usize) -> Vec<f64> {
    let v = vocab as f64;
    let kl = |a: f64| -v.ln() + (a.exp() + v - 1.0).ln() - a / v;
    let (mut lo, mut hi) = (0.0, 1.0);
    while kl(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kl(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut row = vec![0.0; vocab];
    row[0] = 0.5 * (lo + hi);
    row
}

fn kl_statistics() -> Outcome {
    let mut per_token = vec![7.17];
    per_token.extend(std::iter::repeat_n(1.2775, 4));
    per_token.extend(std::iter::repeat_n(2.696 / 123.0, 123));
    let vocab = 64;
    let rows: Vec<Vec<f64>> = per_token
        .iter()
        .map(|&t| logits_with_kl(t, vocab))
        .collect();
    let compressed = Matrix::from_rows(&rows).unwrap();
    let full = Matrix::zeros(per_token.len(), vocab);
    let stats = kl_report(&compressed, &full).unwrap();
    let ratio_err = (stats.kl_max_over_mean / 61.0 - 1.0).abs();
    let top5_err = (stats.kl_top5_fraction / 0.82 - 1.0).abs();
    outcome(
        ratio_err <= 0.01 && top5_err <= 0.01,
        format!(
            "mean {:.4}, max/mean {:.2} (61 +-1%), top-5 fraction {:.4} (0.82 +-1%)",
            stats.kl_mean, stats.kl_max_over_mean, stats.kl_top5_fraction
        ),
    )
}

// ------------------------------------------------------------- determinism

type Snapshot = (
    Vec<u8>,
    Vec<u8>,
    BudgetPlan,
    Vec<PilotReport>,
    String,
    Vec<DistillTrace>,
);

fn determinism() -> Outcome {
    let cfg = ToyModelConfig::toy(3);
    let stage = || -> Snapshot {
        let model = build_toy_model(&cfg).unwrap();
        let cache = generate_toy_cache(&cfg, 128, 16).unwrap();
        let options = CompressOptions {
            retain: 16,
            alloc: AllocMode::Head,
            ..Default::default()
        };
        let out = compress_model(&cache, &options).unwrap();
        let report = evaluate(
            &model,
            &cache,
            &out.compressed,
            &EvalOptions::for_continuation(16, 32, 0),
        )
        .unwrap();
        let traces: Vec<DistillTrace> = out.heads.iter().filter_map(|h| h.trace.clone()).collect();
        (
            encode_kvd(&KvdFile::Full(cache), FloatDtype::F64).unwrap(),
            encode_kvd(&KvdFile::Compressed(out.compressed), FloatDtype::F64).unwrap(),
            out.plan,
            out.pilots,
            serde_json::to_string(&report).unwrap(),
            traces,
        )
    };
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .max(8);
    let serial = with_threads(1, stage).unwrap();
    let wide = with_threads(threads, stage).unwrap();
    let again = with_threads(threads, stage).unwrap();
    let same = |a: &Snapshot, b: &Snapshot| {
        a.0 == b.0
            && a.1 == b.1
            && a.2 == b.2
            && a.3 == b.3
            && a.4 == b.4
            && a.5.len() == b.5.len()
            && a.5.iter().zip(&b.5).all(|(x, y)| x.same_path(y))
    };
    outcome(
        same(&serial, &wide) && same(&wide, &again),
        format!("cache, plan, pilots, compressed bytes, report and traces identical at 1 and {threads} threads"),
    )
}

// -------------------------------------------------------------------- main

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(o) => {
            println!(
                "{} {name}: {} [{secs:.1}s]",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            o.pass
        }
        Err(_) => {
            println!("FAIL {name}: panicked [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut all = true;
    all &= run("gradient vs central differences", gradient_correctness);
    all &= run("ridge value solve optimality", ridge_optimality);
    all &= run("rope exactness", rope_exactness);
    all &= run("chunk combine equivalence", chunk_combine);
    all &= run("distillation contains best subset", containment);
    all &= run("budget spread structure", spread_structure);
    all &= run("per-token KL statistics", kl_statistics);

    let runs: Vec<ToyRun> = (0..5).map(toy_run).collect();
    let started = Instant::now();
    let kvsculpt_uniform: Vec<f64> = runs
        .iter()
        .map(|r| toy_kl(r, &CompressOptions::default()))
        .collect();
    let shared = started.elapsed().as_secs_f64();
    all &= run("method ordering on toy model", || {
        let mut o = method_ordering(&runs, &kvsculpt_uniform);
        o.detail += &format!(" (+{shared:.1}s shared kvsculpt runs)");
        o
    });
    all &= run("optimizer comparison and restarts", optimizer_comparison);
    all &= run("pilot layer allocation vs uniform", || {
        layer_allocation(&runs, &kvsculpt_uniform)
    });
    all &= run("pipeline determinism", determinism);

    if !all {
        std::process::exit(1);
    }
}
