//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Search directions come from the two-loop recursion over a bounded history
//! of `(s, y)` pairs; step lengths from a bracketing/zoom line search with
//! safeguarded cubic interpolation. The driver is generic over any
//! differentiable objective so it can be checked on closed-form problems.

use std::collections::VecDeque;

use crate::error::Result;
use crate::numkit::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsParams {
    /// Initial trial step of the line search.
    pub lr: f64,
    /// Quasi-Newton iterations per call.
    pub max_iters: usize,
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_ls: usize,
    pub tol_grad: f64,
    pub tol_change: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iters: 10,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_ls: 20,
            tol_grad: 1e-12,
            tol_change: 1e-14,
        }
    }
}

/// Curvature pairs carried between calls.
#[derive(Debug, Clone, Default)]
pub struct LbfgsMemory {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
}

impl LbfgsMemory {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, ys: f64, cap: usize) {
        if cap == 0 {
            return;
        }
        if self.s.len() == cap {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.rho.push_back(1.0 / ys);
    }

    /// `-H·g` via the two-loop recursion with `H₀ = γI`, `γ = sᵀy / yᵀy`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let n = self.s.len();
        let mut alpha = vec![0.0; n];
        for i in (0..n).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            for qj in q.iter_mut() {
                *qj *= gamma;
            }
        }
        for i in 0..n {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOutcome {
    /// Objective at the returned point.
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    /// A line search found no acceptable point; the iterate was left in place.
    pub stalled: bool,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Runs up to `params.max_iters` L-BFGS iterations from `x`, updating it in
/// place. `objective(x, grad)` returns `f(x)` and writes `∇f(x)` to `grad`.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x: &mut [f64],
    memory: &mut LbfgsMemory,
    params: &LbfgsParams,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = objective(x, &mut g)?;
    let mut out = LbfgsOutcome {
        f,
        evals: 1,
        iterations: 0,
        stalled: false,
    };
    if max_abs(&g) <= params.tol_grad {
        return Ok(out);
    }

    for _ in 0..params.max_iters {
        let mut d = memory.direction(&g);
        let mut gtd = dot(&g, &d);
        if !(gtd < -params.tol_change) {
            // not a descent direction: drop the curvature history
            memory.reset();
            d = g.iter().map(|v| -v).collect();
            gtd = -dot(&g, &g);
        }
        let t0 = if memory.is_empty() {
            (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>()) * params.lr
        } else {
            params.lr
        };

        let ls = strong_wolfe(&mut objective, x, t0, &d, f, &g, gtd, params)?;
        out.evals += ls.evals;
        out.iterations += 1;

        let armijo = ls.t > 0.0 && ls.f <= f + params.c1 * ls.t * gtd;
        if !(ls.wolfe || armijo) {
            out.stalled = true;
            memory.reset();
            break;
        }

        let s: Vec<f64> = d.iter().map(|di| ls.t * di).collect();
        let y: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            memory.push(s.clone(), y, ys, params.history);
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let f_prev = f;
        f = ls.f;
        g = ls.g;
        out.f = f;

        if max_abs(&g) <= params.tol_grad
            || (f_prev - f).abs() < params.tol_change
            || max_abs(&s) <= params.tol_change
        {
            break;
        }
    }
    Ok(out)
}

struct LineSearch {
    f: f64,
    g: Vec<f64>,
    t: f64,
    evals: usize,
    wolfe: bool,
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `bounds` (default: the interval between the points).
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    (lo + hi) / 2.0
}

#[derive(Clone)]
struct Point {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    objective: &mut F,
    x: &[f64],
    t_init: f64,
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    params: &LbfgsParams,
) -> Result<LineSearch>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let d_norm = max_abs(d);
    let mut trial = vec![0.0; x.len()];
    let mut eval = |t: f64, objective: &mut F| -> Result<Point> {
        for ((xt, xi), di) in trial.iter_mut().zip(x).zip(d) {
            *xt = xi + t * di;
        }
        let mut g = vec![0.0; x.len()];
        let f = objective(&trial, &mut g)?;
        let gtd = dot(&g, d);
        Ok(Point { t, f, g, gtd })
    };

    let origin = Point {
        t: 0.0,
        f: f0,
        g: g0.to_vec(),
        gtd: gtd0,
    };
    let armijo_fails = |p: &Point| p.f > f0 + params.c1 * p.t * gtd0;
    let curvature_holds = |p: &Point| p.gtd.abs() <= -params.c2 * gtd0;

    let mut t = t_init;
    let mut cur = eval(t, objective)?;
    let mut evals = 1usize;
    let mut prev = origin.clone();
    let mut ls_iter = 0usize;
    let mut done = false;
    let mut bracket: Vec<Point> = Vec::new();

    // bracketing phase
    while ls_iter < params.max_ls {
        if armijo_fails(&cur) || (ls_iter > 1 && cur.f >= prev.f) {
            bracket = vec![prev.clone(), cur.clone()];
            break;
        }
        if curvature_holds(&cur) {
            bracket = vec![cur.clone()];
            done = true;
            break;
        }
        if cur.gtd >= 0.0 {
            bracket = vec![prev.clone(), cur.clone()];
            break;
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        t = cubic_interpolate(
            prev.t,
            prev.f,
            prev.gtd,
            t,
            cur.f,
            cur.gtd,
            Some((min_step, max_step)),
        );
        prev = cur;
        cur = eval(t, objective)?;
        evals += 1;
        ls_iter += 1;
    }
    if ls_iter == params.max_ls {
        bracket = vec![origin.clone(), cur.clone()];
    }

    // zoom phase
    let order = |b: &[Point]| {
        if b[0].f <= b[b.len() - 1].f {
            (0, 1)
        } else {
            (1, 0)
        }
    };
    let (mut low, mut high) = order(&bracket);
    let mut insufficient_progress = false;
    while !done && ls_iter < params.max_ls && bracket.len() == 2 {
        let (b0, b1) = (bracket[0].t, bracket[1].t);
        if (b1 - b0).abs() * d_norm < params.tol_change {
            break;
        }
        let mut tz = cubic_interpolate(
            b0,
            bracket[0].f,
            bracket[0].gtd,
            b1,
            bracket[1].f,
            bracket[1].gtd,
            None,
        );
        let (bmin, bmax) = (b0.min(b1), b0.max(b1));
        let eps = 0.1 * (bmax - bmin);
        if (bmax - tz).min(tz - bmin) < eps {
            if insufficient_progress || tz >= bmax || tz <= bmin {
                tz = if (tz - bmax).abs() < (tz - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insufficient_progress = false;
            } else {
                insufficient_progress = true;
            }
        } else {
            insufficient_progress = false;
        }

        let p = eval(tz, objective)?;
        evals += 1;
        ls_iter += 1;

        if armijo_fails(&p) || p.f >= bracket[low].f {
            bracket[high] = p;
            (low, high) = order(&bracket);
        } else {
            if curvature_holds(&p) {
                done = true;
            } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = p;
        }
    }

    let best = if bracket.len() == 1 {
        bracket.swap_remove(0)
    } else {
        bracket.swap_remove(low)
    };
    Ok(LineSearch {
        f: best.f,
        g: best.g,
        t: best.t,
        evals,
        wolfe: done,
    })
}
