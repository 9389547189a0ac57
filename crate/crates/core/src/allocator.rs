//! Pilot-MSE budget allocation across layers and KV heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-(layer, KV head) difficulty from a short uniform-budget run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    /// `mse[layer][kv_head]`, output term only.
    pub mse: Vec<Vec<f64>>,
    pub pilot_steps: usize,
    pub uniform_k: usize,
}

impl PilotReport {
    pub fn num_layers(&self) -> usize {
        self.mse.len()
    }

    pub fn num_heads(&self) -> usize {
        self.mse.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.num_heads();
        if self.mse.is_empty() || h == 0 || self.mse.iter().any(|l| l.len() != h) {
            return Err(Error::DimensionMismatch(
                "pilot MSE grid must be rectangular".into(),
            ));
        }
        if self
            .mse
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidConfig(
                "pilot MSE must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_means(&self) -> Vec<f64> {
        self.mse
            .iter()
            .map(|l| l.iter().sum::<f64>() / l.len() as f64)
            .collect()
    }
}

/// Pairs kept per (layer, KV head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// `k[layer][kv_head]`
    pub k: Vec<Vec<usize>>,
    pub total: usize,
    pub alpha: f64,
    pub k_min_floor: usize,
}

impl BudgetPlan {
    pub fn uniform(num_layers: usize, num_heads: usize, k: usize) -> Self {
        Self {
            k: vec![vec![k; num_heads]; num_layers],
            total: k * num_layers * num_heads,
            alpha: 0.0,
            k_min_floor: k,
        }
    }

    pub fn k_min(&self) -> usize {
        self.k.iter().flatten().copied().min().unwrap_or(0)
    }

    pub fn k_max(&self) -> usize {
        self.k.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn spread(&self) -> usize {
        self.k_max() - self.k_min()
    }

    pub fn layer_totals(&self) -> Vec<usize> {
        self.k.iter().map(|l| l.iter().sum()).collect()
    }

    /// Checks conservation, floors and the per-head cap `zone_len`.
    pub fn validate(&self, num_layers: usize, num_heads: usize, zone_len: usize) -> Result<()> {
        if self.k.len() != num_layers || self.k.iter().any(|l| l.len() != num_heads) {
            return Err(Error::DimensionMismatch(format!(
                "plan grid does not match {num_layers} layers x {num_heads} heads"
            )));
        }
        let sum: usize = self.k.iter().flatten().sum();
        if sum != self.total {
            return Err(Error::InvalidConfig(format!(
                "plan sums to {sum}, total says {}",
                self.total
            )));
        }
        if self.k_min_floor == 0 || self.k_min() < self.k_min_floor {
            return Err(Error::BudgetTooSmall(format!(
                "a head has {} pairs, below the floor {}",
                self.k_min(),
                self.k_min_floor
            )));
        }
        if self.k_max() > zone_len {
            return Err(Error::BudgetExceedsZone {
                k: self.k_max(),
                zone: zone_len,
            });
        }
        Ok(())
    }
}

/// Per-head bounds shared by both allocation levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadBounds {
    pub floor: usize,
    /// Usually the compress-zone length `N − m`.
    pub cap: usize,
}

fn dampened(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "alpha = {alpha} must be >= 0"
        )));
    }
    Ok(values.iter().map(|v| v.powf(alpha)).collect())
}

/// Layer budgets proportional to `(mean_h MSE_{l,h})^alpha`.
pub fn allocate_layers(
    pilot: &PilotReport,
    total: usize,
    alpha: f64,
    bounds: HeadBounds,
) -> Result<Vec<usize>> {
    pilot.validate()?;
    let h = pilot.num_heads();
    let weights = dampened(&pilot.layer_means(), alpha)?;
    let l = weights.len();
    round_budgets(
        &weights,
        total,
        &vec![bounds.floor * h; l],
        &vec![bounds.cap * h; l],
    )
}

/// Splits each layer budget across its heads proportional to `MSE_{l,h}^alpha`.
pub fn allocate_heads(
    pilot: &PilotReport,
    layer_budgets: &[usize],
    alpha: f64,
    bounds: HeadBounds,
) -> Result<BudgetPlan> {
    pilot.validate()?;
    if layer_budgets.len() != pilot.num_layers() {
        return Err(Error::DimensionMismatch(
            "one budget per layer required".into(),
        ));
    }
    let h = pilot.num_heads();
    let k = pilot
        .mse
        .iter()
        .zip(layer_budgets)
        .map(|(row, &b)| {
            round_budgets(
                &dampened(row, alpha)?,
                b,
                &vec![bounds.floor; h],
                &vec![bounds.cap; h],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BudgetPlan {
        k,
        total: layer_budgets.iter().sum(),
        alpha,
        k_min_floor: bounds.floor,
    })
}

/// Layer-level allocation with an even split inside each layer.
pub fn allocate_layers_even_heads(
    pilot: &PilotReport,
    total: usize,
    alpha: f64,
    bounds: HeadBounds,
) -> Result<BudgetPlan> {
    let layers = allocate_layers(pilot, total, alpha, bounds)?;
    let mut plan = allocate_heads(pilot, &layers, 0.0, bounds)?;
    plan.alpha = alpha;
    Ok(plan)
}

/// Integer apportionment of `total` proportional to `weights` within
/// `[floors[i], caps[i]]`.
///
/// Entries that hit a bound are pinned there and the rest share the remainder
/// proportionally; the real-valued quotas are then rounded by largest
/// remainder with the lowest index winning ties. All-zero weights split evenly.
pub fn round_budgets(
    weights: &[f64],
    total: usize,
    floors: &[usize],
    caps: &[usize],
) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 || floors.len() != n || caps.len() != n {
        return Err(Error::DimensionMismatch(
            "weights, floors and caps must have equal nonzero length".into(),
        ));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig(
            "weights must be finite and >= 0".into(),
        ));
    }
    if floors.iter().zip(caps).any(|(f, c)| f > c) {
        return Err(Error::InvalidConfig("a floor exceeds its cap".into()));
    }
    let floor_sum: usize = floors.iter().sum();
    let cap_sum: usize = caps.iter().sum();
    if total < floor_sum {
        return Err(Error::BudgetTooSmall(format!(
            "total {total} is below the sum of floors {floor_sum}"
        )));
    }
    if total > cap_sum {
        return Err(Error::BudgetExceedsZone {
            k: total,
            zone: cap_sum,
        });
    }

    let quotas = quotas(weights, total as f64, floors, caps);
    let mut out: Vec<usize> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (q.floor() as usize).clamp(floors[i], caps[i]))
        .collect();
    let mut assigned: usize = out.iter().sum();

    // hand out the remainder by largest fractional part
    while assigned < total {
        let pick = (0..n)
            .filter(|&i| out[i] < caps[i])
            .max_by(|&a, &b| {
                (quotas[a] - out[a] as f64)
                    .total_cmp(&(quotas[b] - out[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("total <= sum of caps");
        out[pick] += 1;
        assigned += 1;
    }
    while assigned > total {
        let pick = (0..n)
            .filter(|&i| out[i] > floors[i])
            .min_by(|&a, &b| {
                (quotas[a] - out[a] as f64)
                    .total_cmp(&(quotas[b] - out[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("total >= sum of floors");
        out[pick] -= 1;
        assigned -= 1;
    }
    Ok(out)
}

/// Real-valued clamped proportional shares summing to `total`.
fn quotas(weights: &[f64], total: f64, floors: &[usize], caps: &[usize]) -> Vec<f64> {
    let n = weights.len();
    let lo: Vec<f64> = floors.iter().map(|&f| f as f64).collect();
    let hi: Vec<f64> = caps.iter().map(|&c| c as f64).collect();
    let positive: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    if positive.is_empty() {
        return quotas(&vec![1.0; n], total, floors, caps);
    }

    let filled = |t: f64| -> f64 { (0..n).map(|i| (t * weights[i]).clamp(lo[i], hi[i])).sum() };
    let t_max = positive
        .iter()
        .map(|&i| hi[i] / weights[i])
        .fold(0.0f64, f64::max);
    let zero: Vec<usize> = (0..n).filter(|&i| weights[i] == 0.0).collect();
    if !zero.is_empty() && filled(t_max) < total {
        // positive weights saturate; zero-weight entries share what is left
        let rest = total - filled(t_max);
        let sub = quotas(
            &vec![1.0; zero.len()],
            rest + zero.iter().map(|&i| lo[i]).sum::<f64>(),
            &zero.iter().map(|&i| floors[i]).collect::<Vec<_>>(),
            &zero.iter().map(|&i| caps[i]).collect::<Vec<_>>(),
        );
        let mut out: Vec<f64> = (0..n)
            .map(|i| (t_max * weights[i]).clamp(lo[i], hi[i]))
            .collect();
        for (j, &i) in zero.iter().enumerate() {
            out[i] = sub[j];
        }
        return out;
    }

    // water level t with Σ clamp(t·w) = total
    let (mut a, mut b) = (0.0, t_max);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if filled(mid) < total {
            a = mid;
        } else {
            b = mid;
        }
    }
    let t = b;

    // pinned entries keep their bound; free ones share the rest exactly
    let mut out = vec![0.0; n];
    let mut free = Vec::new();
    let mut pinned_sum = 0.0;
    for i in 0..n {
        let x = t * weights[i];
        if x <= lo[i] {
            out[i] = lo[i];
            pinned_sum += lo[i];
        } else if x >= hi[i] {
            out[i] = hi[i];
            pinned_sum += hi[i];
        } else {
            free.push(i);
        }
    }
    let w_free: f64 = free.iter().map(|&i| weights[i]).sum();
    if w_free > 0.0 {
        let rest = total - pinned_sum;
        for &i in &free {
            out[i] = rest * weights[i] / w_free;
        }
    }
    out
}
