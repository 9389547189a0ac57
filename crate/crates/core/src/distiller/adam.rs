//! Adaptive-moment first-order updates.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates; persist across calls.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected update of `x` along `grad`.
pub fn adam_step(params: &AdamParams, state: &mut AdamState, x: &mut [f64], grad: &[f64]) {
    if state.m.len() != x.len() {
        state.m = vec![0.0; x.len()];
        state.v = vec![0.0; x.len()];
        state.t = 0;
    }
    state.t += 1;
    let bc1 = 1.0 - params.beta1.powi(state.t as i32);
    let bc2 = 1.0 - params.beta2.powi(state.t as i32);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = params.beta1 * state.m[i] + (1.0 - params.beta1) * g;
        state.v[i] = params.beta2 * state.v[i] + (1.0 - params.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        x[i] -= params.lr * m_hat / (v_hat.sqrt() + params.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut x = vec![0.5, -1.0, 2.0];
        let mut st = AdamState::default();
        for _ in 0..10 {
            adam_step(&AdamParams::default(), &mut st, &mut x, &[0.0; 3]);
        }
        assert_eq!(x, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut x = vec![1.0, 1.0];
        let mut st = AdamState::default();
        adam_step(&AdamParams::default(), &mut st, &mut x, &[3.0, -0.2]);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        assert!((x[0] - (1.0 - 1e-2 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((x[1] - (1.0 + 1e-2 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn scalar_quadratic_approaches_minimum_monotonically_after_warmup() {
        // f(x) = (x - 3)², far start so the distance shrinks steadily
        let mut x = vec![0.0];
        let mut st = AdamState::default();
        let mut dist = Vec::new();
        for _ in 0..250 {
            let g = [2.0 * (x[0] - 3.0)];
            adam_step(&AdamParams::default(), &mut st, &mut x, &g);
            dist.push((x[0] - 3.0).abs());
        }
        for w in dist[10..].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(dist[249] < dist[0]);
    }
}
