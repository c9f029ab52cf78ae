use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam step. Performs gradient descent on `grads`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam_step: shape mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: state shape mismatch");
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer bundling a config with its state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { cfg, state: AdamState::new(n) }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        adam_step(params, grads, &mut self.state, &self.cfg);
    }

    /// Ascent variant for maximization objectives.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64]) {
        let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
        self.step(params, &neg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::with_lr(0.1));
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_by_hand() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = vec![0.5, 0.5];
        let g = [0.2, -3.0];
        let mut s = AdamState::new(2);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut p, &g, &mut s, &cfg);
        assert!((p[0] - (0.5 - 0.01 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (0.5 + 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = vec![1.0];
        let mut opt = Adam::new(1, AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let g = [2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3, "p = {}", p[0]);
    }
}
