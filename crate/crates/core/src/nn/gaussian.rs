use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpSpec};
use super::params::ParamStore;
use crate::error::{arg, Error, Result};
use crate::par;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mu: &[f64], sigma: &[f64], x: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != x.len() {
        return arg("gaussian_log_prob: dimension mismatch");
    }
    let mut lp = 0.0;
    for ((m, s), v) in mu.iter().zip(sigma).zip(x) {
        if !(*s > 0.0) {
            return arg(format!("gaussian_log_prob: sigma must be positive, got {s}"));
        }
        let z = (v - m) / s;
        lp += -0.5 * LN_2PI - s.ln() - 0.5 * z * z;
    }
    Ok(lp)
}

/// Log-density parameterized by `log_std`, with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrad {
    pub value: f64,
    pub d_mu: Vec<f64>,
    pub d_log_std: Vec<f64>,
    pub d_x: Vec<f64>,
}

pub fn gaussian_log_prob_grad(mu: &[f64], log_std: &[f64], x: &[f64]) -> LogProbGrad {
    let d = mu.len();
    let mut out = LogProbGrad { value: 0.0, d_mu: vec![0.0; d], d_log_std: vec![0.0; d], d_x: vec![0.0; d] };
    for i in 0..d {
        let inv = (-log_std[i]).exp();
        let z = (x[i] - mu[i]) * inv;
        out.value += -0.5 * LN_2PI - log_std[i] - 0.5 * z * z;
        out.d_mu[i] = z * inv;
        out.d_log_std[i] = z * z - 1.0;
        out.d_x[i] = -z * inv;
    }
    out
}

/// `mu + sigma * eps`
pub fn reparam_sample(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return arg("reparam_sample: dimension mismatch");
    }
    Ok(mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Splits a `2d` network output into mean and clamped log-std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for GaussianHead {
    fn default() -> Self {
        Self { log_std_min: -5.0, log_std_max: 2.0 }
    }
}

impl GaussianHead {
    /// Returns `(mu, log_std, inside)` where `inside[i]` is false when the
    /// clamp is active (zero gradient through log_std).
    pub fn split(&self, raw: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let d = raw.len() / 2;
        let mu = raw[..d].to_vec();
        let mut log_std = Vec::with_capacity(d);
        let mut inside = Vec::with_capacity(d);
        for &r in &raw[d..] {
            let c = r.clamp(self.log_std_min, self.log_std_max);
            inside.push(c == r);
            log_std.push(c);
        }
        (mu, log_std, inside)
    }
}

/// Conditional diagonal Gaussian `y | x` parameterized by a residual MLP.
#[derive(Debug, Clone)]
pub struct GaussianRegressor {
    pub mlp: Mlp,
    pub params: ParamStore,
    pub head: GaussianHead,
}

const GRAD_CHUNK: usize = 64;

impl GaussianRegressor {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, hidden_dim: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec { input_dim, output_dim: 2 * output_dim, hidden_dim, n_residual_blocks: blocks };
        let (mlp, mut params) = Mlp::new(spec)?;
        mlp.init(&mut params.data, rng);
        Ok(Self { mlp, params, head: GaussianHead::default() })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.spec.output_dim / 2
    }

    /// `(mu, sigma)` for one input.
    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = self.mlp.forward(&self.params.data, x)?;
        let (mu, log_std, _) = self.head.split(&raw);
        Ok((mu, log_std.iter().map(|l| l.exp()).collect()))
    }

    /// Row-wise `(mu, log_std)` for `n` inputs, each flattened `n x d`.
    pub fn predict_rows(&self, xs: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = self.mlp.forward_rows(&self.params.data, xs, n)?;
        let d = self.output_dim();
        let mut mu = Vec::with_capacity(n * d);
        let mut log_std = Vec::with_capacity(n * d);
        for row in raw.chunks_exact(2 * d) {
            let (m, l, _) = self.head.split(row);
            mu.extend(m);
            log_std.extend(l);
        }
        Ok((mu, log_std))
    }

    pub fn log_prob(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (mu, sigma) = self.predict(x)?;
        gaussian_log_prob(&mu, &sigma, y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.sample_scaled(x, 1.0, rng)
    }

    /// Sample with the standard deviation multiplied by `scale`.
    pub fn sample_scaled<R: Rng + ?Sized>(&self, x: &[f64], scale: f64, rng: &mut R) -> Result<Vec<f64>> {
        let (mu, sigma) = self.predict(x)?;
        let eps = standard_normal(rng, mu.len());
        let sigma: Vec<f64> = sigma.iter().map(|s| s * scale).collect();
        reparam_sample(&mu, &sigma, &eps)
    }

    /// Mean log-likelihood of rows `ys` given rows `xs` at `params`, and its
    /// gradient with respect to `params`.
    pub fn mean_log_lik_grad(&self, params: &[f64], xs: &[f64], ys: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
        let (di, dout) = (self.input_dim(), self.output_dim());
        if xs.len() != n * di || ys.len() != n * dout {
            return arg("mean_log_lik_grad: batch shape mismatch");
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let np = params.len();
        let total = par::chunked_sum(n, GRAD_CHUNK, np + 1, |r| {
            let m = r.len();
            let (raw, cache) = self
                .mlp
                .forward_batch(params, &xs[r.start * di..r.end * di], m)
                .expect("shape checked");
            let mut dy = vec![0.0; m * 2 * dout];
            let mut acc = vec![0.0; np + 1];
            for k in 0..m {
                let (mu, log_std, inside) = self.head.split(&raw[k * 2 * dout..(k + 1) * 2 * dout]);
                let g = gaussian_log_prob_grad(&mu, &log_std, &ys[(r.start + k) * dout..(r.start + k + 1) * dout]);
                acc[np] += g.value;
                for i in 0..dout {
                    dy[k * 2 * dout + i] = g.d_mu[i] / n as f64;
                    if inside[i] {
                        dy[k * 2 * dout + dout + i] = g.d_log_std[i] / n as f64;
                    }
                }
            }
            self.mlp.backward(params, &cache, &dy, &mut acc[..np], false);
            acc
        });
        let value = total[np] / n as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("gaussian regressor log-likelihood".into()));
        }
        Ok((value, total[..np].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::seeded;
    use crate::nn::gradcheck::{finite_difference, max_relative_error};

    #[test]
    fn log_prob_examples() {
        let lp = gaussian_log_prob(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        let lp = gaussian_log_prob(&[2.0], &[1.0], &[3.0]).unwrap();
        assert!((lp - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
        let mu = [0.1, -0.4, 2.0];
        let s = [0.5, 1.5, 0.2];
        let x = [0.0, 0.3, 2.1];
        let joint = gaussian_log_prob(&mu, &s, &x).unwrap();
        let sum: f64 = (0..3).map(|i| gaussian_log_prob(&mu[i..=i], &s[i..=i], &x[i..=i]).unwrap()).sum();
        assert!((joint - sum).abs() < 1e-12);
        assert!(gaussian_log_prob(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(gaussian_log_prob(&[0.0], &[-1.0], &[0.0]).is_err());
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(reparam_sample(&[0.3], &[2.0], &[0.0]).unwrap(), vec![0.3]);
        assert_eq!(reparam_sample(&[1.5], &[2.0], &[0.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn log_prob_gradients() {
        let mu = [0.3, -0.2];
        let ls = [-0.4, 0.25];
        let x = [1.1, 0.5];
        let g = gaussian_log_prob_grad(&mu, &ls, &x);
        let f = |p: &[f64]| gaussian_log_prob_grad(&p[0..2], &p[2..4], &p[4..6]).value;
        let p: Vec<f64> = mu.iter().chain(&ls).chain(&x).copied().collect();
        let fd = finite_difference(&f, &p, 1e-5);
        let an: Vec<f64> = g.d_mu.iter().chain(&g.d_log_std).chain(&g.d_x).copied().collect();
        assert!(max_relative_error(&an, &fd) <= 1e-4);
        let at_mode = gaussian_log_prob_grad(&[0.7], &[0.0], &[0.7]);
        assert_eq!(at_mode.d_mu, vec![0.0]);
    }

    #[test]
    fn head_clamps() {
        let h = GaussianHead::default();
        let (_, ls, inside) = h.split(&[0.0, 0.0, -50.0, 50.0]);
        assert_eq!(ls, vec![-5.0, 2.0]);
        assert_eq!(inside, vec![false, false]);
    }

    #[test]
    fn regressor_gradient_matches_fd() {
        let mut rng = seeded(3);
        let reg = GaussianRegressor::new(2, 2, 6, 1, &mut rng).unwrap();
        let mut p = reg.params.data.clone();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = reg.mean_log_lik_grad(&p, &xs, &ys, 5).unwrap();
        let f = |q: &[f64]| reg.mean_log_lik_grad(q, &xs, &ys, 5).unwrap().0;
        let fd = finite_difference(&f, &p, 1e-5);
        assert!(max_relative_error(&g, &fd) <= 1e-4);
    }
}
