//! Differentiable objectives and central-difference verification.

/// A scalar loss over a flat parameter vector with an exact gradient.
///
/// Losses are assembled from the primitives in this module tree (affine,
/// tanh, residual add, Gaussian log-density, reparameterization, squared
/// error, mean), so an objective that compiles is differentiable.
pub trait Objective {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>);

    fn loss(&self, params: &[f64]) -> f64 {
        self.loss_and_grad(params).0
    }
}

/// Exact gradient of an objective.
pub fn grad<O: Objective + ?Sized>(obj: &O, params: &[f64]) -> Vec<f64> {
    obj.loss_and_grad(params).1
}

/// `0.5 * ||p||^2`
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl Objective for HalfSquaredNorm {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * params.iter().map(|p| p * p).sum::<f64>(), params.to_vec())
    }
}

/// Central differences with step `h`.
pub fn finite_difference<F: Fn(&[f64]) -> f64 + ?Sized>(f: &F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Absolute floor on the denominator so that components whose true value is
/// zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares an objective's gradient against central differences.
pub fn check_objective<O: Objective + ?Sized>(obj: &O, params: &[f64], h: f64) -> f64 {
    let g = grad(obj, params);
    let fd = finite_difference(&|p: &[f64]| obj.loss(p), params, h);
    max_relative_error(&g, &fd)
}
