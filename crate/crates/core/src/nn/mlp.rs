//! Residual multilayer perceptron with batched reverse-mode gradients.
//!
//! Layout: linear read-in, `n_residual_blocks` blocks of
//! `h <- h + W2 tanh(W1 h + b1) + b2`, then `y = W_out tanh(h) + b_out`.
//! Batches are row-major `n x dim` slices.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::Objective;
use super::params::{fnv1a, ParamStore};
use crate::error::{arg, Result};
use crate::par;

/// Row block size for sharded inference.
pub const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
}

impl MlpSpec {
    /// Offline model defaults: 128 hidden units, 3 residual blocks.
    pub fn offline(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden_dim: 128, n_residual_blocks: 3 }
    }

    /// Online agent defaults: 256 hidden units, 2 residual blocks.
    pub fn online(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden_dim: 256, n_residual_blocks: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return arg("MLP dimensions must be positive");
        }
        Ok(())
    }

    pub fn arch_hash(&self) -> u64 {
        fnv1a(
            format!(
                "mlp-tanh-residual:{}:{}:{}:{}",
                self.input_dim, self.output_dim, self.hidden_dim, self.n_residual_blocks
            )
            .as_bytes(),
        )
    }
}

#[derive(Debug, Clone)]
struct Block {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

/// Parameter layout of one network; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    w_in: Range<usize>,
    b_in: Range<usize>,
    blocks: Vec<Block>,
    w_out: Range<usize>,
    b_out: Range<usize>,
    n_params: usize,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    n: usize,
    input: Vec<f64>,
    /// Block inputs, one `n x hidden` matrix per block.
    block_in: Vec<Vec<f64>>,
    /// `tanh(W1 h + b1)` per block.
    block_act: Vec<Vec<f64>>,
    /// `tanh(h_final)`
    top: Vec<f64>,
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64, c: &mut [f64], rsc: isize, csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

/// `x (n x i) * W^T` where `W` is `o x i`, plus bias, into a fresh `n x o`.
fn affine(x: &[f64], n: usize, i: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(n, i, o, x, i as isize, 1, w, 1, i as isize, 1.0, &mut y, o as isize, 1);
    y
}

/// Accumulates `dW += dY^T X` and `db += colsum(dY)`; returns `dX = dY W`
/// when requested.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64], n: usize, i: usize, w: &[f64], o: usize, dy: &[f64],
    dw: &mut [f64], db: &mut [f64], want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(o, n, i, dy, 1, o as isize, x, i as isize, 1, 1.0, dw, i as isize, 1);
    for row in dy.chunks_exact(o) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; n * i];
        gemm(n, o, i, dy, o as isize, 1, w, i as isize, 1, 0.0, &mut dx, i as isize, 1);
        dx
    })
}

impl Mlp {
    /// Registers this network's slices in `store` under `prefix`.
    pub fn register(spec: MlpSpec, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let (i, h, o) = (spec.input_dim, spec.hidden_dim, spec.output_dim);
        let start = store.len();
        let w_in = store.register(format!("{prefix}in.w"), &[h, i]);
        let b_in = store.register(format!("{prefix}in.b"), &[h]);
        let blocks = (0..spec.n_residual_blocks)
            .map(|k| Block {
                w1: store.register(format!("{prefix}block{k}.w1"), &[h, h]),
                b1: store.register(format!("{prefix}block{k}.b1"), &[h]),
                w2: store.register(format!("{prefix}block{k}.w2"), &[h, h]),
                b2: store.register(format!("{prefix}block{k}.b2"), &[h]),
            })
            .collect();
        let w_out = store.register(format!("{prefix}out.w"), &[o, h]);
        let b_out = store.register(format!("{prefix}out.b"), &[o]);
        let n_params = store.len() - start;
        Ok(Self { spec, w_in, b_in, blocks, w_out, b_out, n_params })
    }

    /// Builds a standalone network and its parameter store.
    pub fn new(spec: MlpSpec) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mlp = Self::register(spec, &mut store, "")?;
        Ok((mlp, store))
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Range of this network inside its store.
    pub fn param_range(&self) -> Range<usize> {
        self.w_in.start..self.b_out.end
    }

    /// Uniform fan-in initialization; residual-block output layers start at
    /// zero so every block is the identity at initialization.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let mut fill = |r: &Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[r.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let (i, h) = (self.spec.input_dim, self.spec.hidden_dim);
        fill(&self.w_in, i);
        fill(&self.b_in, i);
        for b in &self.blocks {
            fill(&b.w1, h);
            fill(&b.b1, h);
        }
        fill(&self.w_out, h);
        fill(&self.b_out, h);
        for b in &self.blocks {
            params[b.w2.clone()].fill(0.0);
            params[b.b2.clone()].fill(0.0);
        }
    }

    /// Scales the read-out layer, e.g. to start value heads near zero.
    pub fn scale_output(&self, params: &mut [f64], factor: f64) {
        for v in &mut params[self.w_out.clone()] {
            *v *= factor;
        }
        for v in &mut params[self.b_out.clone()] {
            *v *= factor;
        }
    }

    pub fn forward_batch(&self, params: &[f64], x: &[f64], n: usize) -> Result<(Vec<f64>, MlpCache)> {
        let (i, h, o) = (self.spec.input_dim, self.spec.hidden_dim, self.spec.output_dim);
        if x.len() != n * i {
            return arg(format!("input has {} values, expected {n} x {i}", x.len()));
        }
        let mut hid = affine(x, n, i, &params[self.w_in.clone()], &params[self.b_in.clone()], h);
        let mut block_in = Vec::with_capacity(self.blocks.len());
        let mut block_act = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut z = affine(&hid, n, h, &params[b.w1.clone()], &params[b.b1.clone()], h);
            z.iter_mut().for_each(|v| *v = v.tanh());
            let mut next = hid.clone();
            for row in next.chunks_exact_mut(h) {
                for (v, bias) in row.iter_mut().zip(&params[b.b2.clone()]) {
                    *v += bias;
                }
            }
            gemm(n, h, h, &z, h as isize, 1, &params[b.w2.clone()], 1, h as isize, 1.0, &mut next, h as isize, 1);
            block_in.push(std::mem::replace(&mut hid, next));
            block_act.push(z);
        }
        let top: Vec<f64> = hid.iter().map(|v| v.tanh()).collect();
        let y = affine(&top, n, h, &params[self.w_out.clone()], &params[self.b_out.clone()], o);
        Ok((y, MlpCache { n, input: x.to_vec(), block_in, block_act, top }))
    }

    /// Batched inference, sharded over row blocks.
    pub fn forward_rows(&self, params: &[f64], x: &[f64], n: usize) -> Result<Vec<f64>> {
        let i = self.spec.input_dim;
        if x.len() != n * i {
            return arg(format!("input has {} values, expected {n} x {i}", x.len()));
        }
        if n <= ROW_CHUNK {
            return Ok(self.forward_batch(params, x, n)?.0);
        }
        let parts = par::map_range(n.div_ceil(ROW_CHUNK), |c| {
            let r = c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n);
            self.forward_batch(params, &x[r.start * i..r.end * i], r.len()).map(|(y, _)| y)
        });
        let mut out = Vec::with_capacity(n * self.spec.output_dim);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Forward pass without a cache.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(params, x, 1)?.0)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` into
    /// `grad` (same indexing as `params`); returns the input gradient when
    /// requested.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, dy: &[f64], grad: &mut [f64], want_dx: bool) -> Option<Vec<f64>> {
        let (i, h, o) = (self.spec.input_dim, self.spec.hidden_dim, self.spec.output_dim);
        let n = cache.n;
        assert_eq!(dy.len(), n * o, "upstream gradient shape");
        let (w_out, b_out) = split_two(grad, &self.w_out, &self.b_out);
        let dtop = affine_backward(&cache.top, n, h, &params[self.w_out.clone()], o, dy, w_out, b_out, true)
            .expect("requested");
        let mut dh: Vec<f64> = dtop.iter().zip(&cache.top).map(|(d, t)| d * (1.0 - t * t)).collect();
        for (k, b) in self.blocks.iter().enumerate().rev() {
            let z = &cache.block_act[k];
            let (dw2, db2) = split_two(grad, &b.w2, &b.b2);
            let dz = affine_backward(z, n, h, &params[b.w2.clone()], h, &dh, dw2, db2, true).expect("requested");
            let da: Vec<f64> = dz.iter().zip(z).map(|(d, z)| d * (1.0 - z * z)).collect();
            let (dw1, db1) = split_two(grad, &b.w1, &b.b1);
            let dx_block = affine_backward(&cache.block_in[k], n, h, &params[b.w1.clone()], h, &da, dw1, db1, true)
                .expect("requested");
            for (d, v) in dh.iter_mut().zip(dx_block) {
                *d += v;
            }
        }
        let (dw_in, db_in) = split_two(grad, &self.w_in, &self.b_in);
        affine_backward(&cache.input, n, i, &params[self.w_in.clone()], h, &dh, dw_in, db_in, want_dx)
    }
}

/// `mean 0.5 (f(x) - target)^2` for a scalar-output network.
pub struct SquaredError<'a> {
    pub mlp: &'a Mlp,
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
}

const LOSS_CHUNK: usize = 128;

impl Objective for SquaredError<'_> {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let n = self.targets.len();
        let d = self.mlp.spec.input_dim;
        let np = params.len();
        let total = par::chunked_sum(n, LOSS_CHUNK, np + 1, |r| {
            let (v, cache) = self
                .mlp
                .forward_batch(params, &self.inputs[r.start * d..r.end * d], r.len())
                .expect("batch shapes are fixed at construction");
            let mut acc = vec![0.0; np + 1];
            let dy: Vec<f64> = v
                .iter()
                .zip(&self.targets[r.clone()])
                .map(|(v, t)| {
                    acc[np] += 0.5 * (v - t) * (v - t);
                    (v - t) / n as f64
                })
                .collect();
            self.mlp.backward(params, &cache, &dy, &mut acc[..np], false);
            acc
        });
        (total[np] / n as f64, total[..np].to_vec())
    }
}

/// Two disjoint mutable subslices; `a` must precede `b`.
fn split_two<'a>(buf: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::seeded;
    use crate::nn::gradcheck::{finite_difference, max_relative_error};

    fn net(blocks: usize) -> (Mlp, ParamStore) {
        let spec = MlpSpec { input_dim: 3, output_dim: 2, hidden_dim: 5, n_residual_blocks: blocks };
        let (m, mut p) = Mlp::new(spec).unwrap();
        m.init(&mut p.data, &mut seeded(1));
        (m, p)
    }

    #[test]
    fn zero_blocks_reduce_to_read_in_path() {
        let (m, p) = net(2);
        let (m0, mut p0) = Mlp::new(MlpSpec { n_residual_blocks: 0, ..m.spec }).unwrap();
        p0.data[m0.w_in.clone()].copy_from_slice(&p.data[m.w_in.clone()]);
        p0.data[m0.b_in.clone()].copy_from_slice(&p.data[m.b_in.clone()]);
        p0.data[m0.w_out.clone()].copy_from_slice(&p.data[m.w_out.clone()]);
        p0.data[m0.b_out.clone()].copy_from_slice(&p.data[m.b_out.clone()]);
        let x = [0.3, -1.2, 0.7];
        assert_eq!(m.forward(&p.data, &x).unwrap(), m0.forward(&p0.data, &x).unwrap());
    }

    #[test]
    fn forward_is_pure_and_checks_dims() {
        let (m, p) = net(1);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(m.forward(&p.data, &x).unwrap(), m.forward(&p.data, &x).unwrap());
        assert!(m.forward(&p.data, &[1.0]).is_err());
    }

    #[test]
    fn batch_matches_single_rows() {
        let (m, mut p) = net(2);
        p.data.iter_mut().enumerate().for_each(|(k, v)| *v += 0.01 * (k as f64).sin());
        let x = [0.1, 0.2, 0.3, -0.5, 0.4, 1.1];
        let (y, _) = m.forward_batch(&p.data, &x, 2).unwrap();
        let y0 = m.forward(&p.data, &x[..3]).unwrap();
        let y1 = m.forward(&p.data, &x[3..]).unwrap();
        for (a, b) in y.iter().zip(y0.iter().chain(&y1)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, mut p) = net(2);
        let mut rng = seeded(7);
        p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |params: &[f64]| {
            let (y, _) = m.forward_batch(params, &x, 4).unwrap();
            y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / 4.0
        };
        let (y, cache) = m.forward_batch(&p.data, &x, 4).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| (a - b) / 4.0).collect();
        let mut g = vec![0.0; p.len()];
        let dx = m.backward(&p.data, &cache, &dy, &mut g, true).unwrap();
        let fd = finite_difference(&loss, &p.data, 1e-5);
        assert!(max_relative_error(&g, &fd) <= 1e-4);

        let loss_x = |xs: &[f64]| {
            let (y, _) = m.forward_batch(&p.data, xs, 4).unwrap();
            y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / 4.0
        };
        let fdx = finite_difference(&loss_x, &x, 1e-5);
        assert!(max_relative_error(&dx, &fdx) <= 1e-4);
    }
}
