//! Conditional-independence testing with random Fourier features and a
//! permutation null, the confounding audit built on it, and dimension
//! ranking by dependence on returns-to-go.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmdp::{seeded, MaskSpec};
use crate::data::TrajectoryDataset;
use crate::error::{arg, Error, Result};
use crate::linalg::{cholesky_solve, mat_nn, mat_tn, Matrix};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CITestConfig {
    pub n_random_features: usize,
    pub kernel_bandwidth: Bandwidth,
    pub n_permutations: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Rows are subsampled to this many before testing, when set.
    pub max_samples: Option<usize>,
}

impl Default for CITestConfig {
    fn default() -> Self {
        Self {
            n_random_features: 64,
            kernel_bandwidth: Bandwidth::MedianHeuristic,
            n_permutations: 500,
            alpha: 0.01,
            seed: 0,
            max_samples: Some(2000),
        }
    }
}

impl CITestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_random_features == 0 || self.n_permutations == 0 {
            return arg("n_random_features and n_permutations must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return arg("alpha must lie in (0,1)");
        }
        if let Bandwidth::Fixed(b) = self.kernel_bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return arg("fixed bandwidth must be positive");
            }
        }
        if self.max_samples.is_some_and(|m| m < MIN_SAMPLES) {
            return arg(format!("max_samples must be at least {MIN_SAMPLES}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CITestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub rejected: bool,
}

pub const MIN_SAMPLES: usize = 50;
const BANDWIDTH_ROWS: usize = 1024;
const RIDGE_SCALE: f64 = 1e-3;

/// Standardizes every column; a zero-variance column is an error naming it.
fn standardize(m: &Matrix, label: &str) -> Result<Matrix> {
    let mut out = m.clone();
    for c in 0..m.cols {
        let col = m.column(c);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::DegenerateColumn { column: format!("{label}[{c}]") });
        }
        for r in 0..m.rows {
            out.data[r * m.cols + c] = (m.get(r, c) - mean) / sd;
        }
    }
    Ok(out)
}

fn median_distance(m: &Matrix) -> f64 {
    let k = m.rows.min(BANDWIDTH_ROWS);
    let mut d = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in 0..i {
            let s: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *med > 0.0 {
        *med
    } else {
        1.0
    }
}

/// `sqrt(2/m) cos(X W / bandwidth + b)`
fn fourier_features<R: Rng + ?Sized>(m: &Matrix, n_features: usize, bw: Bandwidth, rng: &mut R) -> Matrix {
    let width = match bw {
        Bandwidth::MedianHeuristic => median_distance(m),
        Bandwidth::Fixed(b) => b,
    };
    let mut w = Matrix::zeros(m.cols, n_features);
    for v in &mut w.data {
        *v = rng.sample::<f64, _>(StandardNormal) / width;
    }
    let phase: Vec<f64> = (0..n_features).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut f = mat_nn(m, &w);
    let scale = (2.0 / n_features as f64).sqrt();
    for row in f.data.chunks_exact_mut(n_features) {
        for (v, b) in row.iter_mut().zip(&phase) {
            *v = scale * (*v + b).cos();
        }
    }
    f
}

/// Residuals of `f` after ridge regression on `design`, whose first column
/// is an unpenalized intercept.
fn residualize(f: &Matrix, design: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut gram = mat_tn(design, design);
    for i in 1..design.cols {
        gram.data[i * design.cols + i] += lambda;
    }
    // Keep the intercept block solvable with a negligible jitter.
    gram.data[0] += 1e-12;
    let beta = cholesky_solve(&gram, &mat_tn(design, f))?;
    let fit = mat_nn(design, &beta);
    let mut r = f.clone();
    for (v, p) in r.data.iter_mut().zip(&fit.data) {
        *v -= p;
    }
    Ok(r)
}

/// `||X^T P Y / n||_F^2` with `P` the optional row permutation of `X`.
fn cross_stat(rx: &Matrix, ry: &Matrix, perm: Option<&[usize]>) -> f64 {
    let c = match perm {
        Some(p) => mat_tn(&rx.select_rows(p), ry),
        None => mat_tn(rx, ry),
    };
    let nf = rx.rows as f64;
    c.data.iter().map(|v| (v / nf) * (v / nf)).sum()
}

/// Tests `X ⊥ Y | Z`. `z` may have zero columns.
pub fn ci_test(x: &Matrix, y: &Matrix, z: &Matrix, cfg: &CITestConfig) -> Result<CITestResult> {
    cfg.validate()?;
    let n_all = x.rows;
    if y.rows != n_all || z.rows != n_all {
        return arg("ci_test: sample counts differ");
    }
    if n_all < MIN_SAMPLES {
        return arg(format!("ci_test needs at least {MIN_SAMPLES} samples, got {n_all}"));
    }
    if x.cols == 0 || y.cols == 0 {
        return arg("ci_test: X and Y need at least one column");
    }
    let mut rng = seeded(cfg.seed);
    let (x, y, z) = match cfg.max_samples {
        Some(m) if m < n_all => {
            let mut idx: Vec<usize> = (0..n_all).collect();
            idx.shuffle(&mut rng);
            idx.truncate(m);
            idx.sort_unstable();
            (x.select_rows(&idx), y.select_rows(&idx), z.select_rows(&idx))
        }
        _ => (x.clone(), y.clone(), z.clone()),
    };
    let n = x.rows;
    let xs = standardize(&x, "X")?;
    let ys = standardize(&y, "Y")?;
    let zs = standardize(&z, "Z")?;
    let fx = fourier_features(&xs, cfg.n_random_features, cfg.kernel_bandwidth, &mut rng);
    let fy = fourier_features(&ys, cfg.n_random_features, cfg.kernel_bandwidth, &mut rng);
    let ones = Matrix { rows: n, cols: 1, data: vec![1.0; n] };
    let design = if zs.cols > 0 {
        let fz = fourier_features(&zs, cfg.n_random_features, cfg.kernel_bandwidth, &mut rng);
        Matrix::hstack(&[&ones, &zs, &fz])?
    } else {
        ones
    };
    let lambda = RIDGE_SCALE * n as f64;
    let rx = residualize(&fx, &design, lambda)?;
    let ry = residualize(&fy, &design, lambda)?;
    let statistic = cross_stat(&rx, &ry, None);
    let base: u64 = rng.random();
    let exceed: usize = par::map_range(cfg.n_permutations, |k| {
        let mut prng = seeded(base.wrapping_add(k as u64));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut prng);
        usize::from(cross_stat(&rx, &ry, Some(&perm)) >= statistic)
    })
    .into_iter()
    .sum();
    let p_value = (exceed + 1) as f64 / (cfg.n_permutations + 1) as f64;
    Ok(CITestResult { statistic, p_value, n, rejected: p_value < cfg.alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    /// `h ⊥ s'_{-h} | x, s_{-h}`
    pub transition: CITestResult,
    /// `h ⊥ x | s_{-h}`
    pub behavior: CITestResult,
    pub confounded: bool,
}

/// Audit against an explicit hidden column, one value per transition.
pub fn confounding_audit_with_hidden(ds: &TrajectoryDataset, hidden: &[f64], cfg: &CITestConfig) -> Result<AuditResult> {
    if hidden.len() != ds.len() {
        return arg("hidden column length differs from the dataset");
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let obs = Matrix::from_rows(&ds.transitions.iter().map(|t| t.obs.clone()).collect::<Vec<_>>())?;
    let next = Matrix::from_rows(&ds.transitions.iter().map(|t| t.next_obs.clone()).collect::<Vec<_>>())?;
    let act = Matrix::from_rows(&ds.transitions.iter().map(|t| t.action.clone()).collect::<Vec<_>>())?;
    let h = Matrix::from_column(hidden);
    let transition = ci_test(&h, &next, &Matrix::hstack(&[&act, &obs])?, cfg)?;
    let behavior = ci_test(&h, &act, &obs, &CITestConfig { seed: cfg.seed.wrapping_add(1), ..cfg.clone() })?;
    Ok(AuditResult { transition, behavior, confounded: transition.rejected && behavior.rejected })
}

/// Audit of the hidden dimension `hidden_dim` of the privileged trace.
pub fn confounding_audit(ds: &TrajectoryDataset, hidden_dim: usize, cfg: &CITestConfig) -> Result<AuditResult> {
    let trace = ds
        .trace
        .as_ref()
        .ok_or_else(|| Error::Argument("dataset has no unmasked trace".into()))?;
    if hidden_dim >= ds.mask.full_dim() {
        return arg(format!("hidden dimension {hidden_dim} out of range"));
    }
    let hidden: Vec<f64> = trace.iter().map(|row| row[hidden_dim]).collect();
    confounding_audit_with_hidden(ds, &hidden, cfg)
}

/// Appends a hidden standard-normal column to the trace and returns its
/// index. Auditing that column is the negative control.
pub fn append_noise_dimension(ds: &mut TrajectoryDataset, seed: u64) -> Result<usize> {
    let trace = ds
        .trace
        .as_mut()
        .ok_or_else(|| Error::Argument("dataset has no unmasked trace".into()))?;
    let d = ds.mask.full_dim();
    let mut rng = seeded(seed);
    for row in trace.iter_mut() {
        row.push(rng.sample(StandardNormal));
    }
    ds.mask = MaskSpec::new(d + 1, ds.mask.hidden().chain([d]))?;
    Ok(d)
}

/// Undiscounted within-episode suffix sums of rewards.
pub fn returns_to_go(ds: &TrajectoryDataset) -> Vec<f64> {
    let mut out = vec![0.0; ds.len()];
    for r in ds.episode_ranges() {
        let mut acc = 0.0;
        for i in r.rev() {
            acc += ds.transitions[i].reward;
            out[i] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub dim: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

/// One test per observed dimension `d`: `s_d ⊥ returns-to-go | s_{-d}, x`,
/// sorted by descending statistic.
pub fn dependence_report(ds: &TrajectoryDataset, dims: &[usize], cfg: &CITestConfig) -> Result<Vec<DependenceRow>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rtg = Matrix::from_column(&returns_to_go(ds));
    let obs = Matrix::from_rows(&ds.transitions.iter().map(|t| t.obs.clone()).collect::<Vec<_>>())?;
    let act = Matrix::from_rows(&ds.transitions.iter().map(|t| t.action.clone()).collect::<Vec<_>>())?;
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        if d >= obs.cols {
            return arg(format!("dimension {d} out of range"));
        }
        let x = Matrix::from_column(&obs.column(d));
        let rest: Vec<usize> = (0..obs.cols).filter(|&c| c != d).collect();
        let mut others = Matrix::zeros(obs.rows, rest.len());
        for r in 0..obs.rows {
            for (j, &c) in rest.iter().enumerate() {
                others.data[r * rest.len() + j] = obs.get(r, c);
            }
        }
        let z = Matrix::hstack(&[&others, &act])?;
        let res = ci_test(&x, &rtg, &z, cfg)?;
        rows.push(DependenceRow { dim: d, statistic: res.statistic, p_value: res.p_value, rejected: res.rejected });
    }
    rows.sort_by(|a, b| b.statistic.total_cmp(&a.statistic).then(a.dim.cmp(&b.dim)));
    Ok(rows)
}

pub const DEPENDENCE_HEADER: &str = "dim,statistic,p_value,rejected";

pub fn dependence_to_csv(rows: &[DependenceRow]) -> String {
    let mut out = String::from(DEPENDENCE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.dim, r.statistic, r.p_value, r.rejected));
    }
    out
}
