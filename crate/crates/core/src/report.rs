//! Summary statistics for learning curves.

use serde::{Deserialize, Serialize};

use crate::agent::CurvePoint;
use crate::error::{arg, Error, Result};

/// Interquartile mean: sort, drop `floor(n/4)` values from each end, average
/// the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return arg("iqm of an empty sequence");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 4;
    let mid = &v[k..v.len() - k];
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return arg("mean of an empty sequence");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return arg("median of an empty sequence");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Trailing moving average; the first entries average over what is available.
pub fn smooth(curve: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return arg("smoothing window must be at least 1");
    }
    let mut out = Vec::with_capacity(curve.len());
    for i in 0..curve.len() {
        let len = (i + 1).min(window);
        out.push(curve[i + 1 - len..=i].iter().sum::<f64>() / len as f64);
    }
    Ok(out)
}

pub const DEFAULT_SMOOTHING: usize = 10;

/// Per-seed summary of one learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Maximum of the smoothed evaluation curve.
    pub best: f64,
    pub final_return: f64,
    pub steps_to_best: usize,
}

impl SeedSummary {
    pub fn from_curve(seed: u64, curve: &[CurvePoint], window: usize) -> Result<Self> {
        if curve.is_empty() {
            return arg("empty learning curve");
        }
        let raw: Vec<f64> = curve.iter().map(|p| p.eval_mean).collect();
        let sm = smooth(&raw, window)?;
        let (idx, best) = sm
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        Ok(Self { seed, best, final_return: *raw.last().expect("nonempty"), steps_to_best: curve[idx].step })
    }
}

/// A method's runs on one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub env: String,
    pub seeds: Vec<SeedSummary>,
}

impl RunSummary {
    pub fn bests(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.best).collect()
    }

    /// Mean over seeds of the best smoothed evaluation.
    pub fn score(&self) -> Result<f64> {
        mean(&self.bests())
    }

    pub fn iqm_best(&self) -> Result<f64> {
        iqm(&self.bests())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mean: f64,
    pub median: f64,
    pub iqm: f64,
}

/// Normalizes each environment's score by the baseline's score on the same
/// environment, then summarizes across environments.
pub fn aggregate(runs: &[RunSummary], baselines: &[RunSummary]) -> Result<AggregateRow> {
    if runs.is_empty() {
        return arg("nothing to aggregate");
    }
    let mut ratios = Vec::with_capacity(runs.len());
    for r in runs {
        let base = baselines
            .iter()
            .find(|b| b.env == r.env)
            .ok_or_else(|| Error::Argument(format!("no baseline for environment {}", r.env)))?;
        let b = base.score()?;
        if b == 0.0 {
            return arg(format!("baseline score is zero on {}", r.env));
        }
        ratios.push(r.score()? / b);
    }
    Ok(AggregateRow { mean: mean(&ratios)?, median: median(&ratios)?, iqm: iqm(&ratios)? })
}

/// Three-row table: normalized mean, median and IQM.
pub fn aggregate_to_csv(method: &str, row: &AggregateRow) -> String {
    format!(
        "statistic,{method}\nnormalized_mean,{:.4}\nnormalized_median,{:.4}\nnormalized_iqm,{:.4}\n",
        row.mean, row.median, row.iqm
    )
}
