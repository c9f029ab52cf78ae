//! Exact tabular fixed-point solvers.
//!
//! The causal backup combines the observational TD term, weighted by the
//! behavioral propensity `P(x|s)`, with an optimistic compensation term
//! `b + gamma * max_s' V(s')` weighted by `1 - P(x|s)`:
//!
//! ```text
//! (BV)(s) = max_x [ P(x|s) (R~(s,x) + gamma sum_s' T~(s,x,s') V(s'))
//!                 + (1 - P(x|s)) (b + gamma max_s'' V(s'')) ]
//! ```
//!
//! `B` is a gamma-contraction in the sup norm, so value iteration from any
//! start converges to a unique fixed point, which upper-bounds the optimal
//! interventional values when the estimates are exact.

use serde::{Deserialize, Serialize};

use crate::cmdp::{InterventionalModel, TabularCMDP};
use crate::data::TabularEstimates;
use crate::error::{arg, Error, Result};
use crate::par;

/// State-indexed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, v: f64) -> Self {
        Self(vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `state,value` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,value\n");
        for (s, v) in self.0.iter().enumerate() {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }
}

impl std::ops::Index<usize> for ValueTable {
    type Output = f64;
    fn index(&self, s: usize) -> &f64 {
        &self.0[s]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100_000 }
    }
}

/// How unobserved `(s, x)` pairs are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    /// Reject estimates with any unobserved pair.
    #[default]
    Strict,
    /// Drop unobserved pairs from the maximization over actions.
    Exclude,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return arg(format!("gamma {gamma} outside (0,1)"));
    }
    Ok(())
}

fn check_coverage(est: &TabularEstimates, coverage: Coverage) -> Result<()> {
    if coverage == Coverage::Strict {
        if let Some((s, x)) = est.first_uncovered() {
            return Err(Error::Coverage { state: s, action: Some(x) });
        }
    }
    Ok(())
}

fn expected_next(row: &[f64], v: &[f64]) -> f64 {
    row.iter().zip(v).map(|(p, v)| p * v).sum()
}

/// Value of taking `x` in `s` inside the causal backup.
pub fn causal_action_value(est: &TabularEstimates, v: &ValueTable, s: usize, x: usize, b: f64, gamma: f64, v_max: f64) -> f64 {
    let p = est.propensity[s][x];
    p * (est.reward[s][x] + gamma * expected_next(&est.transition[s][x], &v.0)) + (1.0 - p) * (b + gamma * v_max)
}

fn argmax_admissible(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    // strict comparison keeps the lowest index on ties
    values.fold(None, |best, (x, q)| match best {
        Some((_, bq)) if q <= bq => best,
        _ => Some((x, q)),
    })
}

/// One application of the causal Bellman operator. Unobserved pairs are
/// excluded from the maximization; a state without any observed action is a
/// coverage error.
pub fn causal_backup(est: &TabularEstimates, v: &ValueTable, b: f64, gamma: f64) -> Result<ValueTable> {
    check_gamma(gamma)?;
    if v.len() != est.n_states() {
        return arg("value table length does not match the model");
    }
    let v_max = v.max();
    let backed = par::map_range(est.n_states(), |s| {
        argmax_admissible(
            (0..est.n_actions())
                .filter(|&x| est.covered[s][x])
                .map(|x| (x, causal_action_value(est, v, s, x, b, gamma, v_max))),
        )
        .map(|(_, q)| q)
        .ok_or(Error::Coverage { state: s, action: None })
    });
    backed.into_iter().collect::<Result<Vec<_>>>().map(ValueTable)
}

/// Standard Bellman optimality backup on the observational estimates,
/// ignoring confounding.
pub fn naive_backup(est: &TabularEstimates, v: &ValueTable, gamma: f64) -> Result<ValueTable> {
    check_gamma(gamma)?;
    let backed = par::map_range(est.n_states(), |s| {
        argmax_admissible(
            (0..est.n_actions())
                .filter(|&x| est.covered[s][x])
                .map(|x| (x, est.reward[s][x] + gamma * expected_next(&est.transition[s][x], &v.0))),
        )
        .map(|(_, q)| q)
        .ok_or(Error::Coverage { state: s, action: None })
    });
    backed.into_iter().collect::<Result<Vec<_>>>().map(ValueTable)
}

/// Bellman optimality backup on an interventional model.
pub fn interventional_backup(model: &InterventionalModel, v: &ValueTable, gamma: f64) -> ValueTable {
    ValueTable(par::map_range(model.n_states(), |s| {
        (0..model.n_actions())
            .map(|x| model.reward[s][x] + gamma * expected_next(&model.transition[s][x], &v.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Iterates `backup` from `init` until the sup-norm step falls below `tol`.
pub fn iterate<F>(init: ValueTable, opts: SolveOptions, mut backup: F) -> Result<(ValueTable, SolveReport)>
where
    F: FnMut(&ValueTable) -> Result<ValueTable>,
{
    if !(opts.tol > 0.0) {
        return arg("tolerance must be positive");
    }
    let mut v = init;
    let mut history = Vec::new();
    for _ in 0..opts.max_iter {
        let next = backup(&v)?;
        let residual = next.sup_distance(&v);
        history.push(residual);
        v = next;
        if residual < opts.tol {
            break;
        }
    }
    let final_residual = history.last().copied().unwrap_or(f64::INFINITY);
    let report = SolveReport {
        iterations: history.len(),
        final_residual,
        converged: final_residual < opts.tol,
        residual_history: history,
    };
    Ok((v, report))
}

/// Causal value iteration from `V = 0`.
pub fn causal_value_iteration(
    est: &TabularEstimates,
    b: f64,
    gamma: f64,
    coverage: Coverage,
    opts: SolveOptions,
) -> Result<(ValueTable, SolveReport)> {
    causal_value_iteration_from(est, b, gamma, coverage, ValueTable::zeros(est.n_states()), opts)
}

pub fn causal_value_iteration_from(
    est: &TabularEstimates,
    b: f64,
    gamma: f64,
    coverage: Coverage,
    init: ValueTable,
    opts: SolveOptions,
) -> Result<(ValueTable, SolveReport)> {
    check_coverage(est, coverage)?;
    iterate(init, opts, |v| causal_backup(est, v, b, gamma))
}

/// Standard value iteration on the confounded observational estimates.
pub fn naive_vi(est: &TabularEstimates, gamma: f64, coverage: Coverage, opts: SolveOptions) -> Result<(ValueTable, SolveReport)> {
    check_coverage(est, coverage)?;
    iterate(ValueTable::zeros(est.n_states()), opts, |v| naive_backup(est, v, gamma))
}

pub fn interventional_vi(model: &InterventionalModel, gamma: f64, opts: SolveOptions) -> Result<(ValueTable, SolveReport)> {
    check_gamma(gamma)?;
    iterate(ValueTable::zeros(model.n_states()), opts, |v| Ok(interventional_backup(model, v, gamma)))
}

/// Optimal interventional values `V*` of the true CMDP.
pub fn oracle_interventional_vi(cmdp: &TabularCMDP, opts: SolveOptions) -> Result<(ValueTable, SolveReport)> {
    interventional_vi(&cmdp.exact_interventional_model(), cmdp.gamma, opts)
}

/// One-step lookahead used for policy extraction.
#[derive(Debug, Clone, Copy)]
pub enum Lookahead<'a> {
    Interventional { model: &'a InterventionalModel, gamma: f64 },
    Naive { est: &'a TabularEstimates, gamma: f64 },
    Causal { est: &'a TabularEstimates, b: f64, gamma: f64 },
}

impl Lookahead<'_> {
    fn n_states(&self) -> usize {
        match self {
            Lookahead::Interventional { model, .. } => model.n_states(),
            Lookahead::Naive { est, .. } | Lookahead::Causal { est, .. } => est.n_states(),
        }
    }

    /// Action values of admissible actions at `s`.
    pub fn action_values(&self, v: &ValueTable, s: usize) -> Vec<(usize, f64)> {
        match *self {
            Lookahead::Interventional { model, gamma } => (0..model.n_actions())
                .map(|x| (x, model.reward[s][x] + gamma * expected_next(&model.transition[s][x], &v.0)))
                .collect(),
            Lookahead::Naive { est, gamma } => (0..est.n_actions())
                .filter(|&x| est.covered[s][x])
                .map(|x| (x, est.reward[s][x] + gamma * expected_next(&est.transition[s][x], &v.0)))
                .collect(),
            Lookahead::Causal { est, b, gamma } => {
                let v_max = v.max();
                (0..est.n_actions())
                    .filter(|&x| est.covered[s][x])
                    .map(|x| (x, causal_action_value(est, v, s, x, b, gamma, v_max)))
                    .collect()
            }
        }
    }
}

/// Greedy policy; ties go to the lowest action index.
pub fn greedy_policy(v: &ValueTable, lookahead: Lookahead<'_>) -> Vec<usize> {
    (0..lookahead.n_states())
        .map(|s| argmax_admissible(lookahead.action_values(v, s).into_iter()).map_or(0, |(x, _)| x))
        .collect()
}

/// Actions within `slack` of the best action value at each state.
pub fn optimal_action_sets(v: &ValueTable, lookahead: Lookahead<'_>, slack: f64) -> Vec<Vec<usize>> {
    (0..lookahead.n_states())
        .map(|s| {
            let q = lookahead.action_values(v, s);
            let best = q.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
            q.into_iter().filter(|&(_, v)| v >= best - slack).map(|(x, _)| x).collect()
        })
        .collect()
}

/// Exact value of a deterministic policy on an interventional model,
/// by Gaussian elimination on `(I - gamma P_pi) V = R_pi`.
pub fn evaluate_policy(model: &InterventionalModel, policy: &[usize], gamma: f64) -> Result<ValueTable> {
    check_gamma(gamma)?;
    let n = model.n_states();
    if policy.len() != n {
        return arg("policy length does not match the model");
    }
    let mut a = vec![vec![0.0; n + 1]; n];
    for s in 0..n {
        let x = policy[s];
        if x >= model.n_actions() {
            return arg(format!("policy action {x} out of range"));
        }
        for s2 in 0..n {
            a[s][s2] = -gamma * model.transition[s][x][s2];
        }
        a[s][s] += 1.0;
        a[s][n] = model.reward[s][x];
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        let p = a[col][col];
        for row in 0..n {
            if row != col {
                let f = a[row][col] / p;
                if f != 0.0 {
                    for k in col..=n {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    Ok(ValueTable((0..n).map(|s| a[s][n] / a[s][s]).collect()))
}

/// Expected discounted return of `policy` from the initial distribution.
pub fn policy_return(cmdp: &TabularCMDP, policy: &[usize]) -> Result<f64> {
    let v = evaluate_policy(&cmdp.exact_interventional_model(), policy, cmdp.gamma)?;
    Ok(cmdp.initial_state_probs.iter().zip(&v.0).map(|(p, v)| p * v).sum())
}
