//! Potential-based reward shaping.

use serde::{Deserialize, Serialize};

use crate::cmdp::InterventionalModel;
use crate::error::{arg, Error, Result};
use crate::potential::PotentialNet;
use crate::solver::ValueTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalRule {
    /// The next-state potential of a terminal transition is zero.
    #[default]
    ZeroNextPotential,
    /// Terminal transitions keep the next-state potential.
    Carry,
}

/// A real-valued state potential.
pub trait Potential: Sync {
    fn potential(&self, s: &[f64]) -> Result<f64>;
}

/// `phi = 0`
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPotential;

impl Potential for ZeroPotential {
    fn potential(&self, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Tabular potential indexed by `s[0]`.
#[derive(Debug, Clone)]
pub struct TablePotential(pub ValueTable);

impl Potential for TablePotential {
    fn potential(&self, s: &[f64]) -> Result<f64> {
        let idx = s.first().copied().unwrap_or(f64::NAN);
        if !(idx >= 0.0 && idx.fract() == 0.0 && (idx as usize) < self.0.len()) {
            return arg(format!("state {s:?} is not an index into the potential table"));
        }
        Ok(self.0[idx as usize])
    }
}

/// Closure-backed potential.
pub struct FnPotential<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Potential for FnPotential<F> {
    fn potential(&self, s: &[f64]) -> Result<f64> {
        Ok((self.0)(s))
    }
}

/// Learned potential, evaluated in original reward units.
impl Potential for PotentialNet {
    fn potential(&self, s: &[f64]) -> Result<f64> {
        self.eval_original(s)
    }
}

impl<P: Potential + ?Sized> Potential for &P {
    fn potential(&self, s: &[f64]) -> Result<f64> {
        (**self).potential(s)
    }
}

impl<P: Potential + ?Sized + Send> Potential for Box<P> {
    fn potential(&self, s: &[f64]) -> Result<f64> {
        (**self).potential(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingConfig {
    pub beta: f64,
    /// Discount applied to the next-state potential.
    pub pbrs_gamma: f64,
    pub terminal_rule: TerminalRule,
    /// Checkpoint path of a learned potential, when configured from a file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential: Option<String>,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self { beta: 1.0, pbrs_gamma: 1.0, terminal_rule: TerminalRule::ZeroNextPotential, potential: None }
    }
}

/// Scale values tried for `beta`.
pub const BETA_SWEEP: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

impl ShapingConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self { beta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return arg("beta must be finite and nonnegative");
        }
        if !(self.pbrs_gamma > 0.0 && self.pbrs_gamma <= 1.0) {
            return arg("pbrs_gamma must lie in (0,1]");
        }
        Ok(())
    }
}

fn checked(phi: f64, s: &[f64]) -> Result<f64> {
    if phi.is_finite() {
        Ok(phi)
    } else {
        Err(Error::NonFinite(format!("potential {phi} at state {s:?}")))
    }
}

/// `y + beta (pbrs_gamma phi(s') [not done or carry] - phi(s))`. With
/// `beta = 0` the reward is returned unchanged and the potential is not
/// evaluated.
pub fn shaped_reward<P: Potential + ?Sized>(y: f64, s: &[f64], s_next: &[f64], done: bool, cfg: &ShapingConfig, phi: &P) -> Result<f64> {
    if cfg.beta == 0.0 {
        return Ok(y);
    }
    let here = checked(phi.potential(s)?, s)?;
    let next = checked(phi.potential(s_next)?, s_next)?;
    let keep = !done || cfg.terminal_rule == TerminalRule::Carry;
    let next_term = if keep { cfg.pbrs_gamma * next } else { 0.0 };
    Ok(y + cfg.beta * (next_term - here))
}

/// `R'(s, x, s') = R(s, x) + gamma phi(s') - phi(s)`, indexed `[s][x][s']`.
pub fn shape_tabular_mdp(model: &InterventionalModel, phi: &ValueTable, gamma: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = model.n_states();
    if phi.len() != n {
        return arg("potential table does not cover every state");
    }
    Ok((0..n)
        .map(|s| {
            (0..model.n_actions())
                .map(|x| (0..n).map(|s2| model.reward[s][x] + gamma * phi[s2] - phi[s]).collect())
                .collect()
        })
        .collect())
}

/// Interventional model whose expected reward is the shaped reward.
pub fn shaped_interventional_model(model: &InterventionalModel, phi: &ValueTable, gamma: f64) -> Result<InterventionalModel> {
    let shaped = shape_tabular_mdp(model, phi, gamma)?;
    let reward = shaped
        .iter()
        .zip(&model.transition)
        .map(|(rs, ts)| rs.iter().zip(ts).map(|(r, t)| r.iter().zip(t).map(|(r, p)| r * p).sum()).collect())
        .collect();
    Ok(InterventionalModel { transition: model.transition.clone(), reward })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let phi = FnPotential(|s: &[f64]| if s[0] == 0.0 { 3.0 } else { 2.0 });
        let cfg = ShapingConfig { beta: 1.0, pbrs_gamma: 0.99, ..Default::default() };
        let r = shaped_reward(1.0, &[0.0], &[1.0], false, &cfg, &phi).unwrap();
        assert!((r - (-0.02)).abs() < 1e-12);
        let zero = ShapingConfig::with_beta(0.0);
        assert_eq!(shaped_reward(0.7, &[0.0], &[1.0], false, &zero, &phi).unwrap(), 0.7);
        let c = FnPotential(|_: &[f64]| 4.5);
        assert_eq!(shaped_reward(0.7, &[0.0], &[1.0], false, &ShapingConfig::with_beta(0.3), &c).unwrap(), 0.7);
    }

    #[test]
    fn terminal_rules() {
        let phi = FnPotential(|s: &[f64]| s[0]);
        let zero_next = ShapingConfig::default();
        assert_eq!(shaped_reward(0.0, &[2.0], &[5.0], true, &zero_next, &phi).unwrap(), -2.0);
        let carry = ShapingConfig { terminal_rule: TerminalRule::Carry, ..Default::default() };
        assert_eq!(shaped_reward(0.0, &[2.0], &[5.0], true, &carry, &phi).unwrap(), 3.0);
    }

    #[test]
    fn nonfinite_potential_names_state() {
        let phi = FnPotential(|_: &[f64]| f64::NAN);
        let err = shaped_reward(0.0, &[7.0], &[1.0], false, &ShapingConfig::default(), &phi).unwrap_err();
        assert!(err.to_string().contains("7.0"));
    }

    #[test]
    fn zero_potential_keeps_rewards() {
        let model = InterventionalModel {
            transition: vec![vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0]]],
            reward: vec![vec![1.0], vec![-2.0]],
        };
        let shaped = shaped_interventional_model(&model, &ValueTable::zeros(2), 0.9).unwrap();
        assert_eq!(shaped, model);
    }
}
