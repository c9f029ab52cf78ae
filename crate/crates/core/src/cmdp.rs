//! Confounded MDP structural model.
//!
//! A [`TabularCMDP`] holds deterministic mechanisms over `(state, action, noise)`
//! with every bit of stochasticity in the discrete noise distribution `P(U)`.
//! Two execution semantics are provided: the behavioral rollout, where the
//! demonstrator's action is itself a function of the shared noise, and the
//! interventional step, where the action is supplied from outside and the
//! noise is drawn independently of it.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Seeded generator used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

const PROB_TOL: f64 = 1e-12;

/// Draws an index from a probability vector by inverse CDF.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    // r landed in the rounding gap above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Tabular confounded MDP with deterministic mechanisms.
///
/// Mechanism tables are indexed `transition[s][x][u]`, `behavior[s][u]` and
/// `reward[s][x][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_noise: usize,
    pub noise_probs: Vec<f64>,
    pub transition: Vec<Vec<Vec<usize>>>,
    pub behavior: Vec<Vec<usize>>,
    pub reward: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub reward_bound: f64,
    pub initial_state_probs: Vec<f64>,
}

/// Outcome of one confounded behavioral step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehavioralOutcome {
    pub noise: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Exact interventional transition and mean-reward tables.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionalModel {
    /// `transition[s][x][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][x]`
    pub reward: Vec<Vec<f64>>,
}

impl InterventionalModel {
    pub fn n_states(&self) -> usize {
        self.reward.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.first().map_or(0, Vec::len)
    }
}

impl TabularCMDP {
    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.n_states == 0 || self.n_actions == 0 || self.n_noise == 0 {
            return bad("state, action and noise spaces must be nonempty".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0,1)", self.gamma));
        }
        check_distribution("noise_probs", &self.noise_probs, self.n_noise)?;
        check_distribution("initial_state_probs", &self.initial_state_probs, self.n_states)?;
        if self.transition.len() != self.n_states
            || self.behavior.len() != self.n_states
            || self.reward.len() != self.n_states
        {
            return bad("mechanism tables must have one row per state".into());
        }
        for s in 0..self.n_states {
            if self.behavior[s].len() != self.n_noise {
                return bad(format!("behavior[{s}] has wrong length"));
            }
            if let Some(&x) = self.behavior[s].iter().find(|&&x| x >= self.n_actions) {
                return bad(format!("behavior[{s}] emits out-of-range action {x}"));
            }
            if self.transition[s].len() != self.n_actions || self.reward[s].len() != self.n_actions {
                return bad(format!("transition/reward row {s} has wrong action count"));
            }
            for x in 0..self.n_actions {
                let t = &self.transition[s][x];
                let r = &self.reward[s][x];
                if t.len() != self.n_noise || r.len() != self.n_noise {
                    return bad(format!("mechanism ({s},{x}) has wrong noise count"));
                }
                if let Some(&sn) = t.iter().find(|&&sn| sn >= self.n_states) {
                    return bad(format!("transition ({s},{x}) emits out-of-range state {sn}"));
                }
                for (u, &y) in r.iter().enumerate() {
                    if !y.is_finite() || y > self.reward_bound {
                        return bad(format!(
                            "reward ({s},{x},{u}) = {y} violates bound {}",
                            self.reward_bound
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return arg(format!("state {s} out of range [0,{})", self.n_states));
        }
        Ok(())
    }

    fn check_action(&self, x: usize) -> Result<()> {
        if x >= self.n_actions {
            return arg(format!("action {x} out of range [0,{})", self.n_actions));
        }
        Ok(())
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.noise_probs, rng)
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_state_probs, rng)
    }

    /// One step of the offline data-generating process: nature draws `u`, the
    /// demonstrator acts on `(s, u)`, and reward and next state follow.
    pub fn behavioral_step<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<BehavioralOutcome> {
        self.check_state(s)?;
        let u = self.sample_noise(rng);
        Ok(self.behavioral_step_with_noise(s, u))
    }

    /// Behavioral step with the noise value already drawn.
    pub fn behavioral_step_with_noise(&self, s: usize, u: usize) -> BehavioralOutcome {
        let x = self.behavior[s][u];
        BehavioralOutcome {
            noise: u,
            action: x,
            reward: self.reward[s][x][u],
            next_state: self.transition[s][x][u],
        }
    }

    /// One step under `do(x)`: the behavior mechanism is bypassed.
    pub fn interventional_step<R: Rng + ?Sized>(
        &self,
        s: usize,
        x: usize,
        rng: &mut R,
    ) -> Result<(f64, usize)> {
        self.check_state(s)?;
        self.check_action(x)?;
        let u = self.sample_noise(rng);
        Ok((self.reward[s][x][u], self.transition[s][x][u]))
    }

    /// Interventional transition and reward obtained by summing the mechanisms
    /// over the noise distribution.
    pub fn exact_interventional_model(&self) -> InterventionalModel {
        let mut transition = vec![vec![vec![0.0; self.n_states]; self.n_actions]; self.n_states];
        let mut reward = vec![vec![0.0; self.n_actions]; self.n_states];
        for s in 0..self.n_states {
            for x in 0..self.n_actions {
                for (u, &p) in self.noise_probs.iter().enumerate() {
                    transition[s][x][self.transition[s][x][u]] += p;
                    reward[s][x] += p * self.reward[s][x][u];
                }
            }
        }
        InterventionalModel { transition, reward }
    }

    /// Behavioral Markov chain over states, `P_b(s' | s)`.
    pub fn behavioral_chain(&self) -> Vec<Vec<f64>> {
        let mut chain = vec![vec![0.0; self.n_states]; self.n_states];
        for (s, row) in chain.iter_mut().enumerate() {
            for (u, &p) in self.noise_probs.iter().enumerate() {
                row[self.behavioral_step_with_noise(s, u).next_state] += p;
            }
        }
        chain
    }

    /// Serializes to the versioned JSON document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CmdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CmdpDocument = serde_json::from_str(text)?;
        if doc.version != CMDP_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!("unsupported version {}", doc.version)));
        }
        let cmdp = Self::from(doc);
        cmdp.validate()?;
        Ok(cmdp)
    }
}

fn check_distribution(name: &str, probs: &[f64], len: usize) -> Result<()> {
    if probs.len() != len {
        return Err(Error::InvalidModel(format!("{name} has length {}, expected {len}", probs.len())));
    }
    if probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidModel(format!("{name} has a negative or NaN entry")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidModel(format!("{name} sums to {total}")));
    }
    Ok(())
}

pub const CMDP_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CmdpDocument {
    version: u32,
    n_states: usize,
    n_actions: usize,
    n_noise: usize,
    noise_probs: Vec<f64>,
    transition: Vec<Vec<Vec<usize>>>,
    behavior: Vec<Vec<usize>>,
    reward: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    b: f64,
    init: Vec<f64>,
}

impl From<&TabularCMDP> for CmdpDocument {
    fn from(c: &TabularCMDP) -> Self {
        Self {
            version: CMDP_FORMAT_VERSION,
            n_states: c.n_states,
            n_actions: c.n_actions,
            n_noise: c.n_noise,
            noise_probs: c.noise_probs.clone(),
            transition: c.transition.clone(),
            behavior: c.behavior.clone(),
            reward: c.reward.clone(),
            gamma: c.gamma,
            b: c.reward_bound,
            init: c.initial_state_probs.clone(),
        }
    }
}

impl From<CmdpDocument> for TabularCMDP {
    fn from(d: CmdpDocument) -> Self {
        Self {
            n_states: d.n_states,
            n_actions: d.n_actions,
            n_noise: d.n_noise,
            noise_probs: d.noise_probs,
            transition: d.transition,
            behavior: d.behavior,
            reward: d.reward,
            gamma: d.gamma,
            reward_bound: d.b,
            initial_state_probs: d.init,
        }
    }
}

/// Observation dimensions hidden from the learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    hidden: BTreeSet<usize>,
    full_dim: usize,
}

impl MaskSpec {
    pub fn new(full_dim: usize, hidden: impl IntoIterator<Item = usize>) -> Result<Self> {
        let hidden: BTreeSet<usize> = hidden.into_iter().collect();
        if let Some(&d) = hidden.iter().find(|&&d| d >= full_dim) {
            return arg(format!("hidden dimension {d} outside [0,{full_dim})"));
        }
        Ok(Self { hidden, full_dim })
    }

    pub fn none(full_dim: usize) -> Self {
        Self { hidden: BTreeSet::new(), full_dim }
    }

    pub fn hidden(&self) -> impl Iterator<Item = usize> + '_ {
        self.hidden.iter().copied()
    }

    pub fn is_hidden(&self, d: usize) -> bool {
        self.hidden.contains(&d)
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }

    pub fn masked_dim(&self) -> usize {
        self.full_dim - self.hidden.len()
    }

    /// Indices of the full vector that remain visible, in order.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.full_dim).filter(|d| !self.hidden.contains(d)).collect()
    }

    /// Removes the hidden dimensions from `full`, preserving order.
    pub fn apply(&self, full: &[f64]) -> Result<Vec<f64>> {
        mask_observation(full, self)
    }
}

pub fn mask_observation(full: &[f64], mask: &MaskSpec) -> Result<Vec<f64>> {
    if full.len() != mask.full_dim {
        return arg(format!(
            "observation length {} does not match mask dimension {}",
            full.len(),
            mask.full_dim
        ));
    }
    Ok(full
        .iter()
        .enumerate()
        .filter(|(d, _)| !mask.hidden.contains(d))
        .map(|(_, &v)| v)
        .collect())
}

/// One recorded step of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub episode_id: usize,
    pub step_index: usize,
}

/// Result of stepping a continuous environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Interventional interface of a continuous environment. Observations are
/// full (unmasked) state vectors; masking happens at the consumer.
pub trait ContinuousEnv {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> Vec<(f64, f64)>;
    fn reward_bound(&self) -> f64;
    /// Episode length after which the episode is truncated.
    fn horizon(&self) -> usize;
    /// Starts a new episode; deterministic given the seed.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Applies `do(action)`.
    fn step(&mut self, action: &[f64]) -> Step;
}
