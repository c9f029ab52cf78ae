//! Concrete confounded environments.
//!
//! [`gen_random_tabular`] draws seeded tabular CMDPs whose behavior mechanism
//! depends on the confounder with a tunable strength. [`PointMass`] is a
//! continuous 2-D point mass pushed by a hidden per-episode wind that the
//! scripted demonstrator can see and the learner cannot; hiding the velocity
//! dimensions additionally confounds the offline decisions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cmdp::{seeded, ContinuousEnv, MaskSpec, SeededRng, Step, TabularCMDP};
use crate::data::{BehaviorSource, BehaviorStep};
use crate::error::{arg, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomCMDPConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_noise: usize,
    /// `[low, high]`; `high` becomes the reward bound.
    pub reward_range: [f64; 2],
    /// Confounding strength in `[0, 1]`.
    pub confound_strength: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for RandomCMDPConfig {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_actions: 3,
            n_noise: 4,
            reward_range: [0.0, 1.0],
            confound_strength: 1.0,
            gamma: 0.9,
            seed: 0,
        }
    }
}

impl RandomCMDPConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.n_noise == 0 {
            return arg("random CMDP sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return arg(format!("confound_strength {} outside [0,1]", self.confound_strength));
        }
        if !(self.reward_range[0] < self.reward_range[1]) {
            return arg("reward_range must satisfy low < high");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg(format!("gamma {} outside (0,1)", self.gamma));
        }
        Ok(())
    }
}

/// Draws a random tabular CMDP.
///
/// Each `(s, u)` cell of the behavior mechanism follows the confounder with
/// probability `confound_strength` (through a per-state permutation of
/// `u mod n_actions`) and otherwise plays a fixed per-state default action.
/// With full confounding and `n_noise >= n_actions` every action has positive
/// behavioral propensity in every state.
pub fn gen_random_tabular(cfg: &RandomCMDPConfig) -> Result<TabularCMDP> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let (ns, na, nu) = (cfg.n_states, cfg.n_actions, cfg.n_noise);
    let [low, high] = cfg.reward_range;

    let weights: Vec<f64> = (0..nu).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let mut noise_probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    // absorb rounding so the distribution sums to one
    let head: f64 = noise_probs[..nu - 1].iter().sum();
    noise_probs[nu - 1] = 1.0 - head;

    let mut behavior = Vec::with_capacity(ns);
    for _ in 0..ns {
        let default_action = rng.random_range(0..na);
        let mut perm: Vec<usize> = (0..na).collect();
        perm.shuffle(&mut rng);
        let row = (0..nu)
            .map(|u| {
                let coin: f64 = rng.random();
                if coin < cfg.confound_strength {
                    perm[u % na]
                } else {
                    default_action
                }
            })
            .collect();
        behavior.push(row);
    }

    let transition = (0..ns)
        .map(|_| (0..na).map(|_| (0..nu).map(|_| rng.random_range(0..ns)).collect()).collect())
        .collect();
    let reward = (0..ns)
        .map(|_| {
            (0..na)
                .map(|_| (0..nu).map(|_| rng.random_range(low..high).min(high)).collect())
                .collect()
        })
        .collect();

    let cmdp = TabularCMDP {
        n_states: ns,
        n_actions: na,
        n_noise: nu,
        noise_probs,
        transition,
        behavior,
        reward,
        gamma: cfg.gamma,
        reward_bound: high,
        initial_state_probs: vec![1.0 / ns as f64; ns],
    };
    debug_assert!(cmdp.validate().is_ok());
    Ok(cmdp)
}

/// Behavioral rollouts of a tabular CMDP.
///
/// The full observation is `[s]`, or `[s, u]` when the confounder is exposed
/// as a privileged column (mask it with `MaskSpec::new(2, [1])`).
#[derive(Debug, Clone)]
pub struct TabularBehavior<'a> {
    cmdp: &'a TabularCMDP,
    expose_noise: bool,
    horizon: usize,
    state: usize,
    noise: usize,
}

pub const DEFAULT_ROLLOUT_HORIZON: usize = 200;

impl<'a> TabularBehavior<'a> {
    pub fn new(cmdp: &'a TabularCMDP, horizon: usize, expose_noise: bool) -> Self {
        Self { cmdp, expose_noise, horizon, state: 0, noise: 0 }
    }

    fn observe(&self, s: usize, u: usize) -> Vec<f64> {
        if self.expose_noise {
            vec![s as f64, u as f64]
        } else {
            vec![s as f64]
        }
    }
}

impl BehaviorSource for TabularBehavior<'_> {
    fn env_id(&self) -> String {
        format!("tabular-{}x{}x{}", self.cmdp.n_states, self.cmdp.n_actions, self.cmdp.n_noise)
    }

    fn full_dim(&self) -> usize {
        if self.expose_noise { 2 } else { 1 }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        self.state = self.cmdp.sample_initial_state(rng);
        self.noise = self.cmdp.sample_noise(rng);
        self.observe(self.state, self.noise)
    }

    fn step(&mut self, rng: &mut SeededRng) -> BehaviorStep {
        let obs = self.observe(self.state, self.noise);
        let out = self.cmdp.behavioral_step_with_noise(self.state, self.noise);
        self.state = out.next_state;
        self.noise = self.cmdp.sample_noise(rng);
        BehaviorStep {
            obs,
            action: vec![out.action as f64],
            reward: out.reward,
            next_obs: self.observe(self.state, self.noise),
            done: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    /// Integration step in seconds.
    pub dt: f64,
    pub episode_len: usize,
    /// Standard deviation of the hidden wind acceleration.
    pub drift_std: f64,
    pub goal: [f64; 2],
    pub action_bound: f64,
    /// Linear velocity damping coefficient (1/s).
    pub damping: f64,
    /// Start positions are uniform in `[start_low, start_high]^2`.
    pub start_low: f64,
    pub start_high: f64,
    /// Redraw the wind every step instead of once per episode.
    pub per_step_wind: bool,
    pub mask: MaskSpec,
    pub seed: u64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            episode_len: 200,
            drift_std: 0.1,
            goal: [1.0, 1.0],
            action_bound: 1.0,
            damping: 1.0,
            start_low: -1.0,
            start_high: 1.0,
            per_step_wind: false,
            mask: MaskSpec::none(POINT_MASS_DIM),
            seed: 0,
        }
    }
}

pub const POINT_MASS_DIM: usize = 4;

impl PointMassConfig {
    /// Velocities hidden from the learner.
    pub fn velocity_mask() -> MaskSpec {
        MaskSpec::new(POINT_MASS_DIM, [2, 3]).expect("static mask")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return arg("dt must be positive");
        }
        if self.episode_len == 0 {
            return arg("episode_len must be positive");
        }
        if !(self.drift_std >= 0.0) || !(self.action_bound > 0.0) || !(self.damping >= 0.0) {
            return arg("drift_std, action_bound and damping must be nonnegative (bound positive)");
        }
        if !(self.start_low <= self.start_high) {
            return arg("start_low must not exceed start_high");
        }
        if self.mask.full_dim() != POINT_MASS_DIM {
            return arg("point-mass mask must have full_dim 4");
        }
        Ok(())
    }
}

/// Point mass with state `[pos_x, pos_y, vel_x, vel_y]`.
///
/// Semi-implicit Euler: `v <- (1 - c dt) v + dt (a + w)`, `p <- p + dt v`.
/// Reward is `-|p - goal| - 0.01 |a|^2` evaluated after the move, so the
/// reward bound is exactly zero.
#[derive(Debug, Clone)]
pub struct PointMass {
    cfg: PointMassConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    wind: [f64; 2],
    t: usize,
    rng: SeededRng,
}

pub fn make_point_mass(cfg: PointMassConfig) -> Result<PointMass> {
    cfg.validate()?;
    let rng = seeded(cfg.seed);
    Ok(PointMass { cfg, pos: [0.0; 2], vel: [0.0; 2], wind: [0.0; 2], t: 0, rng })
}

impl PointMass {
    pub fn config(&self) -> &PointMassConfig {
        &self.cfg
    }

    pub fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    /// Hidden wind acting during the current episode.
    pub fn wind(&self) -> [f64; 2] {
        self.wind
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }

    pub fn set_wind(&mut self, wind: [f64; 2]) {
        self.wind = wind;
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    fn draw_wind(&mut self) {
        if self.cfg.drift_std > 0.0 {
            let n = Normal::new(0.0, self.cfg.drift_std).expect("positive std");
            self.wind = [n.sample(&mut self.rng), n.sample(&mut self.rng)];
        } else {
            self.wind = [0.0; 2];
        }
    }

    fn clip(&self, a: f64) -> f64 {
        a.clamp(-self.cfg.action_bound, self.cfg.action_bound)
    }

    pub fn distance_to_goal(&self) -> f64 {
        let dx = self.pos[0] - self.cfg.goal[0];
        let dy = self.pos[1] - self.cfg.goal[1];
        dx.hypot(dy)
    }
}

impl ContinuousEnv for PointMass {
    fn obs_dim(&self) -> usize {
        POINT_MASS_DIM
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.cfg.action_bound, self.cfg.action_bound); 2]
    }

    fn reward_bound(&self) -> f64 {
        0.0
    }

    fn horizon(&self) -> usize {
        self.cfg.episode_len
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = seeded(seed);
        let (lo, hi) = (self.cfg.start_low, self.cfg.start_high);
        self.pos = if lo < hi {
            [self.rng.random_range(lo..hi), self.rng.random_range(lo..hi)]
        } else {
            [lo, lo]
        };
        self.vel = [0.0; 2];
        self.t = 0;
        self.draw_wind();
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        if self.cfg.per_step_wind {
            self.draw_wind();
        }
        let a = [self.clip(action[0]), self.clip(action[1])];
        let keep = 1.0 - self.cfg.damping * self.cfg.dt;
        for i in 0..2 {
            self.vel[i] = keep * self.vel[i] + self.cfg.dt * (a[i] + self.wind[i]);
            self.pos[i] += self.cfg.dt * self.vel[i];
        }
        self.t += 1;
        let reward = -self.distance_to_goal() - 0.01 * (a[0] * a[0] + a[1] * a[1]);
        Step { obs: self.state(), reward, done: false }
    }
}

/// Demonstrator expertise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Skill {
    Simple,
    Medium,
    Expert,
}

impl Skill {
    pub fn tag(self) -> &'static str {
        match self {
            Skill::Simple => "simple",
            Skill::Medium => "medium",
            Skill::Expert => "expert",
        }
    }
}

impl std::str::FromStr for Skill {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Skill::Simple),
            "medium" => Ok(Skill::Medium),
            "expert" => Ok(Skill::Expert),
            other => arg(format!("unknown skill '{other}'")),
        }
    }
}

pub const EXPERT_KP: f64 = 4.0;
pub const EXPERT_KD: f64 = 3.0;
const MEDIUM_NOISE: f64 = 0.2;

/// Scripted demonstrator for the point mass. It sees the full state and the
/// hidden wind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedBehavior {
    pub skill: Skill,
}

pub fn scripted_behavior(skill: Skill) -> ScriptedBehavior {
    ScriptedBehavior { skill }
}

impl ScriptedBehavior {
    pub fn act<R: Rng + ?Sized>(&self, env: &PointMass, rng: &mut R) -> Vec<f64> {
        let cfg = env.config();
        let bound = cfg.action_bound;
        let pd = |gain: f64, noise: f64, rng: &mut R| -> Vec<f64> {
            let n = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("std");
            (0..2)
                .map(|i| {
                    let mut a = gain * EXPERT_KP * (cfg.goal[i] - env.pos[i])
                        - gain * EXPERT_KD * env.vel[i]
                        - env.wind[i];
                    if noise > 0.0 {
                        a += n.sample(rng);
                    }
                    a.clamp(-bound, bound)
                })
                .collect()
        };
        match self.skill {
            Skill::Expert => pd(1.0, 0.0, rng),
            Skill::Medium => pd(0.5, MEDIUM_NOISE, rng),
            Skill::Simple => (0..2).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

/// Behavioral rollouts of the point mass under a scripted demonstrator.
#[derive(Debug, Clone)]
pub struct PointMassBehavior {
    env: PointMass,
    policy: ScriptedBehavior,
}

impl PointMassBehavior {
    pub fn new(env: PointMass, skill: Skill) -> Self {
        Self { env, policy: scripted_behavior(skill) }
    }

    pub fn env(&self) -> &PointMass {
        &self.env
    }
}

impl BehaviorSource for PointMassBehavior {
    fn env_id(&self) -> String {
        "point-mass".into()
    }

    fn full_dim(&self) -> usize {
        POINT_MASS_DIM
    }

    fn horizon(&self) -> usize {
        self.env.horizon()
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        let seed = rng.random();
        self.env.reset(seed)
    }

    fn step(&mut self, rng: &mut SeededRng) -> BehaviorStep {
        let obs = self.env.state();
        let action = self.policy.act(&self.env, rng);
        let out = self.env.step(&action);
        BehaviorStep { obs, action, reward: out.reward, next_obs: out.obs, done: out.done }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_confounding_gives_u_independent_behavior() {
        let cfg = RandomCMDPConfig { confound_strength: 0.0, seed: 17, ..Default::default() };
        let c = gen_random_tabular(&cfg).unwrap();
        for row in &c.behavior {
            assert!(row.iter().all(|&x| x == row[0]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = RandomCMDPConfig { seed: 99, confound_strength: 0.5, ..Default::default() };
        let a = gen_random_tabular(&cfg).unwrap().to_json().unwrap();
        let b = gen_random_tabular(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_models_are_valid_and_covered() {
        for seed in 0..50 {
            let cfg = RandomCMDPConfig { seed, n_noise: 5, n_actions: 4, ..Default::default() };
            let c = gen_random_tabular(&cfg).unwrap();
            c.validate().unwrap();
            for row in &c.behavior {
                let mut seen = vec![false; c.n_actions];
                row.iter().for_each(|&x| seen[x] = true);
                assert!(seen.iter().all(|&v| v));
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = RandomCMDPConfig { confound_strength: 1.5, ..Default::default() };
        assert!(gen_random_tabular(&cfg).is_err());
        let cfg = RandomCMDPConfig { reward_range: [1.0, 1.0], ..Default::default() };
        assert!(gen_random_tabular(&cfg).is_err());
    }

    #[test]
    fn still_mass_stays_put() {
        let cfg = PointMassConfig { drift_std: 0.0, ..Default::default() };
        let mut env = make_point_mass(cfg).unwrap();
        let s0 = env.reset(4);
        let d0 = env.distance_to_goal();
        let out = env.step(&[0.0, 0.0]);
        assert_eq!(out.obs, s0);
        assert_eq!(out.reward, -d0);
    }

    #[test]
    fn push_and_return_restores_position() {
        let cfg = PointMassConfig { drift_std: 0.0, ..Default::default() };
        let mut env = make_point_mass(cfg.clone()).unwrap();
        env.reset(1);
        let start = [0.2, -0.3];
        env.set_state(start, [0.0, 0.0]);
        let a = [0.3, -0.4];
        env.step(&a);
        let correction = 1.0 - cfg.damping * cfg.dt;
        env.step(&[-a[0] * (1.0 + correction), -a[1] * (1.0 + correction)]);
        let s = env.state();
        assert!((s[0] - start[0]).abs() < 1e-9 && (s[1] - start[1]).abs() < 1e-9);
    }

    #[test]
    fn reset_is_seeded() {
        let mut env = make_point_mass(PointMassConfig::default()).unwrap();
        let a = env.reset(8);
        let wa = env.wind();
        let b = env.reset(8);
        assert_eq!(a, b);
        assert_eq!(wa, env.wind());
    }

    #[test]
    fn rewards_never_exceed_zero() {
        let mut env = make_point_mass(PointMassConfig::default()).unwrap();
        let mut rng = seeded(2);
        for ep in 0..50 {
            env.reset(ep);
            for _ in 0..200 {
                let a = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                assert!(env.step(&a).reward <= 0.0);
            }
        }
    }

    #[test]
    fn expert_reaches_goal() {
        let mut env = make_point_mass(PointMassConfig::default()).unwrap();
        let expert = scripted_behavior(Skill::Expert);
        let mut rng = seeded(0);
        for ep in 0..30 {
            env.reset(ep);
            for _ in 0..200 {
                let a = expert.act(&env, &mut rng);
                env.step(&a);
            }
            assert!(env.distance_to_goal() < 0.05, "episode {ep}: {}", env.distance_to_goal());
        }
    }
}
