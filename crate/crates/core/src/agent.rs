//! Online learners: soft actor-critic for continuous control and tabular
//! Q-learning, both optionally trained on shaped rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{seeded, ContinuousEnv, MaskSpec, SeededRng, TabularCMDP};
use crate::envs::{scripted_behavior, PointMass, Skill};
use crate::error::{arg, Error, Result};
use crate::nn::gaussian::{standard_normal, GaussianHead, LN_2PI};
use crate::nn::gradcheck::Objective;
use crate::nn::mlp::{Mlp, MlpSpec};
use crate::nn::params::{load_checkpoint, save_checkpoint, soft_update, ParamStore};
use crate::nn::{Adam, AdamConfig, SquaredError};
use crate::shaping::{shaped_reward, Potential, ShapingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SACConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub target_update_interval: usize,
    /// The actor is updated on every n-th environment step.
    pub policy_train_freq: usize,
    /// Critic updates per environment step.
    pub gradient_steps: usize,
    pub replay_capacity: usize,
    /// Uniform-random steps before learning starts.
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    pub seed: u64,
}

impl Default for SACConfig {
    fn default() -> Self {
        Self {
            total_steps: 50_000,
            batch_size: 512,
            lr_policy: 3e-4,
            lr_q: 1e-3,
            alpha: 0.2,
            gamma: 0.99,
            tau: 0.005,
            target_update_interval: 1,
            policy_train_freq: 2,
            gradient_steps: 1,
            replay_capacity: 1_000_000,
            warmup_steps: 1000,
            eval_interval: 1000,
            eval_episodes: 5,
            hidden_dim: 256,
            n_residual_blocks: 2,
            seed: 0,
        }
    }
}

impl SACConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("total_steps", self.total_steps),
            ("batch_size", self.batch_size),
            ("target_update_interval", self.target_update_interval),
            ("policy_train_freq", self.policy_train_freq),
            ("gradient_steps", self.gradient_steps),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return arg(format!("{name} must be positive"));
            }
        }
        if !(self.lr_policy > 0.0 && self.lr_q > 0.0) {
            return arg("learning rates must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return arg("alpha must be nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg("gamma must lie in (0,1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return arg("tau must lie in (0,1]");
        }
        Ok(())
    }
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    capacity: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    /// Reward used for learning (shaped when shaping is active).
    reward: Vec<f64>,
    raw_reward: Vec<f64>,
    next_obs: Vec<f64>,
    done: Vec<bool>,
    inserted: usize,
}

/// A sampled mini-batch, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            capacity: capacity.max(1),
            obs: Vec::new(),
            act: Vec::new(),
            reward: Vec::new(),
            raw_reward: Vec::new(),
            next_obs: Vec::new(),
            done: Vec::new(),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.inserted.min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total insertions, including overwritten ones.
    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, raw_reward: f64, next_obs: &[f64], done: bool) {
        assert_eq!(obs.len(), self.obs_dim);
        assert_eq!(act.len(), self.act_dim);
        assert_eq!(next_obs.len(), self.obs_dim);
        let slot = self.inserted % self.capacity;
        if self.inserted < self.capacity {
            self.obs.extend_from_slice(obs);
            self.act.extend_from_slice(act);
            self.reward.push(reward);
            self.raw_reward.push(raw_reward);
            self.next_obs.extend_from_slice(next_obs);
            self.done.push(done);
        } else {
            let (o, a) = (self.obs_dim, self.act_dim);
            self.obs[slot * o..(slot + 1) * o].copy_from_slice(obs);
            self.act[slot * a..(slot + 1) * a].copy_from_slice(act);
            self.reward[slot] = reward;
            self.raw_reward[slot] = raw_reward;
            self.next_obs[slot * o..(slot + 1) * o].copy_from_slice(next_obs);
            self.done[slot] = done;
        }
        self.inserted += 1;
    }

    pub fn reward_at(&self, i: usize) -> (f64, f64) {
        (self.reward[i], self.raw_reward[i])
    }

    /// Uniform indices with replacement over the current contents.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let len = self.len();
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut b = Batch {
            n: idx.len(),
            obs: Vec::with_capacity(idx.len() * o),
            act: Vec::with_capacity(idx.len() * a),
            reward: Vec::with_capacity(idx.len()),
            next_obs: Vec::with_capacity(idx.len() * o),
            done: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.obs.extend_from_slice(&self.obs[i * o..(i + 1) * o]);
            b.act.extend_from_slice(&self.act[i * a..(i + 1) * a]);
            b.reward.push(self.reward[i]);
            b.next_obs.extend_from_slice(&self.next_obs[i * o..(i + 1) * o]);
            b.done.push(self.done[i]);
        }
        b
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return arg("cannot sample from an empty replay buffer");
        }
        Ok(self.gather(&self.sample_indices(n, rng)))
    }
}

/// Maps observations to actions.
pub trait Policy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;
}

impl<F: FnMut(&[f64]) -> Vec<f64>> Policy for F {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self(obs)
    }
}

/// Uniform random actions within bounds.
pub struct UniformPolicy {
    pub bounds: Vec<(f64, f64)>,
    pub rng: SeededRng,
}

impl Policy for UniformPolicy {
    fn act(&mut self, _: &[f64]) -> Vec<f64> {
        self.bounds.iter().map(|&(lo, hi)| self.rng.random_range(lo..=hi)).collect()
    }
}

const LOG_DET_EPS: f64 = 1e-6;

/// Tanh-squashed diagonal Gaussian actor.
#[derive(Debug, Clone)]
pub struct SacActor {
    pub mlp: Mlp,
    pub params: ParamStore,
    pub head: GaussianHead,
    /// Half-widths of the action box.
    pub scale: Vec<f64>,
    pub center: Vec<f64>,
}

/// Forward results of the actor on a batch with fixed noise.
#[derive(Debug, Clone)]
pub struct ActorSample {
    pub action: Vec<f64>,
    pub log_prob: Vec<f64>,
}

impl SacActor {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, bounds: &[(f64, f64)], hidden: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec { input_dim: obs_dim, output_dim: 2 * bounds.len(), hidden_dim: hidden, n_residual_blocks: blocks };
        let (mlp, mut params) = Mlp::new(spec)?;
        mlp.init(&mut params.data, rng);
        Ok(Self {
            mlp,
            params,
            head: GaussianHead::default(),
            scale: bounds.iter().map(|(lo, hi)| 0.5 * (hi - lo)).collect(),
            center: bounds.iter().map(|(lo, hi)| 0.5 * (hi + lo)).collect(),
        })
    }

    pub fn act_dim(&self) -> usize {
        self.scale.len()
    }

    /// Deterministic action `center + scale * tanh(mu)`.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let raw = self.mlp.forward(&self.params.data, obs)?;
        Ok((0..self.act_dim()).map(|j| self.center[j] + self.scale[j] * raw[j].tanh()).collect())
    }

    /// Squashed samples and log-probabilities for noise `eps` (`n x act_dim`).
    pub fn sample_with(&self, params: &[f64], obs: &[f64], eps: &[f64], n: usize) -> Result<ActorSample> {
        let d = self.act_dim();
        let raw = self.mlp.forward_rows(params, obs, n)?;
        let mut out = ActorSample { action: Vec::with_capacity(n * d), log_prob: Vec::with_capacity(n) };
        for i in 0..n {
            let (mu, ls, _) = self.head.split(&raw[i * 2 * d..(i + 1) * 2 * d]);
            let mut lp = 0.0;
            for j in 0..d {
                let e = eps[i * d + j];
                let t = (mu[j] + ls[j].exp() * e).tanh();
                out.action.push(self.center[j] + self.scale[j] * t);
                lp += -0.5 * LN_2PI - ls[j] - 0.5 * e * e - (self.scale[j] * (1.0 - t * t) + LOG_DET_EPS).ln();
            }
            out.log_prob.push(lp);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.params, self.mlp.spec.arch_hash())
    }

    pub fn load_into(&mut self, path: &std::path::Path) -> Result<()> {
        load_checkpoint(path, &mut self.params, self.mlp.spec.arch_hash())
    }
}

impl Policy for SacActor {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self.mean_action(obs).expect("observation width matches the actor")
    }
}

/// Twin Q-networks sharing one layout.
#[derive(Debug, Clone)]
pub struct TwinCritic {
    pub mlp: Mlp,
    pub q1: ParamStore,
    pub q2: ParamStore,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec { input_dim: obs_dim + act_dim, output_dim: 1, hidden_dim: hidden, n_residual_blocks: blocks };
        let (mlp, mut q1) = Mlp::new(spec)?;
        let mut q2 = q1.clone();
        mlp.init(&mut q1.data, rng);
        mlp.init(&mut q2.data, rng);
        Ok(Self { mlp, q1, q2 })
    }

    /// Elementwise `min(Q1, Q2)` on rows of `[s, a]`.
    pub fn min_q(&self, sa: &[f64], n: usize) -> Result<Vec<f64>> {
        let a = self.mlp.forward_rows(&self.q1.data, sa, n)?;
        let b = self.mlp.forward_rows(&self.q2.data, sa, n)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }
}

fn join_rows(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    out
}

/// Entropy-regularized twin-critic targets
/// `r + gamma (1 - done) (min Q_target(s', a') - alpha log pi(a' | s'))`
/// with `a'` drawn using noise `eps`.
#[allow(clippy::too_many_arguments)]
pub fn critic_targets(
    actor: &SacActor,
    target: &TwinCritic,
    batch: &Batch,
    eps: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = batch.n;
    let od = batch.obs.len() / n.max(1);
    let next = actor.sample_with(&actor.params.data, &batch.next_obs, eps, n)?;
    let sa = join_rows(&batch.next_obs, od, &next.action, actor.act_dim(), n);
    let q = target.min_q(&sa, n)?;
    Ok((0..n)
        .map(|i| {
            let cont = if batch.done[i] { 0.0 } else { 1.0 };
            batch.reward[i] + gamma * cont * (q[i] - alpha * next.log_prob[i])
        })
        .collect())
}

/// `mean 0.5 (Q(s, a) - target)^2` for one critic.
pub type CriticLoss<'a> = SquaredError<'a>;

/// `mean (alpha log pi(a|s) - min(Q1, Q2)(s, a))` with `a` reparameterized
/// from fixed noise; differentiated with respect to the actor parameters.
pub struct ActorLoss<'a> {
    pub actor: &'a SacActor,
    pub critic: &'a TwinCritic,
    pub obs: &'a [f64],
    pub eps: &'a [f64],
    pub n: usize,
    pub alpha: f64,
}

impl Objective for ActorLoss<'_> {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (actor, n, d) = (self.actor, self.n, self.actor.act_dim());
        let od = actor.mlp.spec.input_dim;
        let (raw, cache) = actor.mlp.forward_batch(params, self.obs, n).expect("actor batch shape");
        let mut us = Vec::with_capacity(n * d);
        let mut actions = Vec::with_capacity(n * d);
        let mut split = Vec::with_capacity(n);
        let mut log_prob = vec![0.0; n];
        for i in 0..n {
            let (mu, ls, inside) = actor.head.split(&raw[i * 2 * d..(i + 1) * 2 * d]);
            for j in 0..d {
                let e = self.eps[i * d + j];
                let u = mu[j] + ls[j].exp() * e;
                let t = u.tanh();
                us.push(u);
                actions.push(actor.center[j] + actor.scale[j] * t);
                log_prob[i] += -0.5 * LN_2PI - ls[j] - 0.5 * e * e - (actor.scale[j] * (1.0 - t * t) + LOG_DET_EPS).ln();
            }
            split.push((ls, inside));
        }
        let sa = join_rows(self.obs, od, &actions, d, n);
        let cm = &self.critic.mlp;
        let (q1, c1) = cm.forward_batch(&self.critic.q1.data, &sa, n).expect("critic batch shape");
        let (q2, c2) = cm.forward_batch(&self.critic.q2.data, &sa, n).expect("critic batch shape");
        let inv_n = 1.0 / n as f64;
        let mut dy1 = vec![0.0; n];
        let mut dy2 = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            if q1[i] <= q2[i] {
                dy1[i] = -inv_n;
                loss += self.alpha * log_prob[i] - q1[i];
            } else {
                dy2[i] = -inv_n;
                loss += self.alpha * log_prob[i] - q2[i];
            }
        }
        let mut scratch = vec![0.0; cm.n_params()];
        let dsa1 = cm.backward(&self.critic.q1.data, &c1, &dy1, &mut scratch, true).expect("requested");
        let dsa2 = cm.backward(&self.critic.q2.data, &c2, &dy2, &mut scratch, true).expect("requested");

        let mut dy = vec![0.0; n * 2 * d];
        for i in 0..n {
            let (ls, inside) = &split[i];
            for j in 0..d {
                let t = us[i * d + j].tanh();
                let b = actor.scale[j];
                let one_m = 1.0 - t * t;
                let dc_du = 2.0 * b * t * one_m / (b * one_m + LOG_DET_EPS);
                let dl_da = dsa1[i * (od + d) + od + j] + dsa2[i * (od + d) + od + j];
                let dl_du = self.alpha * inv_n * dc_du + dl_da * b * one_m;
                dy[i * 2 * d + j] = dl_du;
                if inside[j] {
                    dy[i * 2 * d + d + j] = -self.alpha * inv_n + dl_du * ls[j].exp() * self.eps[i * d + j];
                }
            }
        }
        let mut g = vec![0.0; params.len()];
        actor.mlp.backward(params, &cache, &dy, &mut g, false);
        (loss * inv_n, g)
    }
}

/// Shaping applied to training rewards.
#[derive(Clone, Copy)]
pub struct Shaping<'a> {
    pub cfg: &'a ShapingConfig,
    pub potential: &'a dyn Potential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub episodes: usize,
}

pub const CURVE_HEADER: &str = "step,eval_mean,eval_std,episodes";

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.eval_mean, p.eval_std, p.episodes));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SacResult {
    pub curve: Vec<CurvePoint>,
    pub actor: SacActor,
    pub critic: TwinCritic,
    pub critic_losses: Vec<f64>,
    pub episodes: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

const EVAL_SALT: u64 = 0x5eed_0e7a_1000_0001;

/// Seeds of the evaluation episodes used by [`sac_train`] for `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SALT
}

/// Soft actor-critic on a continuous environment. The learner sees masked
/// observations; shaping, when given, is applied once per transition as it
/// enters the replay buffer. Evaluation always reports raw rewards.
pub fn sac_train<E: ContinuousEnv + Clone>(env: &E, mask: &MaskSpec, shaping: Option<Shaping<'_>>, cfg: &SACConfig) -> Result<SacResult> {
    cfg.validate()?;
    if let Some(s) = &shaping {
        s.cfg.validate()?;
    }
    if mask.full_dim() != env.obs_dim() {
        return arg("mask does not match the environment observation width");
    }
    let mut env = env.clone();
    let mut eval_env = env.clone();
    let bounds = env.action_bounds();
    let (od, ad) = (mask.masked_dim(), bounds.len());
    let mut rng = seeded(cfg.seed);
    let mut actor = SacActor::new(od, &bounds, cfg.hidden_dim, cfg.n_residual_blocks, &mut rng)?;
    let mut critic = TwinCritic::new(od, ad, cfg.hidden_dim, cfg.n_residual_blocks, &mut rng)?;
    let mut target = critic.clone();
    let mut opt_actor = Adam::new(actor.params.len(), AdamConfig::with_lr(cfg.lr_policy));
    let mut opt_q1 = Adam::new(critic.q1.len(), AdamConfig::with_lr(cfg.lr_q));
    let mut opt_q2 = Adam::new(critic.q2.len(), AdamConfig::with_lr(cfg.lr_q));
    let mut buffer = ReplayBuffer::new(od, ad, cfg.replay_capacity);
    let mut result_curve = Vec::new();
    let mut critic_losses = Vec::new();
    let mut episodes = 0usize;
    let horizon = env.horizon().max(1);

    let mut full = env.reset(rng.random());
    let mut obs = mask.apply(&full)?;
    let mut t_ep = 0usize;
    for step in 1..=cfg.total_steps {
        let action = if step <= cfg.warmup_steps {
            bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect::<Vec<f64>>()
        } else {
            let eps = standard_normal(&mut rng, ad);
            actor.sample_with(&actor.params.data, &obs, &eps, 1)?.action
        };
        let out = env.step(&action);
        let next_obs = mask.apply(&out.obs)?;
        let r = match &shaping {
            Some(s) => shaped_reward(out.reward, &obs, &next_obs, out.done, s.cfg, s.potential)?,
            None => out.reward,
        };
        buffer.push(&obs, &action, r, out.reward, &next_obs, out.done);
        t_ep += 1;
        if out.done || t_ep >= horizon {
            episodes += 1;
            t_ep = 0;
            full = env.reset(rng.random());
            obs = mask.apply(&full)?;
        } else {
            obs = next_obs;
        }

        if step > cfg.warmup_steps {
            for _ in 0..cfg.gradient_steps {
                let batch = buffer.sample(cfg.batch_size, &mut rng)?;
                let n = batch.n;
                let eps = standard_normal(&mut rng, n * ad);
                let y = critic_targets(&actor, &target, &batch, &eps, cfg.alpha, cfg.gamma)?;
                let sa = join_rows(&batch.obs, od, &batch.act, ad, n);
                let (l1, g1) = CriticLoss { mlp: &critic.mlp, inputs: &sa, targets: &y }.loss_and_grad(&critic.q1.data);
                let (l2, g2) = CriticLoss { mlp: &critic.mlp, inputs: &sa, targets: &y }.loss_and_grad(&critic.q2.data);
                if !(l1.is_finite() && l2.is_finite()) {
                    return Err(Error::Diverged(format!("critic loss ({l1}, {l2}) at step {step}")));
                }
                opt_q1.step(&mut critic.q1.data, &g1);
                opt_q2.step(&mut critic.q2.data, &g2);
                critic_losses.push(l1 + l2);
            }
            if step % cfg.policy_train_freq == 0 {
                let batch = buffer.sample(cfg.batch_size, &mut rng)?;
                let eps = standard_normal(&mut rng, batch.n * ad);
                let (la, ga) = ActorLoss { actor: &actor, critic: &critic, obs: &batch.obs, eps: &eps, n: batch.n, alpha: cfg.alpha }
                    .loss_and_grad(&actor.params.data);
                if !la.is_finite() {
                    return Err(Error::Diverged(format!("actor loss {la} at step {step}")));
                }
                opt_actor.step(&mut actor.params.data, &ga);
            }
            if step % cfg.target_update_interval == 0 {
                soft_update(&mut target.q1, &critic.q1, cfg.tau)?;
                soft_update(&mut target.q2, &critic.q2, cfg.tau)?;
            }
        }

        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            let returns = evaluate(&mut actor, &mut eval_env, mask, cfg.eval_episodes, eval_seed(cfg.seed))?;
            let (m, s) = mean_std(&returns);
            if result_curve.last().is_none_or(|p: &CurvePoint| p.step != step) {
                result_curve.push(CurvePoint { step, eval_mean: m, eval_std: s, episodes });
            }
        }
    }
    Ok(SacResult { curve: result_curve, actor, critic, critic_losses, episodes })
}

/// Per-episode undiscounted returns of `policy` on raw environment rewards.
/// Episode `k` is reset with the `k`-th seed drawn from `seed`.
pub fn evaluate<P: Policy + ?Sized, E: ContinuousEnv + ?Sized>(
    policy: &mut P,
    env: &mut E,
    mask: &MaskSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeded(seed);
    let horizon = env.horizon().max(1);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut obs = env.reset(rng.random());
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = policy.act(&mask.apply(&obs)?);
            let out = env.step(&a);
            total += out.reward;
            obs = out.obs;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Returns of a scripted point-mass controller, which observes the wind.
pub fn evaluate_scripted(env: &PointMass, skill: Skill, n_episodes: usize, seed: u64) -> Vec<f64> {
    let mut env = env.clone();
    let mut rng = seeded(seed);
    let mut act_rng = seeded(seed ^ EVAL_SALT);
    let ctrl = scripted_behavior(skill);
    let horizon = env.horizon();
    (0..n_episodes)
        .map(|_| {
            env.reset(rng.random());
            (0..horizon).map(|_| env.step(&ctrl.act(&env, &mut act_rng)).reward).sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    /// Linear decay from `start` to `end` over `decay_steps`.
    pub fn value(&self, t: usize) -> f64 {
        if self.decay_steps == 0 || t >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * t as f64 / self.decay_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub steps: usize,
    pub lr: f64,
    pub epsilon: EpsilonSchedule,
    /// Episode length before a reset to the initial distribution.
    pub horizon: usize,
    /// Greedy-policy snapshot period.
    pub record_interval: usize,
    pub seed: u64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 0.1,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 10_000 },
            horizon: 50,
            record_interval: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLearningResult {
    pub q: Vec<Vec<f64>>,
    /// `(step, greedy policy)` snapshots, starting at step 0.
    pub greedy_history: Vec<(usize, Vec<usize>)>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_from_q(q: &[Vec<f64>]) -> Vec<usize> {
    q.iter().map(|row| argmax(row)).collect()
}

/// Epsilon-greedy Q-learning under `do(x)` stepping. A tabular potential sees
/// the state as the one-element vector `[s]`.
pub fn q_learning_tabular(cmdp: &TabularCMDP, shaping: Option<Shaping<'_>>, cfg: &QLearningConfig) -> Result<QLearningResult> {
    cmdp.validate()?;
    if cfg.record_interval == 0 || cfg.horizon == 0 || !(cfg.lr > 0.0 && cfg.lr <= 1.0) {
        return arg("q-learning needs positive record_interval and horizon and lr in (0,1]");
    }
    if let Some(s) = &shaping {
        s.cfg.validate()?;
    }
    let mut rng = seeded(cfg.seed);
    let mut q = vec![vec![0.0; cmdp.n_actions]; cmdp.n_states];
    let mut history = vec![(0, greedy_from_q(&q))];
    let mut s = cmdp.sample_initial_state(&mut rng);
    let mut t_ep = 0;
    for step in 1..=cfg.steps {
        let x = if rng.random::<f64>() < cfg.epsilon.value(step - 1) {
            rng.random_range(0..cmdp.n_actions)
        } else {
            argmax(&q[s])
        };
        let (y, s2) = cmdp.interventional_step(s, x, &mut rng)?;
        let r = match &shaping {
            Some(sh) => shaped_reward(y, &[s as f64], &[s2 as f64], false, sh.cfg, sh.potential)?,
            None => y,
        };
        let best_next = q[s2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        q[s][x] += cfg.lr * (r + cmdp.gamma * best_next - q[s][x]);
        t_ep += 1;
        if t_ep >= cfg.horizon {
            t_ep = 0;
            s = cmdp.sample_initial_state(&mut rng);
        } else {
            s = s2;
        }
        if step % cfg.record_interval == 0 {
            history.push((step, greedy_from_q(&q)));
        }
    }
    Ok(QLearningResult { q, greedy_history: history })
}

/// First snapshot step from which every later greedy policy picks an
/// optimal action in every state.
pub fn steps_to_optimal(history: &[(usize, Vec<usize>)], optimal: &[Vec<usize>]) -> Option<usize> {
    let ok = |p: &[usize]| p.iter().zip(optimal).all(|(x, set)| set.contains(x));
    let mut first = None;
    for (step, p) in history {
        if ok(p) {
            first.get_or_insert(*step);
        } else {
            first = None;
        }
    }
    first
}
