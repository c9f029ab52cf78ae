//! Neural causal upper-bound potential.
//!
//! Two Gaussian models are fitted to offline data: the behavioral policy
//! `x | s` and the state difference `s' - s | s, x`. A value network is then
//! regressed onto the causal backup
//!
//! ```text
//! w (y + g V(s')) + w' (b + g V(s + d))
//! ```
//!
//! where `x'` is the best of K sampled alternative actions, `d` is a state
//! difference sampled for `x'`, and `(w, w')` are the behavioral densities of
//! `x` and `x'`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{seeded, SeededRng};
use crate::data::{normalize_rewards, TrajectoryDataset};
use crate::error::{arg, Error, Result};
use crate::nn::gaussian::{standard_normal, GaussianRegressor, LN_2PI};
use crate::nn::gradcheck::Objective;
use crate::nn::mlp::{Mlp, MlpSpec};
use crate::nn::params::{load_checkpoint, save_checkpoint, soft_update, ParamStore};
use crate::nn::{Adam, AdamConfig, SquaredError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `(p, p') / (p + p')`
    #[default]
    Normalized,
    /// Raw densities clipped to `[0, 1]`.
    RawDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialTrainConfig {
    pub env_model_epochs: usize,
    pub value_epochs: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_statediff: f64,
    pub lr_value: f64,
    pub gamma: f64,
    pub tau: f64,
    /// The policy model is updated on every n-th environment-model batch.
    pub policy_train_freq: usize,
    pub n_candidates: usize,
    /// Candidates within this infinity-norm distance of the observed action
    /// count as the observed action.
    pub duplicate_threshold: f64,
    pub weight_mode: WeightMode,
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    /// Declared reward bound in original units; the dataset maximum is used
    /// when absent.
    pub reward_bound: Option<f64>,
    pub normalize_rewards: bool,
    /// Clip backup targets at the ceiling as well as evaluations.
    pub clip_targets: bool,
    pub seed: u64,
}

impl Default for PotentialTrainConfig {
    fn default() -> Self {
        Self {
            env_model_epochs: 50,
            value_epochs: 200,
            batch_size: 1028,
            lr_policy: 1e-4,
            lr_statediff: 1e-5,
            lr_value: 1e-4,
            gamma: 0.99,
            tau: 0.005,
            policy_train_freq: 3,
            n_candidates: 8,
            duplicate_threshold: 1e-3,
            weight_mode: WeightMode::Normalized,
            hidden_dim: 128,
            n_residual_blocks: 3,
            reward_bound: None,
            normalize_rewards: true,
            clip_targets: true,
            seed: 0,
        }
    }
}

impl PotentialTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.env_model_epochs == 0 || self.value_epochs == 0 || self.batch_size == 0 {
            return arg("epochs and batch_size must be positive");
        }
        if self.n_candidates == 0 || self.policy_train_freq == 0 || self.hidden_dim == 0 {
            return arg("n_candidates, policy_train_freq and hidden_dim must be positive");
        }
        for (name, v) in [("lr_policy", self.lr_policy), ("lr_statediff", self.lr_statediff), ("lr_value", self.lr_value)] {
            if !(v > 0.0 && v.is_finite()) {
                return arg(format!("{name} must be positive"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg("gamma must lie in (0,1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return arg("tau must lie in (0,1]");
        }
        if !(self.duplicate_threshold >= 0.0) {
            return arg("duplicate_threshold must be nonnegative");
        }
        Ok(())
    }
}

/// Flattened columns of a dataset.
#[derive(Debug, Clone)]
pub struct Columns {
    pub n: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<bool>,
}

impl Columns {
    pub fn from_dataset(ds: &TrajectoryDataset) -> Result<Self> {
        let first = ds.transitions.first().ok_or(Error::EmptyDataset)?;
        let (obs_dim, act_dim) = (first.obs.len(), first.action.len());
        if obs_dim == 0 || act_dim == 0 {
            return arg("observations and actions must be nonempty");
        }
        let n = ds.len();
        let mut c = Columns {
            n,
            obs_dim,
            act_dim,
            obs: Vec::with_capacity(n * obs_dim),
            act: Vec::with_capacity(n * act_dim),
            reward: Vec::with_capacity(n),
            next_obs: Vec::with_capacity(n * obs_dim),
            done: Vec::with_capacity(n),
        };
        for t in &ds.transitions {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim || t.action.len() != act_dim {
                return arg("ragged transitions");
            }
            c.obs.extend(&t.obs);
            c.act.extend(&t.action);
            c.reward.push(t.reward);
            c.next_obs.extend(&t.next_obs);
            c.done.push(t.done);
        }
        Ok(c)
    }

    pub fn select(&self, idx: &[usize]) -> Columns {
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut c = Columns {
            n: idx.len(),
            obs_dim: od,
            act_dim: ad,
            obs: Vec::with_capacity(idx.len() * od),
            act: Vec::with_capacity(idx.len() * ad),
            reward: Vec::with_capacity(idx.len()),
            next_obs: Vec::with_capacity(idx.len() * od),
            done: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            c.obs.extend(&self.obs[i * od..(i + 1) * od]);
            c.act.extend(&self.act[i * ad..(i + 1) * ad]);
            c.reward.push(self.reward[i]);
            c.next_obs.extend(&self.next_obs[i * od..(i + 1) * od]);
            c.done.push(self.done[i]);
        }
        c
    }

    /// Rows of `[s, x]`.
    pub fn obs_act(&self) -> Vec<f64> {
        concat_rows(&self.obs, self.obs_dim, &self.act, self.act_dim)
    }

    /// Rows of `s' - s`.
    pub fn state_diff(&self) -> Vec<f64> {
        self.next_obs.iter().zip(&self.obs).map(|(a, b)| a - b).collect()
    }
}

fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize) -> Vec<f64> {
    let n = a.len() / da;
    let mut out = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        out.extend(&a[i * da..(i + 1) * da]);
        out.extend(&b[i * db..(i + 1) * db]);
    }
    out
}

/// Sum of per-dimension Gaussian log-densities with `log_std` parameters.
pub fn log_density(mu: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, l), v)| {
            let z = (v - m) * (-l).exp();
            -0.5 * LN_2PI - l - 0.5 * z * z
        })
        .sum()
}

/// Negative mean log-likelihood of a Gaussian regressor on a frozen batch.
pub struct LogLikLoss<'a> {
    pub model: &'a GaussianRegressor,
    pub inputs: &'a [f64],
    pub outputs: &'a [f64],
    pub n: usize,
}

impl Objective for LogLikLoss<'_> {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (ll, g) = self
            .model
            .mean_log_lik_grad(params, self.inputs, self.outputs, self.n)
            .expect("batch shapes are fixed at construction");
        (-ll, g.into_iter().map(|v| -v).collect())
    }
}

/// Fitted behavioral policy and state-difference models.
#[derive(Debug, Clone)]
pub struct EnvModels {
    pub policy: GaussianRegressor,
    pub statediff: GaussianRegressor,
    /// Mean batch log-likelihood per epoch.
    pub policy_history: Vec<f64>,
    pub statediff_history: Vec<f64>,
}

impl EnvModels {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            policy: GaussianRegressor::new(obs_dim, act_dim, hidden, blocks, rng)?,
            statediff: GaussianRegressor::new(obs_dim + act_dim, obs_dim, hidden, blocks, rng)?,
            policy_history: Vec::new(),
            statediff_history: Vec::new(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        save_checkpoint(&suffixed(prefix, "policy.bin"), &self.policy.params, self.policy.mlp.spec.arch_hash())?;
        save_checkpoint(&suffixed(prefix, "statediff.bin"), &self.statediff.params, self.statediff.mlp.spec.arch_hash())
    }

    pub fn load_into(&mut self, prefix: &Path) -> Result<()> {
        load_checkpoint(&suffixed(prefix, "policy.bin"), &mut self.policy.params, self.policy.mlp.spec.arch_hash())?;
        load_checkpoint(&suffixed(prefix, "statediff.bin"), &mut self.statediff.params, self.statediff.mlp.spec.arch_hash())
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn check_finite(v: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} log-likelihood is {v} at epoch {epoch}, batch {batch}")))
    }
}

/// Fits both environment models by maximum likelihood on shuffled batches.
pub fn train_env_models(ds: &TrajectoryDataset, cfg: &PotentialTrainConfig) -> Result<EnvModels> {
    cfg.validate()?;
    let cols = Columns::from_dataset(ds)?;
    let mut rng = seeded(cfg.seed);
    let mut models = EnvModels::new(cols.obs_dim, cols.act_dim, cfg.hidden_dim, cfg.n_residual_blocks, &mut rng)?;
    let sx = cols.obs_act();
    let diff = cols.state_diff();
    let (od, ad) = (cols.obs_dim, cols.act_dim);
    let mut opt_pi = Adam::new(models.policy.params.len(), AdamConfig::with_lr(cfg.lr_policy));
    let mut opt_sd = Adam::new(models.statediff.params.len(), AdamConfig::with_lr(cfg.lr_statediff));
    let mut order: Vec<usize> = (0..cols.n).collect();
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.env_model_epochs {
        order.shuffle(&mut rng);
        let (mut pi_sum, mut pi_count, mut sd_sum, mut sd_count) = (0.0, 0usize, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let m = idx.len();
            let gather = |src: &[f64], d: usize| -> Vec<f64> {
                let mut out = Vec::with_capacity(m * d);
                for &i in idx {
                    out.extend(&src[i * d..(i + 1) * d]);
                }
                out
            };
            let bs = gather(&cols.obs, od);
            let bx = gather(&cols.act, ad);
            let bsx = gather(&sx, od + ad);
            let bd = gather(&diff, od);

            let (ll, g) = models.statediff.mean_log_lik_grad(&models.statediff.params.data, &bsx, &bd, m)
                .map_err(|_| Error::Diverged(format!("state-difference model at epoch {epoch}, batch {b}")))?;
            check_finite(ll, "state-difference", epoch, b)?;
            opt_sd.ascend(&mut models.statediff.params.data, &g);
            sd_sum += ll;
            sd_count += 1;

            if batch_counter.is_multiple_of(cfg.policy_train_freq) {
                let (ll, g) = models.policy.mean_log_lik_grad(&models.policy.params.data, &bs, &bx, m)
                    .map_err(|_| Error::Diverged(format!("policy model at epoch {epoch}, batch {b}")))?;
                check_finite(ll, "policy", epoch, b)?;
                opt_pi.ascend(&mut models.policy.params.data, &g);
                pi_sum += ll;
                pi_count += 1;
            }
            batch_counter += 1;
        }
        if pi_count > 0 {
            models.policy_history.push(pi_sum / pi_count as f64);
        }
        models.statediff_history.push(sd_sum / sd_count as f64);
    }
    Ok(models)
}

/// The selected alternative action and its sampled state difference.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNotTaken {
    pub action: Vec<f64>,
    pub delta: Vec<f64>,
    /// All first-round candidates were duplicates of the observed action.
    pub resampled: bool,
    /// No candidate survived either round; the farthest one was used.
    pub fallback: bool,
}

/// Batched road-not-taken selection for `n` rows.
///
/// Random draws happen in this order: first-round candidate noise for every
/// row (row-major, K candidates each), second-round noise at doubled scale for
/// rows without survivors, scoring noise for every candidate of every row,
/// and finally the fresh state-difference noise for each row's winner.
/// `value` maps `m` flattened states to `m` values.
#[allow(clippy::too_many_arguments)]
pub fn roads_not_taken<F, R>(
    models: &EnvModels,
    value: F,
    states: &[f64],
    actions: &[f64],
    n: usize,
    k: usize,
    dup: f64,
    rng: &mut R,
) -> Result<Vec<RoadNotTaken>>
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if k == 0 {
        return arg("road_not_taken needs at least one candidate");
    }
    let (od, ad) = (models.obs_dim(), models.act_dim());
    if states.len() != n * od || actions.len() != n * ad {
        return arg("road_not_taken: batch shape mismatch");
    }
    let (mu, log_std) = models.policy.predict_rows(states, n)?;
    let draw = |rng: &mut R, i: usize, scale: f64| -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                let eps = standard_normal(rng, ad);
                (0..ad).map(|j| mu[i * ad + j] + scale * log_std[i * ad + j].exp() * eps[j]).collect()
            })
            .collect()
    };
    let dist = |c: &[f64], i: usize| -> f64 {
        c.iter().zip(&actions[i * ad..(i + 1) * ad]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let mut candidates: Vec<Vec<Vec<f64>>> = (0..n).map(|i| draw(rng, i, 1.0)).collect();
    let mut resampled = vec![false; n];
    let mut fallback = vec![false; n];
    let mut survivors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let surv: Vec<usize> = (0..k).filter(|&c| dist(&candidates[i][c], i) >= dup).collect();
        survivors.push(surv);
    }
    for i in 0..n {
        if survivors[i].is_empty() {
            resampled[i] = true;
            candidates[i] = draw(rng, i, 2.0);
            survivors[i] = (0..k).filter(|&c| dist(&candidates[i][c], i) >= dup).collect();
            if survivors[i].is_empty() {
                fallback[i] = true;
                let far = (0..k)
                    .map(|c| (c, dist(&candidates[i][c], i)))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
                survivors[i] = vec![far.0];
            }
        }
    }

    // Score every candidate of every row in one batch.
    let mut sx = Vec::with_capacity(n * k * (od + ad));
    for i in 0..n {
        for c in &candidates[i] {
            sx.extend(&states[i * od..(i + 1) * od]);
            sx.extend(c);
        }
    }
    let (dmu, dls) = models.statediff.predict_rows(&sx, n * k)?;
    let mut probe = Vec::with_capacity(n * k * od);
    for r in 0..n * k {
        let eps = standard_normal(rng, od);
        let i = r / k;
        for j in 0..od {
            probe.push(states[i * od + j] + dmu[r * od + j] + dls[r * od + j].exp() * eps[j]);
        }
    }
    let scores = value(&probe, n * k)?;
    let winners: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = survivors[i][0];
            for &c in &survivors[i][1..] {
                if scores[i * k + c] > scores[i * k + best] {
                    best = c;
                }
            }
            best
        })
        .collect();

    let mut sx_win = Vec::with_capacity(n * (od + ad));
    for i in 0..n {
        sx_win.extend(&states[i * od..(i + 1) * od]);
        sx_win.extend(&candidates[i][winners[i]]);
    }
    let (wmu, wls) = models.statediff.predict_rows(&sx_win, n)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let eps = standard_normal(rng, od);
        let delta = (0..od).map(|j| wmu[i * od + j] + wls[i * od + j].exp() * eps[j]).collect();
        out.push(RoadNotTaken {
            action: candidates[i][winners[i]].clone(),
            delta,
            resampled: resampled[i],
            fallback: fallback[i],
        });
    }
    Ok(out)
}

/// Single-state road-not-taken selection.
#[allow(clippy::too_many_arguments)]
pub fn road_not_taken<F, R>(
    models: &EnvModels,
    value: F,
    s: &[f64],
    x_obs: &[f64],
    k: usize,
    dup: f64,
    rng: &mut R,
) -> Result<RoadNotTaken>
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    Ok(roads_not_taken(models, value, s, x_obs, 1, k, dup, rng)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackupParams {
    pub b_hat: f64,
    pub gamma: f64,
    pub weight_mode: WeightMode,
    /// Upper clip applied to targets; `f64::INFINITY` disables it.
    pub ceiling: f64,
    pub n_candidates: usize,
    pub duplicate_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackupStats {
    pub dropped: usize,
    pub resampled: usize,
    pub fallbacks: usize,
}

impl BackupStats {
    pub fn add(&mut self, other: BackupStats) {
        self.dropped += other.dropped;
        self.resampled += other.resampled;
        self.fallbacks += other.fallbacks;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackupBatch {
    /// `None` for dropped examples.
    pub targets: Vec<Option<f64>>,
    /// `(w, w')` per example; meaningless for dropped examples.
    pub weights: Vec<(f64, f64)>,
    pub roads: Vec<RoadNotTaken>,
    pub stats: BackupStats,
}

/// Propensity weights for the observed and alternative actions from their
/// log-densities.
pub fn propensity_weights(lp: f64, lp_alt: f64, mode: WeightMode) -> (f64, f64) {
    match mode {
        WeightMode::Normalized => {
            let w = 1.0 / (1.0 + (lp_alt - lp).exp());
            (w, 1.0 - w)
        }
        WeightMode::RawDensity => (lp.exp().min(1.0), lp_alt.exp().min(1.0)),
    }
}

/// Causal backup targets for a batch. When no alternative action survives
/// the duplicate filter the behavioral policy is treated as deterministic at
/// `s` and the compensation weight is zero.
pub fn causal_backup_estimate<F, R>(
    models: &EnvModels,
    value_target: F,
    batch: &Columns,
    params: &BackupParams,
    rng: &mut R,
) -> Result<BackupBatch>
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let n = batch.n;
    let (od, ad) = (batch.obs_dim, batch.act_dim);
    let roads = roads_not_taken(
        models,
        &value_target,
        &batch.obs,
        &batch.act,
        n,
        params.n_candidates,
        params.duplicate_threshold,
        rng,
    )?;
    let (mu, ls) = models.policy.predict_rows(&batch.obs, n)?;
    let mut comp_states = Vec::with_capacity(n * od);
    for (i, r) in roads.iter().enumerate() {
        for j in 0..od {
            comp_states.push(batch.obs[i * od + j] + r.delta[j]);
        }
    }
    let v_next = value_target(&batch.next_obs, n)?;
    let v_comp = value_target(&comp_states, n)?;
    let mut out = BackupBatch {
        targets: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        roads: Vec::new(),
        stats: BackupStats::default(),
    };
    for i in 0..n {
        let m = &mu[i * ad..(i + 1) * ad];
        let l = &ls[i * ad..(i + 1) * ad];
        let lp = log_density(m, l, &batch.act[i * ad..(i + 1) * ad]);
        let lp_alt = log_density(m, l, &roads[i].action);
        out.stats.resampled += usize::from(roads[i].resampled);
        out.stats.fallbacks += usize::from(roads[i].fallback);
        if !(lp.is_finite() && lp_alt.is_finite()) {
            out.stats.dropped += 1;
            out.targets.push(None);
            out.weights.push((f64::NAN, f64::NAN));
            continue;
        }
        let (w, w_alt) = if roads[i].fallback {
            (1.0, 0.0)
        } else {
            propensity_weights(lp, lp_alt, params.weight_mode)
        };
        let cont = if batch.done[i] { 0.0 } else { 1.0 };
        let target = w * (batch.reward[i] + params.gamma * cont * v_next[i])
            + w_alt * (params.b_hat + params.gamma * v_comp[i]);
        if !target.is_finite() {
            out.stats.dropped += 1;
            out.targets.push(None);
        } else {
            out.targets.push(Some(target.min(params.ceiling)));
        }
        out.weights.push((w, w_alt));
    }
    out.roads = roads;
    Ok(out)
}

/// Value network, its target copy and the evaluation clip.
#[derive(Debug, Clone)]
pub struct PotentialNet {
    pub mlp: Mlp,
    pub value: ParamStore,
    pub target: ParamStore,
    pub clip_ceiling: f64,
    /// Reward shift applied before training; see [`PotentialNet::eval_original`].
    pub reward_offset: f64,
    pub gamma: f64,
    pub b_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialMeta {
    pub spec: MlpSpec,
    pub clip_ceiling: f64,
    pub reward_offset: f64,
    pub gamma: f64,
    pub b_hat: f64,
}

impl PotentialNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, blocks: usize, clip_ceiling: f64, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec { input_dim: obs_dim, output_dim: 1, hidden_dim: hidden, n_residual_blocks: blocks };
        let (mlp, mut value) = Mlp::new(spec)?;
        mlp.init(&mut value.data, rng);
        let target = value.clone();
        Ok(Self { mlp, value, target, clip_ceiling, reward_offset: 0.0, gamma: 0.99, b_hat: 0.0 })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.spec.input_dim
    }

    /// Unclipped value-network output.
    pub fn raw(&self, s: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward(&self.value.data, s)?[0])
    }

    /// Clipped online values for `n` rows.
    pub fn eval_rows(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.mlp.forward_rows(&self.value.data, states, n)?.into_iter().map(|v| v.min(self.clip_ceiling)).collect())
    }

    /// Clipped target-network values for `n` rows.
    pub fn eval_target_rows(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.mlp.forward_rows(&self.target.data, states, n)?.into_iter().map(|v| v.min(self.clip_ceiling)).collect())
    }

    /// Potential in training (normalized-reward) units.
    pub fn eval(&self, s: &[f64]) -> Result<f64> {
        Ok(self.raw(s)?.min(self.clip_ceiling))
    }

    /// Potential in original reward units: adds back the discounted reward
    /// offset.
    pub fn eval_original(&self, s: &[f64]) -> Result<f64> {
        Ok(self.eval(s)? + self.reward_offset / (1.0 - self.gamma))
    }

    pub fn meta(&self) -> PotentialMeta {
        PotentialMeta {
            spec: self.mlp.spec,
            clip_ceiling: self.clip_ceiling,
            reward_offset: self.reward_offset,
            gamma: self.gamma,
            b_hat: self.b_hat,
        }
    }

    /// Writes the parameter blob to `path` and metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.value, self.mlp.spec.arch_hash())?;
        std::fs::write(suffixed(path, "json"), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: PotentialMeta = serde_json::from_str(&std::fs::read_to_string(suffixed(path, "json"))?)?;
        let (mlp, mut value) = Mlp::new(meta.spec)?;
        load_checkpoint(path, &mut value, meta.spec.arch_hash())?;
        Ok(Self {
            mlp,
            target: value.clone(),
            value,
            clip_ceiling: meta.clip_ceiling,
            reward_offset: meta.reward_offset,
            gamma: meta.gamma,
            b_hat: meta.b_hat,
        })
    }
}

/// `min(value_net(s), clip_ceiling)`
pub fn eval_potential(net: &PotentialNet, s: &[f64]) -> Result<f64> {
    net.eval(s)
}

/// Value regression loss; targets are held fixed.
pub type ValueLoss<'a> = SquaredError<'a>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialReport {
    /// Mean batch loss per value epoch.
    pub loss_history: Vec<f64>,
    pub policy_history: Vec<f64>,
    pub statediff_history: Vec<f64>,
    pub stats: BackupStats,
    pub b_hat: f64,
    pub clip_ceiling: f64,
    pub reward_offset: f64,
    pub weight_mode: WeightMode,
}

pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Regresses the value network onto causal backup targets.
pub fn train_potential(ds: &TrajectoryDataset, models: &EnvModels, cfg: &PotentialTrainConfig) -> Result<(PotentialNet, PotentialReport)> {
    cfg.validate()?;
    let (data, offset) = if cfg.normalize_rewards {
        let (d, _) = normalize_rewards(ds)?;
        let off = d.reward_offset;
        (d, off)
    } else {
        (ds.clone(), ds.reward_offset)
    };
    let cols = Columns::from_dataset(&data)?;
    if cols.obs_dim != models.obs_dim() || cols.act_dim != models.act_dim() {
        return arg("environment models do not match dataset dimensions");
    }
    let b_hat = match cfg.reward_bound {
        Some(b) => b - offset,
        None => data.reward_stats.max,
    };
    let ceiling = b_hat / (1.0 - cfg.gamma);
    let mut rng: SeededRng = seeded(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut net = PotentialNet::new(cols.obs_dim, cfg.hidden_dim, cfg.n_residual_blocks, ceiling, &mut rng)?;
    net.reward_offset = offset;
    net.gamma = cfg.gamma;
    net.b_hat = b_hat;
    let params = BackupParams {
        b_hat,
        gamma: cfg.gamma,
        weight_mode: cfg.weight_mode,
        ceiling: if cfg.clip_targets { ceiling } else { f64::INFINITY },
        n_candidates: cfg.n_candidates,
        duplicate_threshold: cfg.duplicate_threshold,
    };
    let mut opt = Adam::new(net.value.len(), AdamConfig::with_lr(cfg.lr_value));
    let mut report = PotentialReport {
        loss_history: Vec::with_capacity(cfg.value_epochs),
        policy_history: models.policy_history.clone(),
        statediff_history: models.statediff_history.clone(),
        stats: BackupStats::default(),
        b_hat,
        clip_ceiling: ceiling,
        reward_offset: offset,
        weight_mode: cfg.weight_mode,
    };
    let mut order: Vec<usize> = (0..cols.n).collect();
    for epoch in 0..cfg.value_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = cols.select(idx);
            let bk = causal_backup_estimate(models, |s, m| net.eval_target_rows(s, m), &batch, &params, &mut rng)?;
            report.stats.add(bk.stats);
            let mut states = Vec::with_capacity(batch.n * cols.obs_dim);
            let mut targets = Vec::with_capacity(batch.n);
            for (i, t) in bk.targets.iter().enumerate() {
                if let Some(t) = t {
                    states.extend(&batch.obs[i * cols.obs_dim..(i + 1) * cols.obs_dim]);
                    targets.push(*t);
                }
            }
            if targets.is_empty() {
                continue;
            }
            let (loss, grad) = ValueLoss { mlp: &net.mlp, inputs: &states, targets: &targets }.loss_and_grad(&net.value.data);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                report.loss_history.push(loss);
                return Err(Error::Diverged(format!(
                    "value loss {loss} at epoch {epoch}; history {:?}",
                    report.loss_history
                )));
            }
            opt.step(&mut net.value.data, &grad);
            soft_update(&mut net.target, &net.value, cfg.tau)?;
            sum += loss;
            count += 1;
        }
        report.loss_history.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    Ok((net, report))
}

/// Environment models followed by the value network.
pub fn fit_potential(ds: &TrajectoryDataset, cfg: &PotentialTrainConfig) -> Result<(PotentialNet, EnvModels, PotentialReport)> {
    let models = train_env_models(ds, cfg)?;
    let (net, report) = train_potential(ds, &models, cfg)?;
    Ok((net, models, report))
}
