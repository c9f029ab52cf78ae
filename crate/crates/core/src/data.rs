//! Offline trajectory collection, storage and tabular estimation.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmdp::{seeded, MaskSpec, SeededRng, TabularCMDP, Transition};
use crate::error::{arg, Error, Result};

/// One behavioral step with full (unmasked) observations.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorStep {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// An environment paired with its demonstrator.
pub trait BehaviorSource {
    fn env_id(&self) -> String;
    fn full_dim(&self) -> usize;
    /// Episodes are truncated after this many steps.
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64>;
    fn step(&mut self, rng: &mut SeededRng) -> BehaviorStep;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl RewardStats {
    pub fn from_rewards(rewards: impl IntoIterator<Item = f64>) -> Self {
        let mut stats = RewardStats { min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0, count: 0 };
        let mut sum = 0.0;
        for y in rewards {
            stats.min = stats.min.min(y);
            stats.max = stats.max.max(y);
            sum += y;
            stats.count += 1;
        }
        if stats.count > 0 {
            stats.mean = sum / stats.count as f64;
        }
        stats
    }
}

/// Masked offline transitions plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub transitions: Vec<Transition>,
    pub env_id: String,
    pub mask: MaskSpec,
    pub seed: u64,
    pub reward_stats: RewardStats,
    pub skill_tag: Option<String>,
    /// Privileged unmasked observation per transition, when retained.
    pub trace: Option<Vec<Vec<f64>>>,
    /// Shift subtracted from every reward by [`normalize_rewards`].
    pub reward_offset: f64,
}

impl TrajectoryDataset {
    pub fn new(env_id: impl Into<String>, mask: MaskSpec, seed: u64) -> Self {
        Self {
            transitions: Vec::new(),
            env_id: env_id.into(),
            mask,
            seed,
            reward_stats: RewardStats::from_rewards([]),
            skill_tag: None,
            trace: None,
            reward_offset: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn refresh_stats(&mut self) {
        self.reward_stats = RewardStats::from_rewards(self.transitions.iter().map(|t| t.reward));
    }

    /// Index ranges of consecutive transitions sharing an episode id.
    pub fn episode_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            if i == self.transitions.len()
                || self.transitions[i].episode_id != self.transitions[start].episode_id
            {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }

    /// Checks episode numbering and reward statistics.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&Transition> = None;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.obs.len() != t.next_obs.len() {
                return arg(format!("transition {i}: obs and next_obs lengths differ"));
            }
            match prev {
                None if t.episode_id != 0 || t.step_index != 0 => {
                    return arg("first transition must open episode 0 at step 0");
                }
                Some(p) if t.episode_id == p.episode_id && t.step_index != p.step_index + 1 => {
                    return arg(format!("transition {i}: step index does not increment"));
                }
                Some(p) if t.episode_id != p.episode_id && (t.episode_id != p.episode_id + 1 || t.step_index != 0) => {
                    return arg(format!("transition {i}: episode ids are not contiguous"));
                }
                _ => {}
            }
            prev = Some(t);
        }
        if let Some(trace) = &self.trace {
            if trace.len() != self.transitions.len() {
                return arg("trace length differs from transition count");
            }
        }
        let fresh = RewardStats::from_rewards(self.transitions.iter().map(|t| t.reward));
        let s = &self.reward_stats;
        if fresh.count != s.count
            || (fresh.count > 0 && (fresh.max != s.max || fresh.min != s.min || (fresh.mean - s.mean).abs() > 1e-9))
        {
            return arg("reward_stats out of date");
        }
        Ok(())
    }

    /// Appends datasets, renumbering episodes so ids stay contiguous.
    pub fn concat(parts: &[TrajectoryDataset]) -> Result<TrajectoryDataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut out = TrajectoryDataset::new(first.env_id.clone(), first.mask.clone(), first.seed);
        let tags: Vec<&str> = parts.iter().filter_map(|p| p.skill_tag.as_deref()).collect();
        out.skill_tag = (!tags.is_empty()).then(|| tags.join("+"));
        let keep_trace = parts.iter().all(|p| p.trace.is_some());
        let mut trace = Vec::new();
        let mut next_episode = 0;
        for p in parts {
            if p.mask != first.mask {
                return arg("cannot concatenate datasets with different masks");
            }
            if p.reward_offset != first.reward_offset {
                return arg("cannot concatenate datasets with different reward offsets");
            }
            let base = next_episode;
            for t in &p.transitions {
                let mut t = t.clone();
                t.episode_id += base;
                next_episode = next_episode.max(t.episode_id + 1);
                out.transitions.push(t);
            }
            if keep_trace {
                trace.extend(p.trace.iter().flatten().cloned());
            }
        }
        out.reward_offset = first.reward_offset;
        out.trace = keep_trace.then_some(trace);
        out.refresh_stats();
        Ok(out)
    }
}

/// Rolls the demonstrator for `n_steps` transitions, truncating episodes at
/// the source's horizon. Observations are masked; the unmasked rows are kept
/// in `trace`.
pub fn collect<S: BehaviorSource + ?Sized>(
    source: &mut S,
    mask: &MaskSpec,
    n_steps: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if n_steps == 0 {
        return arg("n_steps must be positive");
    }
    if mask.full_dim() != source.full_dim() {
        return arg(format!(
            "mask expects {} dimensions, environment emits {}",
            mask.full_dim(),
            source.full_dim()
        ));
    }
    let horizon = source.horizon().max(1);
    let mut rng = seeded(seed);
    let mut ds = TrajectoryDataset::new(source.env_id(), mask.clone(), seed);
    let mut trace = Vec::with_capacity(n_steps);
    let mut episode = 0;
    let mut t = 0;
    source.reset(&mut rng);
    for _ in 0..n_steps {
        let step = source.step(&mut rng);
        ds.transitions.push(Transition {
            obs: mask.apply(&step.obs)?,
            action: step.action,
            reward: step.reward,
            next_obs: mask.apply(&step.next_obs)?,
            done: step.done,
            episode_id: episode,
            step_index: t,
        });
        trace.push(step.obs);
        t += 1;
        if step.done || t == horizon {
            episode += 1;
            t = 0;
            source.reset(&mut rng);
        }
    }
    ds.trace = Some(trace);
    ds.refresh_stats();
    Ok(ds)
}

/// Shifts rewards to zero mean. Returns the dataset and the subtracted mean.
pub fn normalize_rewards(ds: &TrajectoryDataset) -> Result<(TrajectoryDataset, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let offset = ds.reward_stats.mean;
    let mut out = ds.clone();
    for t in &mut out.transitions {
        t.reward -= offset;
    }
    out.reward_offset += offset;
    out.refresh_stats();
    Ok((out, offset))
}

/// Undoes [`normalize_rewards`].
pub fn denormalize_rewards(ds: &TrajectoryDataset) -> TrajectoryDataset {
    let mut out = ds.clone();
    for t in &mut out.transitions {
        t.reward += ds.reward_offset;
    }
    out.reward_offset = 0.0;
    out.refresh_stats();
    out
}

pub fn dataset_reward_max(ds: &TrajectoryDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds.reward_stats.max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabularDims {
    pub n_states: usize,
    pub n_actions: usize,
}

impl From<&TabularCMDP> for TabularDims {
    fn from(c: &TabularCMDP) -> Self {
        Self { n_states: c.n_states, n_actions: c.n_actions }
    }
}

/// Weighted visitation counts of a tabular dataset.
///
/// Counts are real-valued so that exact population weights can be stored
/// in the same structure as sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTabularModel {
    pub dims: TabularDims,
    /// Flat `[s][x][s']`.
    pub counts_sxs: Vec<f64>,
    /// Flat `[s][x]`.
    pub counts_sx: Vec<f64>,
    pub counts_s: Vec<f64>,
    /// Flat `[s][x]`.
    pub reward_sums: Vec<f64>,
    pub smoothing_alpha: f64,
}

impl EmpiricalTabularModel {
    pub fn zeros(dims: TabularDims, smoothing_alpha: f64) -> Self {
        let (ns, na) = (dims.n_states, dims.n_actions);
        Self {
            dims,
            counts_sxs: vec![0.0; ns * na * ns],
            counts_sx: vec![0.0; ns * na],
            counts_s: vec![0.0; ns],
            reward_sums: vec![0.0; ns * na],
            smoothing_alpha,
        }
    }

    fn sx(&self, s: usize, x: usize) -> usize {
        s * self.dims.n_actions + x
    }

    pub fn add(&mut self, s: usize, x: usize, y: f64, s_next: usize, weight: f64) {
        let sx = self.sx(s, x);
        self.counts_s[s] += weight;
        self.counts_sx[sx] += weight;
        self.counts_sxs[sx * self.dims.n_states + s_next] += weight;
        self.reward_sums[sx] += weight * y;
    }

    /// Adds the counts of another shard.
    pub fn merge(&mut self, other: &EmpiricalTabularModel) -> Result<()> {
        if self.dims != other.dims {
            return arg("cannot merge models with different dimensions");
        }
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.counts_sxs, &other.counts_sxs);
        add(&mut self.counts_sx, &other.counts_sx);
        add(&mut self.counts_s, &other.counts_s);
        add(&mut self.reward_sums, &other.reward_sums);
        Ok(())
    }

    /// Population conditionals of the behavioral process, computed exactly by
    /// marginalizing the noise. Each state carries unit weight; the
    /// conditionals do not depend on the state marginal because the noise is
    /// drawn independently of the state at every step.
    pub fn exact_population(cmdp: &TabularCMDP) -> Self {
        let mut m = Self::zeros(cmdp.into(), 0.0);
        for s in 0..cmdp.n_states {
            for (u, &p) in cmdp.noise_probs.iter().enumerate() {
                let out = cmdp.behavioral_step_with_noise(s, u);
                m.add(s, out.action, out.reward, out.next_state, p);
            }
        }
        m
    }

    /// Behavioral propensity `P(x | s)`, Laplace-smoothed by alpha.
    pub fn propensity(&self, s: usize, x: usize) -> f64 {
        let na = self.dims.n_actions as f64;
        let denom = self.counts_s[s] + self.smoothing_alpha * na;
        if denom > 0.0 {
            (self.counts_sx[self.sx(s, x)] + self.smoothing_alpha) / denom
        } else {
            1.0 / na
        }
    }

    pub fn is_covered(&self, s: usize, x: usize) -> bool {
        self.counts_sx[self.sx(s, x)] > 0.0
    }

    /// Observational mean reward; zero for unobserved pairs.
    pub fn mean_reward(&self, s: usize, x: usize) -> f64 {
        let sx = self.sx(s, x);
        if self.counts_sx[sx] > 0.0 {
            self.reward_sums[sx] / self.counts_sx[sx]
        } else {
            0.0
        }
    }

    /// Observational next-state distribution; uniform for unobserved pairs.
    pub fn next_state_dist(&self, s: usize, x: usize) -> Vec<f64> {
        let ns = self.dims.n_states;
        let sx = self.sx(s, x);
        let c = self.counts_sx[sx];
        if c > 0.0 {
            self.counts_sxs[sx * ns..(sx + 1) * ns].iter().map(|v| v / c).collect()
        } else {
            vec![1.0 / ns as f64; ns]
        }
    }

    pub fn estimates(&self) -> TabularEstimates {
        let (ns, na) = (self.dims.n_states, self.dims.n_actions);
        let grid = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
            (0..ns).map(|s| (0..na).map(|x| f(s, x)).collect()).collect()
        };
        TabularEstimates {
            propensity: grid(&|s, x| self.propensity(s, x)),
            reward: grid(&|s, x| self.mean_reward(s, x)),
            transition: (0..ns)
                .map(|s| (0..na).map(|x| self.next_state_dist(s, x)).collect())
                .collect(),
            covered: (0..ns).map(|s| (0..na).map(|x| self.is_covered(s, x)).collect()).collect(),
        }
    }
}

/// Dense observational quantities consumed by the tabular solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEstimates {
    /// `P(x | s)`
    pub propensity: Vec<Vec<f64>>,
    /// Observational mean reward `R~(s, x)`.
    pub reward: Vec<Vec<f64>>,
    /// Observational transition `T~(s, x, s')`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Whether `(s, x)` was observed.
    pub covered: Vec<Vec<bool>>,
}

impl TabularEstimates {
    pub fn n_states(&self) -> usize {
        self.reward.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.first().map_or(0, Vec::len)
    }

    /// First uncovered pair, if any.
    pub fn first_uncovered(&self) -> Option<(usize, usize)> {
        self.covered
            .iter()
            .enumerate()
            .find_map(|(s, row)| row.iter().position(|c| !c).map(|x| (s, x)))
    }
}

fn as_index(v: f64, bound: usize, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
        Ok(v as usize)
    } else {
        arg(format!("{what} {v} is not an index below {bound}"))
    }
}

/// Counts a tabular dataset: `obs[0]` is the state, `act[0]` the action.
pub fn estimate_tabular(ds: &TrajectoryDataset, dims: TabularDims, alpha: f64) -> Result<EmpiricalTabularModel> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(alpha >= 0.0) {
        return arg("smoothing alpha must be nonnegative");
    }
    let mut m = EmpiricalTabularModel::zeros(dims, alpha);
    for t in &ds.transitions {
        let s = as_index(t.obs[0], dims.n_states, "state")?;
        let x = as_index(t.action[0], dims.n_actions, "action")?;
        let sn = as_index(t.next_obs[0], dims.n_states, "next state")?;
        m.add(s, x, t.reward, sn, 1.0);
    }
    Ok(m)
}

pub const DATASET_MAGIC: &str = "#causal-shaping-dataset";
const TRAILER: &str = "#end";

#[derive(Serialize, Deserialize)]
struct Line {
    ep: usize,
    t: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    rew: f64,
    next_obs: Vec<f64>,
    done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    full_obs: Option<Vec<f64>>,
}

fn join_usize(items: impl Iterator<Item = usize>) -> String {
    items.map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes the line-oriented dataset format.
pub fn save(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    if ds.env_id.contains(char::is_whitespace) {
        return arg("env id must not contain whitespace");
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut header = format!(
        "{DATASET_MAGIC} v1 env={} mask={} seed={} full_dim={}",
        ds.env_id,
        join_usize(ds.mask.hidden()),
        ds.seed,
        ds.mask.full_dim()
    );
    if let Some(tag) = &ds.skill_tag {
        write!(header, " skill={tag}").ok();
    }
    if ds.reward_offset != 0.0 {
        write!(header, " reward_offset={}", ds.reward_offset).ok();
    }
    writeln!(w, "{header}")?;
    for (i, t) in ds.transitions.iter().enumerate() {
        if !t.reward.is_finite() || t.obs.iter().chain(&t.next_obs).chain(&t.action).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("transition {i}")));
        }
        let line = Line {
            ep: t.episode_id,
            t: t.step_index,
            obs: t.obs.clone(),
            act: t.action.clone(),
            rew: t.reward,
            next_obs: t.next_obs.clone(),
            done: t.done,
            full_obs: ds.trace.as_ref().map(|tr| tr[i].clone()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    writeln!(w, "{TRAILER} count={}", ds.transitions.len())?;
    w.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<TrajectoryDataset> {
    let perr = |msg: String| Error::Parse { line: 1, msg };
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(DATASET_MAGIC) {
        return Err(perr("missing dataset magic".into()));
    }
    if tokens.next() != Some("v1") {
        return Err(perr("unsupported dataset version".into()));
    }
    let (mut env, mut mask, mut seed, mut full_dim, mut skill, mut offset) = (None, None, None, None, None, 0.0);
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| perr(format!("bad header token '{tok}'")))?;
        match k {
            "env" => env = Some(v.to_string()),
            "mask" => {
                let dims: std::result::Result<Vec<usize>, _> =
                    v.split(',').filter(|s| !s.is_empty()).map(str::parse).collect();
                mask = Some(dims.map_err(|e| perr(format!("bad mask: {e}")))?);
            }
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| perr(format!("bad seed: {e}")))?),
            "full_dim" => full_dim = Some(v.parse::<usize>().map_err(|e| perr(format!("bad full_dim: {e}")))?),
            "skill" => skill = Some(v.to_string()),
            "reward_offset" => offset = v.parse::<f64>().map_err(|e| perr(format!("bad reward_offset: {e}")))?,
            _ => return Err(perr(format!("unknown header key '{k}'"))),
        }
    }
    let env = env.ok_or_else(|| perr("header lacks env".into()))?;
    let hidden = mask.ok_or_else(|| perr("header lacks mask".into()))?;
    let seed = seed.ok_or_else(|| perr("header lacks seed".into()))?;
    let full_dim = full_dim.ok_or_else(|| perr("header lacks full_dim".into()))?;
    let mask = MaskSpec::new(full_dim, hidden).map_err(|e| perr(e.to_string()))?;
    let mut ds = TrajectoryDataset::new(env, mask, seed);
    ds.skill_tag = skill;
    ds.reward_offset = offset;
    Ok(ds)
}

/// Reads a dataset written by [`save`]. A missing trailer is reported as a
/// parse error so that truncated files never load partially.
pub fn load(path: &Path) -> Result<TrajectoryDataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
    let mut ds = parse_header(&header)?;
    let mut trace = Vec::new();
    let mut all_traced = true;
    let mut finished = false;
    let mut line_no = 1;
    for line in lines {
        let line = line?;
        line_no += 1;
        if finished {
            return Err(Error::Parse { line: line_no, msg: "content after trailer".into() });
        }
        if let Some(rest) = line.strip_prefix(TRAILER) {
            let count: usize = rest
                .trim()
                .strip_prefix("count=")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Parse { line: line_no, msg: "bad trailer".into() })?;
            if count != ds.transitions.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("trailer count {count} but {} transitions read", ds.transitions.len()),
                });
            }
            finished = true;
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        match rec.full_obs {
            Some(f) => trace.push(f),
            None => all_traced = false,
        }
        ds.transitions.push(Transition {
            obs: rec.obs,
            action: rec.act,
            reward: rec.rew,
            next_obs: rec.next_obs,
            done: rec.done,
            episode_id: rec.ep,
            step_index: rec.t,
        });
    }
    if !finished {
        return Err(Error::Parse { line: line_no + 1, msg: "truncated file: missing trailer".into() });
    }
    if all_traced && !ds.transitions.is_empty() {
        ds.trace = Some(trace);
    }
    ds.refresh_stats();
    ds.validate().map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    Ok(ds)
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// CSV export with columns `ep,t,obs,act,rew,next_obs,done`; vector fields
/// are `;`-separated.
pub fn export_csv(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ep,t,obs,act,rew,next_obs,done")?;
    for t in &ds.transitions {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            t.episode_id,
            t.step_index,
            join_f64(&t.obs),
            join_f64(&t.action),
            t.reward,
            join_f64(&t.next_obs),
            t.done
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(ep: usize, t: usize, s: f64, x: f64, y: f64, sn: f64) -> Transition {
        Transition { obs: vec![s], action: vec![x], reward: y, next_obs: vec![sn], done: false, episode_id: ep, step_index: t }
    }

    fn ds_from(rewards: &[f64]) -> TrajectoryDataset {
        let mut ds = TrajectoryDataset::new("test", MaskSpec::none(1), 0);
        ds.transitions = rewards.iter().enumerate().map(|(i, &y)| tr(0, i, 0.0, 0.0, y, 0.0)).collect();
        ds.refresh_stats();
        ds
    }

    #[test]
    fn single_transition_estimates() {
        let mut ds = TrajectoryDataset::new("t", MaskSpec::none(1), 0);
        ds.transitions.push(tr(0, 0, 0.0, 1.0, 5.0, 2.0));
        ds.refresh_stats();
        let m = estimate_tabular(&ds, TabularDims { n_states: 3, n_actions: 2 }, 0.0).unwrap();
        assert_eq!(m.propensity(0, 1), 1.0);
        assert_eq!(m.mean_reward(0, 1), 5.0);
        assert_eq!(m.next_state_dist(0, 1)[2], 1.0);
        assert!(!m.is_covered(0, 0));
        assert_eq!(m.mean_reward(0, 0), 0.0);
        assert_eq!(m.next_state_dist(0, 0), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn heavy_smoothing_flattens_propensity() {
        let mut ds = TrajectoryDataset::new("t", MaskSpec::none(1), 0);
        ds.transitions.push(tr(0, 0, 0.0, 1.0, 5.0, 2.0));
        ds.refresh_stats();
        let m = estimate_tabular(&ds, TabularDims { n_states: 3, n_actions: 4 }, 1e12).unwrap();
        for x in 0..4 {
            assert!((m.propensity(0, x) - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = TrajectoryDataset::new("t", MaskSpec::none(1), 0);
        assert!(matches!(
            estimate_tabular(&ds, TabularDims { n_states: 1, n_actions: 1 }, 0.0),
            Err(Error::EmptyDataset)
        ));
        assert!(dataset_reward_max(&ds).is_err());
        assert!(normalize_rewards(&ds).is_err());
    }

    #[test]
    fn normalization_examples() {
        let (n, off) = normalize_rewards(&ds_from(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(off, 2.0);
        let r: Vec<f64> = n.transitions.iter().map(|t| t.reward).collect();
        assert_eq!(r, vec![-1.0, 0.0, 1.0]);
        assert_eq!(dataset_reward_max(&n).unwrap(), 1.0);
        let back = denormalize_rewards(&n);
        assert_eq!(back.transitions, ds_from(&[1.0, 2.0, 3.0]).transitions);

        let (z, off) = normalize_rewards(&ds_from(&[-1.0, 0.0, 1.0])).unwrap();
        assert_eq!(off, 0.0);
        assert_eq!(z.transitions, ds_from(&[-1.0, 0.0, 1.0]).transitions);
    }

    #[test]
    fn reward_max() {
        assert_eq!(dataset_reward_max(&ds_from(&[-3.0, -1.0, -2.0])).unwrap(), -1.0);
    }

    #[test]
    fn zero_steps_rejected() {
        struct Null;
        impl BehaviorSource for Null {
            fn env_id(&self) -> String { "null".into() }
            fn full_dim(&self) -> usize { 1 }
            fn horizon(&self) -> usize { 3 }
            fn reset(&mut self, _: &mut SeededRng) -> Vec<f64> { vec![0.0] }
            fn step(&mut self, _: &mut SeededRng) -> BehaviorStep {
                BehaviorStep { obs: vec![0.0], action: vec![0.0], reward: 4.0, next_obs: vec![0.0], done: false }
            }
        }
        assert!(collect(&mut Null, &MaskSpec::none(1), 0, 0).is_err());
        let ds = collect(&mut Null, &MaskSpec::none(1), 10, 0).unwrap();
        assert_eq!(ds.reward_stats.min, 4.0);
        assert_eq!(ds.reward_stats.max, 4.0);
        assert_eq!(ds.reward_stats.mean, 4.0);
        assert_eq!(ds.episode_ranges().len(), 4);
        ds.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = ds_from(&[0.1, 0.2 + 0.1, -7.25]);
        ds.skill_tag = Some("expert".into());
        ds.trace = Some(vec![vec![1.0, 2.0]; 3]);
        ds.mask = MaskSpec::new(2, [1]).unwrap();
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);

        let empty = TrajectoryDataset::new("empty", MaskSpec::new(4, [2, 3]).unwrap(), 5);
        save(&empty, &path).unwrap();
        assert_eq!(load(&path).unwrap(), empty);

        save(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&path, lines[..3].join("\n") + "\n").unwrap();
        assert!(matches!(load(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, &text[..text.len() - 40]).unwrap();
        assert!(matches!(load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "#causal-shaping-dataset v1 env=x mask= seed=1 full_dim=1\n{\"ep\":0}\n#end count=1\n").unwrap();
        match load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_matches_joint_count() {
        let mut ds = TrajectoryDataset::new("t", MaskSpec::none(1), 0);
        for i in 0..20 {
            ds.transitions.push(tr(0, i, (i % 3) as f64, (i % 2) as f64, i as f64, ((i + 1) % 3) as f64));
        }
        ds.refresh_stats();
        let dims = TabularDims { n_states: 3, n_actions: 2 };
        let whole = estimate_tabular(&ds, dims, 0.0).unwrap();
        let mut a = ds.clone();
        a.transitions.truncate(10);
        let mut b = ds.clone();
        b.transitions.drain(..10);
        b.transitions.iter_mut().enumerate().for_each(|(i, t)| t.step_index = i);
        let mut m = estimate_tabular(&a, dims, 0.0).unwrap();
        m.merge(&estimate_tabular(&b, dims, 0.0).unwrap()).unwrap();
        assert_eq!(m, whole);
    }
}
