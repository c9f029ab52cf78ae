use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use causal_shaping::agent::{curve_to_csv, q_learning_tabular, sac_train, CurvePoint, QLearningConfig, SACConfig, Shaping};
use causal_shaping::cmdp::TabularCMDP;
use causal_shaping::data::{self, collect, estimate_tabular, TrajectoryDataset};
use causal_shaping::diagnostics::{confounding_audit, dependence_report, dependence_to_csv};
use causal_shaping::envs::{make_point_mass, PointMassBehavior, TabularBehavior};
use causal_shaping::potential::{fit_potential, PotentialNet};
use causal_shaping::report::{aggregate, aggregate_to_csv, iqm, RunSummary, SeedSummary};
use causal_shaping::shaping::{Potential, TablePotential};
use causal_shaping::solver::{causal_value_iteration, naive_vi, oracle_interventional_vi, policy_return, SolveReport, ValueTable};
use serde::Serialize;

use crate::config::{EnvConfig, ExperimentConfig};
use crate::svg;

pub const BASELINE: &str = "baseline";
pub const SHAPED: &str = "causal-pbrs";
pub const METHODS: [&str; 2] = [BASELINE, SHAPED];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenEnv,
    Collect,
    Solve,
    TrainPotential,
    TrainAgent,
    Diagnose,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenEnv => "gen-env",
            Stage::Collect => "collect",
            Stage::Solve => "solve",
            Stage::TrainPotential => "train-potential",
            Stage::TrainAgent => "train-agent",
            Stage::Diagnose => "diagnose",
            Stage::Report => "report",
        }
    }

    /// Pipeline order for an environment kind.
    pub fn pipeline(tabular: bool) -> Vec<Stage> {
        let learn = if tabular { Stage::Solve } else { Stage::TrainPotential };
        vec![Stage::GenEnv, Stage::Collect, learn, Stage::TrainAgent, Stage::Diagnose, Stage::Report]
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Stage { stage: &'static str, seed: Option<u64>, msg: String },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Stage { stage, seed: Some(s), msg } => write!(f, "stage {stage} failed for seed {s}: {msg}"),
            Failure::Stage { stage, seed: None, msg } => write!(f, "stage {stage} failed: {msg}"),
        }
    }
}

/// What a completed stage run reports back.
#[derive(Debug, Default)]
pub struct Status {
    pub unconverged: Vec<String>,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Skip stages whose completion marker exists.
    pub resume: bool,
    pub status: Status,
}

type StageResult<T> = Result<T, String>;

fn io<T, E: fmt::Display>(r: Result<T, E>) -> StageResult<T> {
    r.map_err(|e| e.to_string())
}

fn write(path: &Path, text: &str) -> StageResult<()> {
    if let Some(dir) = path.parent() {
        io(fs::create_dir_all(dir))?;
    }
    io(fs::write(path, text))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> StageResult<()> {
    write(path, &io(serde_json::to_string_pretty(value))?)
}

impl Ctx {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn marker(&self, stage: Stage, seed: Option<u64>) -> PathBuf {
        let name = match seed {
            Some(s) => format!("{}-seed-{s}.done", stage.name()),
            None => format!("{}.done", stage.name()),
        };
        self.out.join(".stages").join(name)
    }

    fn done(&self, stage: Stage, seed: Option<u64>) -> bool {
        let label = match seed {
            Some(s) => format!("{} seed {s}", stage.name()),
            None => stage.name().to_string(),
        };
        let skip = self.resume && self.marker(stage, seed).exists();
        eprintln!("[{label}] {}", if skip { "complete, skipped" } else { "running" });
        skip
    }

    fn mark(&self, stage: Stage, seed: Option<u64>) -> StageResult<()> {
        write(&self.marker(stage, seed), "")
    }

    fn fail(&self, stage: Stage, seed: Option<u64>) -> impl Fn(String) -> Failure {
        move |msg| Failure::Stage { stage: stage.name(), seed, msg }
    }

    pub fn run(&mut self, stage: Stage) -> Result<(), Failure> {
        if stage == Stage::TrainAgent {
            for seed in self.seeds.clone() {
                if self.done(stage, Some(seed)) {
                    continue;
                }
                self.train_agent(seed).map_err(self.fail(stage, Some(seed)))?;
                self.mark(stage, Some(seed)).map_err(self.fail(stage, Some(seed)))?;
            }
            return Ok(());
        }
        if self.done(stage, None) {
            return Ok(());
        }
        let r = match stage {
            Stage::GenEnv => self.gen_env(),
            Stage::Collect => self.collect(),
            Stage::Solve => self.solve(),
            Stage::TrainPotential => self.train_potential(),
            Stage::Diagnose => self.diagnose(),
            Stage::Report => self.report(),
            Stage::TrainAgent => unreachable!(),
        };
        r.and_then(|_| self.mark(stage, None)).map_err(self.fail(stage, None))
    }

    fn cmdp(&self) -> StageResult<TabularCMDP> {
        let text = io(fs::read_to_string(self.path("env.json")))?;
        io(TabularCMDP::from_json(&text))
    }

    fn require_tabular(&self) -> StageResult<()> {
        if self.cfg.env.is_tabular() {
            Ok(())
        } else {
            Err("this stage needs a tabular environment".into())
        }
    }

    fn gen_env(&mut self) -> StageResult<()> {
        match &self.cfg.env {
            EnvConfig::Tabular(c) => {
                let cmdp = io(causal_shaping::envs::gen_random_tabular(c))?;
                write(&self.path("env.json"), &io(cmdp.to_json())?)
            }
            EnvConfig::PointMass(c) => {
                io(make_point_mass(c.clone()))?;
                write_json(&self.path("env.json"), c)
            }
        }
    }

    fn dataset(&self) -> StageResult<TrajectoryDataset> {
        io(data::load(&self.path("dataset.jsonl")))
    }

    fn collect(&mut self) -> StageResult<()> {
        let mask = self.cfg.mask_spec()?;
        let c = &self.cfg.collection;
        let ds = match &self.cfg.env {
            EnvConfig::Tabular(_) => {
                let cmdp = self.cmdp()?;
                io(collect(&mut TabularBehavior::new(&cmdp, c.horizon, c.expose_noise), &mask, c.steps, c.seed))?
            }
            EnvConfig::PointMass(pc) => {
                let env = io(make_point_mass(pc.clone()))?;
                let parts = c
                    .skills
                    .iter()
                    .enumerate()
                    .map(|(i, &skill)| io(collect(&mut PointMassBehavior::new(env.clone(), skill), &mask, c.steps, c.seed + i as u64)))
                    .collect::<StageResult<Vec<_>>>()?;
                if parts.len() == 1 {
                    parts.into_iter().next().expect("one part")
                } else {
                    io(TrajectoryDataset::concat(&parts))?
                }
            }
        };
        io(data::save(&ds, &self.path("dataset.jsonl")))?;
        io(data::export_csv(&ds, &self.path("dataset.csv")))
    }

    fn solve(&mut self) -> StageResult<()> {
        self.require_tabular()?;
        let cmdp = self.cmdp()?;
        let ds = self.dataset()?;
        let b = &self.cfg.solve;
        let est = io(estimate_tabular(&ds, (&cmdp).into(), b.smoothing_alpha))?.estimates();
        let opts = b.options();
        let (causal, rc) = io(causal_value_iteration(&est, cmdp.reward_bound, cmdp.gamma, b.coverage, opts))?;
        let (naive, rn) = io(naive_vi(&est, cmdp.gamma, b.coverage, opts))?;
        let (oracle, ro) = io(oracle_interventional_vi(&cmdp, opts))?;
        write(&self.path("solve/value_causal.csv"), &causal.to_csv())?;
        write(&self.path("solve/value_naive.csv"), &naive.to_csv())?;
        write(&self.path("solve/value_oracle.csv"), &oracle.to_csv())?;
        #[derive(Serialize)]
        struct Reports<'a> {
            causal: &'a SolveReport,
            naive: &'a SolveReport,
            oracle: &'a SolveReport,
        }
        write_json(&self.path("solve/solve_report.json"), &Reports { causal: &rc, naive: &rn, oracle: &ro })?;
        for (name, r) in [("causal", &rc), ("naive", &rn), ("oracle", &ro)] {
            if !r.converged {
                self.status.unconverged.push(format!("{name} value iteration stopped at residual {:e} after {} iterations", r.final_residual, r.iterations));
            }
        }
        Ok(())
    }

    fn train_potential(&mut self) -> StageResult<()> {
        if self.cfg.env.is_tabular() {
            return Err("tabular environments use the solve stage".into());
        }
        let ds = self.dataset()?;
        let (net, models, report) = io(fit_potential(&ds, &self.cfg.potential))?;
        io(net.save(&self.path("potential.bin")))?;
        io(models.save(&self.path("env_models")))?;
        write_json(&self.path("potential_report.json"), &report)
    }

    fn potential(&self) -> StageResult<Box<dyn Potential + Send>> {
        if let Some(p) = &self.cfg.shaping.potential {
            return Ok(Box::new(io(PotentialNet::load(Path::new(p)))?));
        }
        if self.cfg.env.is_tabular() {
            let text = io(fs::read_to_string(self.path("solve/value_causal.csv")))?;
            Ok(Box::new(TablePotential(parse_value_csv(&text)?)))
        } else {
            Ok(Box::new(io(PotentialNet::load(&self.path("potential.bin")))?))
        }
    }

    fn train_agent(&mut self, seed: u64) -> StageResult<()> {
        let phi = self.potential()?;
        for method in METHODS {
            let shaping = (method == SHAPED).then_some(Shaping { cfg: &self.cfg.shaping, potential: &*phi });
            let dir = self.path(&format!("agent/{method}/seed-{seed}"));
            io(fs::create_dir_all(&dir))?;
            let curve = match &self.cfg.env {
                EnvConfig::Tabular(_) => {
                    let cmdp = self.cmdp()?;
                    let qc = QLearningConfig { seed, ..self.cfg.agent.q_learning.clone() };
                    let res = io(q_learning_tabular(&cmdp, shaping, &qc))?;
                    let q: String = res.q.iter().map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",") + "\n").collect();
                    write(&dir.join("q.csv"), &q)?;
                    res.greedy_history
                        .iter()
                        .map(|(step, p)| {
                            io(policy_return(&cmdp, p)).map(|r| CurvePoint { step: *step, eval_mean: r, eval_std: 0.0, episodes: step / qc.horizon })
                        })
                        .collect::<StageResult<Vec<_>>>()?
                }
                EnvConfig::PointMass(pc) => {
                    let env = io(make_point_mass(pc.clone()))?;
                    let sc = SACConfig { seed, ..self.cfg.agent.sac.clone() };
                    let res = io(sac_train(&env, &self.cfg.mask_spec()?, shaping, &sc))?;
                    io(res.actor.save(&dir.join("policy.bin")))?;
                    res.curve
                }
            };
            write(&dir.join("curve.csv"), &curve_to_csv(&curve))?;
        }
        Ok(())
    }

    fn diagnose(&mut self) -> StageResult<()> {
        let ds = self.dataset()?;
        let d = &self.cfg.diagnostics;
        let dims = d.dims.clone().unwrap_or_else(|| (0..ds.mask.masked_dim()).collect());
        let rows = io(dependence_report(&ds, &dims, &d.ci))?;
        write(&self.path("diagnose/dependence.csv"), &dependence_to_csv(&rows))?;
        let hidden = d.hidden_dim.or_else(|| ds.mask.hidden().next());
        #[derive(Serialize)]
        struct Verdict {
            hidden_dim: Option<usize>,
            audit: Option<causal_shaping::diagnostics::AuditResult>,
        }
        let audit = match hidden {
            Some(h) if ds.trace.is_some() => Some(io(confounding_audit(&ds, h, &d.ci))?),
            _ => None,
        };
        write_json(&self.path("diagnose/audit.json"), &Verdict { hidden_dim: hidden, audit })
    }

    /// Reads every curve on disk; numbers depend on nothing else.
    fn report(&mut self) -> StageResult<()> {
        let env = match &self.cfg.env {
            EnvConfig::Tabular(_) => "tabular",
            EnvConfig::PointMass(_) => "point-mass",
        };
        let window = self.cfg.report.window;
        let mut runs = Vec::new();
        let mut curves = Vec::new();
        let mut seeds_csv = String::from("method,seed,best,final_return,steps_to_best\n");
        for method in METHODS {
            let mut seeds = Vec::new();
            for &seed in &self.seeds {
                let path = self.path(&format!("agent/{method}/seed-{seed}/curve.csv"));
                let curve = parse_curve_csv(&io(fs::read_to_string(&path)).map_err(|e| format!("{}: {e}", path.display()))?)?;
                let s = io(SeedSummary::from_curve(seed, &curve, window))?;
                seeds_csv += &format!("{method},{seed},{:.6},{:.6},{}\n", s.best, s.final_return, s.steps_to_best);
                seeds.push(s);
                curves.push((method, curve));
            }
            runs.push(RunSummary { method: method.into(), env: env.into(), seeds });
        }
        let row = io(aggregate(&runs[1..], &runs[..1]))?;
        write(&self.path("report/seeds.csv"), &seeds_csv)?;
        write(&self.path("report/report.csv"), &aggregate_to_csv(SHAPED, &row))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            runs: &'a [RunSummary],
            iqm_best: Vec<f64>,
            normalized: causal_shaping::report::AggregateRow,
        }
        let iqm_best = runs.iter().map(|r| io(iqm(&r.bests()))).collect::<StageResult<Vec<_>>>()?;
        write_json(&self.path("report/summary.json"), &Summary { runs: &runs, iqm_best, normalized: row })?;
        write(&self.path("report/curves.svg"), &svg::learning_curves(&curves, window))
    }
}

pub fn parse_value_csv(text: &str) -> StageResult<ValueTable> {
    let mut lines = text.lines();
    if lines.next() != Some("state,value") {
        return Err("value table must start with the header state,value".into());
    }
    let mut v = Vec::new();
    for (i, line) in lines.enumerate() {
        let (s, val) = line.split_once(',').ok_or(format!("value table line {}: expected two columns", i + 2))?;
        if s.trim().parse::<usize>() != Ok(i) {
            return Err(format!("value table line {}: states must be listed in order", i + 2));
        }
        v.push(val.trim().parse::<f64>().map_err(|e| format!("value table line {}: {e}", i + 2))?);
    }
    Ok(ValueTable(v))
}

pub fn parse_curve_csv(text: &str) -> StageResult<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(causal_shaping::agent::CURVE_HEADER) {
        return Err("curve file has an unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |e: String| format!("curve line {}: {e}", i + 2);
            if f.len() != 4 {
                return Err(bad("expected four columns".into()));
            }
            Ok(CurvePoint {
                step: f[0].parse().map_err(|e| bad(format!("{e}")))?,
                eval_mean: f[1].parse().map_err(|e| bad(format!("{e}")))?,
                eval_std: f[2].parse().map_err(|e| bad(format!("{e}")))?,
                episodes: f[3].parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_csv_round_trips() {
        let curve = vec![
            CurvePoint { step: 100, eval_mean: -0.1 - 0.2, eval_std: 1.0 / 3.0, episodes: 2 },
            CurvePoint { step: 200, eval_mean: 1e-300, eval_std: 0.0, episodes: 4 },
        ];
        assert_eq!(parse_curve_csv(&curve_to_csv(&curve)).unwrap(), curve);
        assert!(parse_curve_csv("step,eval_mean\n1,2\n").is_err());
        assert!(parse_curve_csv("step,eval_mean,eval_std,episodes\n1,x,0,0\n").is_err());
    }

    #[test]
    fn value_csv_round_trips() {
        let v = ValueTable(vec![0.1, -7.25, 1.0 / 7.0]);
        assert_eq!(parse_value_csv(&v.to_csv()).unwrap(), v);
        assert!(parse_value_csv("state,value\n1,0.5\n").is_err());
        assert!(parse_value_csv("s,v\n0,0.5\n").is_err());
    }
}
