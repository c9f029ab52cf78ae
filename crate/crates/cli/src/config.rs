use std::path::{Path, PathBuf};

use causal_shaping::agent::{QLearningConfig, SACConfig};
use causal_shaping::cmdp::MaskSpec;
use causal_shaping::diagnostics::CITestConfig;
use causal_shaping::envs::{PointMassConfig, RandomCMDPConfig, Skill, DEFAULT_ROLLOUT_HORIZON, POINT_MASS_DIM};
use causal_shaping::potential::PotentialTrainConfig;
use causal_shaping::shaping::ShapingConfig;
use causal_shaping::solver::{Coverage, SolveOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Tabular(RandomCMDPConfig),
    PointMass(PointMassConfig),
}

impl EnvConfig {
    pub fn is_tabular(&self) -> bool {
        matches!(self, EnvConfig::Tabular(_))
    }
}

/// Observation dimensions withheld from learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskBlock {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionConfig {
    /// Transitions per dataset (per skill on the point mass).
    pub steps: usize,
    /// Episode length of tabular rollouts.
    pub horizon: usize,
    /// Keep the confounder as a masked column of tabular observations.
    pub expose_noise: bool,
    pub skills: Vec<Skill>,
    pub seed: u64,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            horizon: DEFAULT_ROLLOUT_HORIZON,
            expose_noise: true,
            skills: vec![Skill::Simple, Skill::Medium, Skill::Expert],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveBlock {
    pub tol: f64,
    pub max_iter: usize,
    pub coverage: Coverage,
    /// Additive smoothing of empirical counts.
    pub smoothing_alpha: f64,
}

impl Default for SolveBlock {
    fn default() -> Self {
        let o = SolveOptions::default();
        Self { tol: o.tol, max_iter: o.max_iter, coverage: Coverage::Exclude, smoothing_alpha: 0.0 }
    }
}

impl SolveBlock {
    pub fn options(&self) -> SolveOptions {
        SolveOptions { tol: self.tol, max_iter: self.max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentBlock {
    pub sac: SACConfig,
    pub q_learning: QLearningConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsBlock {
    pub ci: CITestConfig,
    /// Observation dimensions ranked against returns-to-go; all when absent.
    pub dims: Option<Vec<usize>>,
    /// Unmasked dimension audited as a confounder; the first hidden one when absent.
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportBlock {
    pub window: usize,
}

impl Default for ReportBlock {
    fn default() -> Self {
        Self { window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub mask: Option<MaskBlock>,
    #[serde(default)]
    pub collection: CollectionConfig,
    #[serde(default)]
    pub solve: SolveBlock,
    #[serde(default)]
    pub potential: PotentialTrainConfig,
    #[serde(default)]
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub agent: AgentBlock,
    #[serde(default)]
    pub diagnostics: DiagnosticsBlock,
    #[serde(default)]
    pub report: ReportBlock,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = |r: causal_shaping::Result<()>| r.map_err(|e| e.to_string());
        match &self.env {
            EnvConfig::Tabular(c) => e(c.validate())?,
            EnvConfig::PointMass(c) => e(c.validate())?,
        }
        if self.seeds.is_empty() {
            return Err("seeds must be nonempty".into());
        }
        if self.collection.steps == 0 || self.collection.horizon == 0 {
            return Err("collection steps and horizon must be positive".into());
        }
        if !self.env.is_tabular() && self.collection.skills.is_empty() {
            return Err("point-mass collection needs at least one skill".into());
        }
        if self.report.window == 0 {
            return Err("report window must be positive".into());
        }
        if self.solve.tol.is_nan() || self.solve.tol <= 0.0 || self.solve.max_iter == 0 {
            return Err("solve tol and max_iter must be positive".into());
        }
        self.mask_spec()?;
        e(self.potential.validate())?;
        e(self.shaping.validate())?;
        e(self.agent.sac.validate())?;
        e(self.diagnostics.ci.validate())?;
        if let Some(p) = &self.shaping.potential {
            if !Path::new(p).exists() {
                return Err(format!("shaping potential {p} does not exist"));
            }
        }
        Ok(())
    }

    /// Width of the unmasked observation.
    pub fn full_dim(&self) -> usize {
        match &self.env {
            EnvConfig::Tabular(_) if self.collection.expose_noise => 2,
            EnvConfig::Tabular(_) => 1,
            EnvConfig::PointMass(_) => POINT_MASS_DIM,
        }
    }

    pub fn mask_spec(&self) -> Result<MaskSpec, String> {
        let hidden = match (&self.mask, &self.env) {
            (Some(m), _) => m.hidden.clone(),
            (None, EnvConfig::Tabular(_)) if self.collection.expose_noise => vec![1],
            (None, EnvConfig::Tabular(_)) => vec![],
            (None, EnvConfig::PointMass(_)) => PointMassConfig::velocity_mask().hidden().collect(),
        };
        if self.env.is_tabular() && hidden.contains(&0) {
            return Err("the tabular state column cannot be masked".into());
        }
        MaskSpec::new(self.full_dim(), hidden).map_err(|e| e.to_string())
    }
}
