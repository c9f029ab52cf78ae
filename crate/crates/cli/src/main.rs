mod config;
mod pipeline;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::{Ctx, Failure, Stage, Status};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_UNCONVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "causal-shaping", version, about = "Causal upper-bound potentials for reward shaping from confounded offline data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict per-seed stages to this agent seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the environment (`env.json`).
    GenEnv,
    /// Roll out the behavior policy (`dataset.jsonl`, `dataset.csv`).
    Collect,
    /// Tabular value iteration: causal bound, naive and oracle values.
    Solve,
    /// Fit the neural potential (`potential.bin`, `potential_report.json`).
    TrainPotential,
    /// Train unshaped and shaped agents for every seed (`curve.csv`).
    TrainAgent,
    /// Dependence ranking and confounding audit.
    Diagnose,
    /// Aggregate curves into summary CSVs and a plot.
    Report,
    /// Full pipeline; stages with a completion marker are skipped.
    Run,
}

impl Cmd {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Cmd::GenEnv => Stage::GenEnv,
            Cmd::Collect => Stage::Collect,
            Cmd::Solve => Stage::Solve,
            Cmd::TrainPotential => Stage::TrainPotential,
            Cmd::TrainAgent => Stage::TrainAgent,
            Cmd::Diagnose => Stage::Diagnose,
            Cmd::Report => Stage::Report,
            Cmd::Run => return None,
        })
    }
}

fn setup(cli: &Cli) -> Result<Ctx, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(path).map_err(Failure::Config)?;
    cfg.validate().map_err(Failure::Config)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let seeds = match cli.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok(Ctx { cfg, out, seeds, resume: false, status: Status::default() })
}

fn execute(cli: &Cli) -> Result<Status, Failure> {
    let mut ctx = setup(cli)?;
    match cli.cmd.stage() {
        Some(stage) => ctx.run(stage)?,
        None => {
            ctx.resume = true;
            for stage in Stage::pipeline(ctx.cfg.env.is_tabular()) {
                ctx.run(stage)?;
            }
        }
    }
    Ok(ctx.status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(status) if status.unconverged.is_empty() => ExitCode::SUCCESS,
        Ok(status) => {
            for m in &status.unconverged {
                eprintln!("warning: {m}");
            }
            ExitCode::from(EXIT_UNCONVERGED)
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Stage { .. } => EXIT_STAGE,
            })
        }
    }
}
