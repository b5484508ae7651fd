use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use leap::harness::{run_command, AblationKind, Command, ExperimentConfig, RunLayout};
use leap::planner::{Norm, PlanOptimizer};

#[derive(Parser)]
#[command(name = "leap", version, about = "Latent embeddings for abstracted planning on a 2D navigation task")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "nav2d")]
    preset: String,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for data, checkpoints, metrics and manifests.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Args)]
struct PlannerFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L1,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Cem,
    Adam,
    Sgd,
    Rmsprop,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Norm,
    Optimizer,
    Lambda,
    RawSpace,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample valid states for VAE training and held-out evaluation.
    CollectData(Common),
    /// Train candidate VAEs per seed and keep the best on held-out loss.
    TrainVae(Common),
    /// Train the goal- and horizon-conditioned value function and policy.
    TrainTdm(Common),
    /// Evaluate the planner against the K = 0 baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Run one ablation over frozen checkpoints.
    Ablate {
        #[arg(value_enum)]
        kind: AblationArg,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Plan and execute one hard episode per seed and dump the full record.
    PlanDemo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
    },
}

fn resolve(common: &Common, planner: Option<&PlannerFlags>) -> leap::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&common.preset)?,
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = planner {
        if let Some(k) = p.k {
            cfg.planner.k = k;
        }
        if let Some(l) = p.lambda {
            cfg.planner.lambda = l;
        }
        if let Some(n) = p.norm {
            cfg.planner.norm = match n {
                NormArg::Linf => Norm::LInf,
                NormArg::L1 => Norm::L1,
            };
        }
        if let Some(o) = p.optimizer {
            cfg.planner.optimizer = match o {
                OptimizerArg::Cem => PlanOptimizer::Cem,
                OptimizerArg::Adam => PlanOptimizer::Adam,
                OptimizerArg::Sgd => PlanOptimizer::Sgd,
                OptimizerArg::Rmsprop => PlanOptimizer::Rmsprop,
            };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> leap::Result<Vec<PathBuf>> {
    let (common, planner, command) = match &cli.command {
        Cmd::CollectData(c) => (c, None, Command::CollectData),
        Cmd::TrainVae(c) => (c, None, Command::TrainVae),
        Cmd::TrainTdm(c) => (c, None, Command::TrainTdm),
        Cmd::Evaluate { common, planner } => (common, Some(planner), Command::Evaluate),
        Cmd::Ablate { kind, common, planner } => {
            let kind = match kind {
                AblationArg::Norm => AblationKind::Norm,
                AblationArg::Optimizer => AblationKind::Optimizer,
                AblationArg::Lambda => AblationKind::Lambda,
                AblationArg::RawSpace => AblationKind::RawSpace,
            };
            (common, Some(planner), Command::Ablate(kind))
        }
        Cmd::PlanDemo { common, planner } => (common, Some(planner), Command::PlanDemo),
    };
    let cfg = resolve(common, planner)?;
    run_command(&cfg, &RunLayout::new(&common.out), command)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
