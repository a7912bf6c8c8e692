//! `latentforge` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentforge::error::ErrorClass;
use latentforge::pipeline::{self, DesignMethod, OracleMode, PipelineConfig, Stage};
use latentforge::splits::SplitTask;
use latentforge::{Error, FeatureKind, Result};

#[derive(Debug, Parser)]
#[command(name = "latentforge", version, about = "Low-N fitness prediction and design with TopK sparse autoencoders")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON pipeline config; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "latentforge-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted landscape, DMS-style dataset and embedding store.
    Synth,
    /// Train the SAE on the embedding store.
    TrainSae,
    /// Nine-trial probe evaluation for one feature kind, task and N.
    Probe {
        #[arg(long)]
        task: Option<SplitTask>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        feature_kind: Option<FeatureKind>,
    },
    /// Full task × N × feature-kind extrapolation matrix.
    Extrapolate,
    /// Run the configured designers.
    Design {
        /// Restrict to one method.
        #[arg(long)]
        method: Option<DesignMethod>,
    },
    /// Oracle statistics over every design CSV in the output directory.
    Evaluate {
        #[arg(long)]
        mode: Option<OracleMode>,
    },
    /// Weight sparsity, histograms and activation-difference attribution.
    Analyze,
    /// Every stage in order.
    Run,
    /// Print the effective config as JSON.
    Config,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    pipeline::configure_threads()?;
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::TrainSae => Stage::TrainSae,
        Command::Probe { task, n, feature_kind } => {
            cfg.probe.task = task.unwrap_or(cfg.probe.task);
            cfg.probe.n = n.unwrap_or(cfg.probe.n);
            cfg.probe.feature_kind = feature_kind.unwrap_or(cfg.probe.feature_kind);
            Stage::Probe
        }
        Command::Extrapolate => Stage::Extrapolate,
        Command::Design { method } => {
            if let Some(m) = method {
                cfg.design.methods = vec![m];
            }
            Stage::Design
        }
        Command::Evaluate { mode } => {
            cfg.oracle.mode = mode.unwrap_or(cfg.oracle.mode);
            Stage::Evaluate
        }
        Command::Analyze => Stage::Analyze,
        Command::Run => {
            cfg.validate()?;
            for f in pipeline::run_all(&cfg, out)? {
                println!("{}", f.display());
            }
            return Ok(());
        }
        Command::Config => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
    };
    cfg.validate()?;
    for f in pipeline::run_stage(stage, &cfg, out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
