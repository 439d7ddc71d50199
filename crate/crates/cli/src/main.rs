//! `sipit`: reproducible injectivity and inversion experiments.
//!
//! Exit codes: 0 success, 2 invalid input, 3 a checked property failed,
//! 4 an inversion did not recover every prompt.

mod commands;
mod config;
mod error;
mod formats;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use config::{ExperimentConfig, PolicyChoice};
use error::CliError;
use report::Reporter;

#[derive(Parser, Debug)]
#[command(
    name = "sipit",
    version,
    about = "Transformer injectivity lab and prompt inversion"
)]
struct Cli {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model weights written by `init` or `train`.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    layer: Option<usize>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true, value_enum)]
    policy: Option<PolicyChoice>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialize weights from the seed.
    Init,
    /// Train with gradient descent, scanning for collisions at checkpoints.
    Train,
    /// All-pairs collision scan of last-token states.
    Scan {
        /// One prompt per line; random prompts when absent.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Per-position separation margins over the whole vocabulary.
    Margin {
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Check the non-injectivity witness constructions.
    Witness,
    /// Numerical Hessian at zero against its closed form.
    Hessian,
    /// Write hidden states of each prompt to a state file.
    DumpStates {
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Recover prompts from a state file.
    Invert {
        #[arg(long)]
        states: PathBuf,
        /// Ground-truth prompts, one per state record, for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Reverse-mode gradients against finite differences.
    Gradcheck,
    /// Print the resolved configuration as TOML.
    Config,
}

impl Command {
    fn needs_weights(&self) -> bool {
        matches!(
            self,
            Command::Train
                | Command::Scan { .. }
                | Command::Margin { .. }
                | Command::DumpStates { .. }
                | Command::Invert { .. }
        )
    }
}

fn resolve(cli: &Cli) -> Result<Run, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(layer) = cli.layer {
        cfg.layer = Some(layer);
    }
    if let Some(eps) = cli.epsilon {
        cfg.invert.epsilon = eps;
    }
    if let Some(policy) = cli.policy {
        cfg.invert.policy = policy;
    }
    if std::env::var("SIPIT_CHECKED").is_ok_and(|v| v == "1") {
        cfg.checked = true;
    }
    sipit_core::numerics::set_checked_mode(cfg.checked);
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Input("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let mut run = Run {
        cfg,
        explicit_config: cli.config.is_some(),
        reporter: Reporter::new(dir)?,
        params: None,
    };
    match &cli.weights {
        Some(path) => run.load_weights(path)?,
        None if cli.command.needs_weights() => {
            return Err(CliError::Input("this command needs --weights".into()))
        }
        None => {}
    }
    run.cfg.validate()?;
    Ok(run)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut run = resolve(&cli)?;
    match &cli.command {
        Command::Init => commands::init(&run),
        Command::Train => commands::train_cmd(&run),
        Command::Scan { prompts } => commands::scan(&mut run, prompts.as_deref()),
        Command::Margin { prompts } => commands::margin(&mut run, prompts),
        Command::Witness => commands::witness(&run),
        Command::Hessian => commands::hessian(&run),
        Command::DumpStates { prompts } => commands::dump_states(&mut run, prompts),
        Command::Invert { states, truth } => commands::invert_cmd(&mut run, states, truth.as_deref()),
        Command::Gradcheck => commands::gradcheck(&run),
        Command::Config => {
            print!("{}", run.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sipit: {e}");
            e.exit_code()
        }
    }
}
