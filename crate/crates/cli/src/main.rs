mod commands;
mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

/// Multi-task domain-adaptive segmentation on synthetic geospatial pairs.
#[derive(Parser, Debug)]
#[command(name = "geoadapt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    lambda_da: Option<f64>,
    #[arg(long)]
    lambda_mae: Option<f64>,
    /// Training masking ratio.
    #[arg(long)]
    mask_ratio: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seeds.clone(),
            lambda_da: self.lambda_da,
            lambda_mae: self.lambda_mae,
            mask_ratio: self.mask_ratio,
            mask_ratios: None,
            out_dir: self.out.clone(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source/target datasets.
    GenData(Common),
    /// Train the joint objective for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint from `pretrain-core` whose core initializes training.
        #[arg(long)]
        core: Option<PathBuf>,
    },
    /// Pretrain the core with a single-domain masked autoencoder.
    PretrainCore(Common),
    /// Evaluate a checkpoint on the target test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reject checkpoints whose config digest differs.
        #[arg(long)]
        strict: bool,
    },
    /// Masking-ratio reconstruction sweep of a checkpoint.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        mask_ratios: Option<Vec<f64>>,
        #[arg(long)]
        strict: bool,
    },
    /// Train the four loss configurations over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        core: Option<PathBuf>,
    },
    /// Run the numerical identity checks.
    VerifyMath {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeded toy models per identity.
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failed command: exit code 2 for configuration problems, 1 otherwise.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: format!("config error: {}", msg.into()),
        }
    }

    pub fn config_err(e: geoadapt::Error) -> Self {
        Self::config(e.to_string())
    }

    pub fn runtime(stage: &str, e: impl Display) -> Self {
        Failure {
            code: 1,
            msg: format!("{stage} failed: {e}"),
        }
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("GEOADAPT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::config(format!("GEOADAPT_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, core } => commands::train(&common, core.as_deref()),
        Command::PretrainCore(c) => commands::pretrain_core(&c),
        Command::Eval {
            common,
            checkpoint,
            strict,
        } => commands::eval(&common, &checkpoint, strict),
        Command::Reconstruct {
            common,
            checkpoint,
            mask_ratios,
            strict,
        } => commands::reconstruct(&common, &checkpoint, mask_ratios, strict),
        Command::Ablate { common, core } => commands::ablate(&common, core.as_deref()),
        Command::VerifyMath { seed, models, out } => commands::verify_math(seed, models, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = threads().and_then(|n| geoadapt::par::with_threads(n, move || dispatch(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("geoadapt: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
