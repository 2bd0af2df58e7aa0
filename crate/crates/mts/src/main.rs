//! `mts` command line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical abort during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mts::cli;
use mts::config::RunConfig;
use mts::error::{MtsError, Result};
use mts::eval::InferenceRule;

#[derive(Parser)]
#[command(name = "mts", about = "Open-set domain adaptation benchmark on synthetic shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset pair as CSV
    Generate {
        /// key=value run configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// output directory for source.csv / target.csv
        #[arg(long)]
        out: PathBuf,
        /// override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated dataset directory
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// directory holding source.csv and target.csv
        #[arg(long)]
        data: PathBuf,
        /// run output directory (checkpoint, history, resolved config)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the target split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// optional directory for report.csv
        #[arg(long)]
        out: Option<PathBuf>,
        /// inference rule: cy2, w:<tau>, or maxprob:<tau>
        #[arg(long, default_value = "cy2")]
        rule: String,
    },
    /// Train and score every ablation variant on one shared dataset
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the learned feature space as an SVG scatter plot
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// output SVG path
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn parse_rule(spec: &str) -> Result<InferenceRule> {
    if spec == "cy2" {
        return Ok(InferenceRule::Cy2Argmax);
    }
    let parse_tau = |v: &str| -> Result<f64> {
        let tau: f64 = v
            .parse()
            .map_err(|_| MtsError::Config(format!("bad threshold {v:?}")))?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(MtsError::Config(format!("threshold {tau} outside [0,1]")));
        }
        Ok(tau)
    };
    if let Some(v) = spec.strip_prefix("w:") {
        return Ok(InferenceRule::WThreshold(parse_tau(v)?));
    }
    if let Some(v) = spec.strip_prefix("maxprob:") {
        return Ok(InferenceRule::MaxProbThreshold(parse_tau(v)?));
    }
    Err(MtsError::Config(format!(
        "unknown rule {spec:?}; expected cy2, w:<tau>, or maxprob:<tau>"
    )))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            cli::cmd_generate(&load_config(config.as_ref(), seed)?, &out)
        }
        Command::Train { config, data, out, seed } => {
            cli::cmd_train(&load_config(config.as_ref(), seed)?, &data, &out)
        }
        Command::Eval { checkpoint, data, out, rule } => {
            cli::cmd_eval(&checkpoint, &data, out.as_deref(), parse_rule(&rule)?).map(|_| ())
        }
        Command::Ablate { config, out, seed } => {
            cli::cmd_ablate(&load_config(config.as_ref(), seed)?, &out)
        }
        Command::Plot { checkpoint, data, out } => cli::cmd_plot(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's help/version on stdout with success; real usage
            // errors exit 1.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MtsError::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
