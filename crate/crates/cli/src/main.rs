//! `noisycrf`: synthesise data, train the auxiliary label model, train the
//! robust classifier, evaluate it and clean the noisy labels.

mod commands;
mod config;
mod fsutil;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "noisycrf", version, about = "Train classifiers from noisy labels with a clean/noisy/hidden label CRF")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for data generation, the auxiliary model and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; also the default home of every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Model variant, e.g. `crf_hidden` or `no_pairwise`.
    #[arg(long, global = true)]
    variant: Option<String>,

    #[arg(long, global = true)]
    alpha_start: Option<f64>,

    #[arg(long, global = true)]
    alpha_end: Option<f64>,

    /// Epochs over which alpha anneals from start to end.
    #[arg(long, global = true)]
    alpha_epochs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic noisy dataset.
    Synth,
    /// Fit the auxiliary model on the clean training pairs.
    TrainAux,
    /// Train the classifier, writing a checkpoint and metrics log per epoch.
    Train {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test split (or validation) and on `D_N`.
    Eval,
    /// Propose cleaned labels for the noisy training rows.
    Clean,
}

/// Error categories with their exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Config,
    Data,
    Numeric,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Numeric => 4,
        }
    }

    fn classify(err: &anyhow::Error) -> Self {
        if let Some(f) = err.downcast_ref::<Failure>() {
            return *f;
        }
        for cause in err.chain() {
            if let Some(e) = cause.downcast_ref::<noisycrf::Error>() {
                use noisycrf::Error as E;
                return match e {
                    E::InvalidArgument(_) | E::NotStochastic(_) | E::EnumerationLimit { .. } => Failure::Config,
                    E::NonFinite(_) | E::Singular => Failure::Numeric,
                    _ => Failure::Data,
                };
            }
        }
        Failure::Data
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "configuration error",
            Failure::Data => "data error",
            Failure::Numeric => "numeric failure",
        })
    }
}

pub fn fail(kind: Failure, msg: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("{msg}").context(kind)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        variant: cli.variant,
        alpha_start: cli.alpha_start,
        alpha_end: cli.alpha_end,
        alpha_epochs: cli.alpha_epochs,
    };
    let (config, paths) = config.resolve(&overrides)?;
    match cli.command {
        Command::Synth => commands::synth(&config, &paths),
        Command::TrainAux => commands::train_aux(&config, &paths),
        Command::Train { resume } => commands::train(&config, &paths, resume),
        Command::Eval => commands::eval(&paths),
        Command::Clean => commands::clean(&paths),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = Failure::classify(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(kind.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn library_errors_map_to_exit_codes() {
        let e: anyhow::Error = noisycrf::Error::Singular.into();
        assert_eq!(Failure::classify(&e), Failure::Numeric);
        let e: anyhow::Error = noisycrf::Error::InvalidArgument("x".into()).into();
        assert_eq!(Failure::classify(&e.context("while training")), Failure::Config);
        let e: anyhow::Error = noisycrf::Error::Format("x".into()).into();
        assert_eq!(Failure::classify(&e), Failure::Data);
        let tagged = anyhow::Error::from(noisycrf::Error::InvalidArgument("x".into())).context(Failure::Data);
        assert_eq!(Failure::classify(&tagged), Failure::Data);
        assert_eq!(Failure::classify(&fail(Failure::Numeric, "nan")), Failure::Numeric);
    }
}
