//! `fairsaoml` command-line harness.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or validation
//! error, 3 numerical failure (artifacts written so far are kept and the
//! manifest is flagged partial).

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fairsaoml_core::{Error, Mode, SchemeKind};

use crate::commands::Overrides;
use crate::config::{Ablation, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fairsaoml", version, about = "Fairness-aware adaptive online meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic stream as CSV.
    GenData(Common),
    /// Run the configured experiment for every repetition seed.
    Run(Common),
    /// Run once per interval base and tabulate the results.
    SweepBase {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bases.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
        bases: Vec<usize>,
    },
    /// Recompute metrics.csv and regret.json from existing artifacts.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    base: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Di,
    Agc,
    Dgc,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fairsaoml,
    SingleExpert,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        let overrides = Overrides {
            scheme: self.scheme.map(|s| match s {
                SchemeArg::Di => SchemeKind::Di,
                SchemeArg::Agc => SchemeKind::Agc,
                SchemeArg::Dgc => SchemeKind::Dgc,
            }),
            base: self.base,
            seed: self.seed,
            reps: self.reps,
            ablation: self.ablation,
            mode: self.mode.map(|m| match m {
                ModeArg::Fairsaoml => Mode::Fairsaoml,
                ModeArg::SingleExpert => Mode::SingleExpert,
            }),
        };
        overrides.apply(&mut cfg)?;
        let out = commands::default_out(&cfg, self.out.clone());
        Ok((cfg, out))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Numerical { .. } | Error::InternalConsistency(_) => 3,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("FAIRSAOML_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FAIRSAOML_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.load()?;
            commands::gen_data(&cfg, &out)
        }
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let summary = commands::run_experiment(&cfg, &out, "run")?;
            println!("{} repetitions, artifacts in {}", summary.manifest.repetitions.len(), out.display());
            Ok(())
        }
        Command::SweepBase { common, bases } => {
            let (cfg, out) = common.load()?;
            commands::sweep_base(&cfg, &bases, &out)
        }
        Command::Report(c) => {
            let (cfg, out) = c.load()?;
            commands::report(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
