//! Command-line driver for the odor-search pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use odorlab::config::RunConfig;
use odorlab::Error;

#[derive(Parser, Debug)]
#[command(name = "odorlab", version, about = "Simulate wakes, train and evaluate odor-search agents")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both `train.seed` and `eval.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Print results and errors as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the flow solver and write one field file per source.
    Simulate,
    /// Train an agent on the field bank, resuming from the latest checkpoint.
    Train {
        /// Discard existing checkpoints and logs instead of resuming.
        #[arg(long)]
        fresh: bool,
    },
    /// Run search trials and write trial and step tables.
    Eval {
        /// Checkpoint to load; the latest training checkpoint by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Net)]
        policy: PolicyKind,
    },
    /// Joint PDFs, strategy fingerprint and summary of evaluated trials.
    Analyze {
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        steps: Option<PathBuf>,
    },
    /// Fit the sector-search model to a table of (T_M f, U_eff) rows.
    SectorFit {
        table: PathBuf,
        /// Candidate growth exponents.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0])]
        gamma: Vec<f64>,
        /// Divide speeds by their maximum before fitting.
        #[arg(long)]
        normalize: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Net,
    Oracle,
    Random,
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::Usage(_) => ("usage", 2),
        Error::Format { .. } => ("format", 2),
        Error::UnsupportedVersion { .. } => ("format", 2),
        Error::Domain(_) => ("domain", 2),
        Error::SolverFailure { .. } => ("solver", 1),
        Error::NumericalBlowup { .. } => ("solver", 1),
        Error::OutOfDomain(_) => ("out_of_domain", 1),
        Error::FingerprintUndefined { .. } => ("fingerprint", 1),
        Error::FitUndefined(_) => ("fit", 1),
        Error::Training { .. } => ("training", 1),
        Error::Io(_) => ("io", 1),
    }
}

fn load_config(cli: &Cli) -> odorlab::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| commands::dispatch(&cli, &cfg));
    match result {
        Ok(summary) => {
            if cli.json {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = error_kind(&e);
            if cli.json {
                let v = serde_json::json!({ "ok": false, "error": { "kind": kind, "message": e.to_string() } });
                println!("{v}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
