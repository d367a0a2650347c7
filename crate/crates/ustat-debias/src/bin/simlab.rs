//! Simulation laboratory CLI.
//!
//! ```text
//!   simlab ratio     [--config cfg.json] [--seed N] [--gamma 0.3,0.75]
//!                    [--reps N] [--out table.csv] [--format csv|md|json]
//!                    [--threads N]
//!   simlab normality [--config cfg.json] [--seed N] [--reps N]
//!                    [--out report.csv] [--format csv|md|json] [--threads N]
//! ```
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ustat_debias::error::Error;
use ustat_debias::simlab::{
    ks_report_to_string, ratio_table_to_string, run_ks_study, run_ratio_experiment, write_output,
    EmitFormat, GramModelConfig, RegressionModelConfig,
};

#[derive(Parser)]
#[command(name = "simlab", about = "Estimator comparison and normality studies", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Squared-error-ratio experiment on the regression model.
    Ratio(RunArgs),
    /// Kolmogorov-Smirnov normality study for the precision functional.
    Normality(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file; fields mirror the config struct names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "csv")]
    format: EmitFormatArg,
    /// Worker threads for the replication pool (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated gamma override (ratio experiment only).
    #[arg(long)]
    gamma: Option<String>,
    /// Replication-count override.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Clone, Copy)]
struct EmitFormatArg(EmitFormat);

impl std::str::FromStr for EmitFormatArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(EmitFormatArg)
    }
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<Option<T>, Error> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let cfg = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(Some(cfg))
        }
    }
}

fn parse_gammas(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid gamma value '{part}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let (args, is_ratio) = match &cli.command {
        Command::Ratio(a) => (a, true),
        Command::Normality(a) => (a, false),
    };

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = args.threads {
            builder = builder.num_threads(n);
        }
        builder.build().map_err(|e| Error::Config(e.to_string()))?
    };

    let text = if is_ratio {
        let mut cfg: RegressionModelConfig =
            load_config(&args.config)?.unwrap_or_default();
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(reps) = args.reps {
            cfg.replications = reps;
        }
        if let Some(gammas) = &args.gamma {
            cfg.gamma_grid = parse_gammas(gammas)?;
        }
        let table = pool.install(|| run_ratio_experiment(&cfg))?;
        ratio_table_to_string(&table, args.format.0)?
    } else {
        let mut cfg: GramModelConfig = load_config(&args.config)?.unwrap_or_default();
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(reps) = args.reps {
            cfg.replications = reps;
        }
        if args.gamma.is_some() {
            return Err(Error::Config("--gamma applies to the ratio experiment only".into()));
        }
        let report = pool.install(|| run_ks_study(&cfg))?;
        ks_report_to_string(&report, args.format.0)?
    };

    write_output(&text, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::EmptyStudy => ExitCode::from(2),
                Error::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
