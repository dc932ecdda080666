mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Bayesian quantile regression for longitudinal panels.
#[derive(Parser, Debug)]
#[command(name = "qrmix", version)]
struct Cli {
    /// Worker threads for chains and study replicates.
    #[arg(long, global = true, env = "QRMIX_WORKERS")]
    workers: Option<usize>,

    /// Override the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dataset (and optionally a config) for schema and invariant violations.
    Validate { data: PathBuf, config: Option<PathBuf> },
    /// Fit a model and write draws, summaries, diagnostics and LPML to a run directory.
    Fit {
        data: PathBuf,
        /// JSON run configuration, or the manifest of an earlier run to replay.
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank completed runs on the same data by LPML.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run a simulation study described by a JSON spec.
    Study {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing the generated datasets.
        #[arg(long)]
        no_datasets: bool,
    },
    /// Emit quantile curves and effect bands of a run as long-format CSV.
    Curves {
        run: PathBuf,
        /// Covariate values as `name=value`, comma separated; others sit at their center.
        #[arg(long, default_value = "")]
        profile: String,
        /// Number of interior grid points.
        #[arg(long, default_value_t = 19)]
        points: usize,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Validate { data, config } => commands::validate(&data, config.as_deref()),
        Command::Fit { data, config, out } => commands::fit(&data, &config, &out, cli.seed),
        Command::Compare { runs } => commands::compare(&runs),
        Command::Study { spec, out, no_datasets } => commands::study(&spec, &out, cli.seed, !no_datasets),
        Command::Curves { run, profile, points, out } => commands::curves(&run, &profile, points, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
