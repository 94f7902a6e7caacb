//! `regcopula` command-line front end.

mod commands;
mod error;
mod ingest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regcopula::evaluation::CvOptions;

#[derive(Parser, Debug)]
#[command(name = "regcopula", version, about = "Distributional regression with regression copulas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by commands that build a model configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PSC, HPSC or HRBFC.
    #[arg(long)]
    pub model: Option<String>,
    /// mcmc or vb.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write an archive directory.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Archive directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predictive densities, moments and quantiles at new covariate rows.
    Predict {
        #[arg(long)]
        archive: PathBuf,
        /// CSV of covariate rows.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of density, moments, quantiles.
        #[arg(long, default_value = "density,moments,quantiles")]
        outputs: String,
        #[arg(long, default_value = "0.25,0.5,0.95,0.99")]
        alphas: String,
        /// Add the posterior variance of the conditional mean to v_hat.
        #[arg(long)]
        total_variance: bool,
    },
    /// Cross-validated scores, or scores of an external forecast file.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Take the model configuration from an archive.
        #[arg(long, conflicts_with = "forecasts")]
        archive: Option<PathBuf>,
        /// Exchange-format forecasts to score instead of cross-validating.
        #[arg(long)]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the cross-validation forecasts in exchange format.
        #[arg(long)]
        export_forecasts: bool,
        /// Share one margin fitted to all responses instead of refitting per fold.
        #[arg(long)]
        shared_margin: bool,
    },
    /// Dependence metric over a grid of covariate pairs.
    Dependence {
        #[arg(long)]
        archive: PathBuf,
        /// spearman, kendall, lower:q or upper:q.
        #[arg(long, default_value = "spearman")]
        metric: String,
        #[arg(long, default_value_t = 50)]
        grid_size: usize,
        /// Covariate column varied along the grid.
        #[arg(long, default_value_t = 0)]
        dim: usize,
        #[arg(long, allow_negative_numbers = true)]
        lo: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        hi: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate replicate responses at the training design.
    Simulate {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Fit { cfg, data, out } => commands::fit(&cfg, &data, &out),
        Command::Predict { archive, data, out, outputs, alphas, total_variance } => {
            commands::predict(&archive, &data, &out, &outputs, &alphas, total_variance)
        }
        Command::Score { cfg, archive, forecasts, data, k, out, export_forecasts, shared_margin } => {
            let opts = CvOptions { export_forecasts, refit_margin: !shared_margin, ..Default::default() };
            commands::score(&cfg, archive.as_deref(), forecasts.as_deref(), &data, k, &out, &opts)
        }
        Command::Dependence { archive, metric, grid_size, dim, lo, hi, out } => {
            commands::dependence(&archive, &metric, grid_size, dim, lo, hi, &out)
        }
        Command::Simulate { archive, data, replicates, seed, out } => {
            commands::simulate(&archive, &data, replicates, seed, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
