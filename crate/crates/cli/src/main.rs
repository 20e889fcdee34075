//! Experiment runner. Five subcommands, JSON config with fail-closed keys,
//! deterministic CSV artifacts plus a JSON metadata sidecar per run.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O error.

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_file_config, CliError};

#[derive(Parser)]
#[command(name = "psdflow", version, about = "Factored-covariance flow experiments")]
struct Cli {
    /// JSON configuration file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for CSV and metadata artifacts (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the three tangent projections across ambient dimensions.
    ProjectBench {
        /// Comma-separated ascending ambient dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        p: Option<usize>,
        /// Width of the random H = GG' operator (must exceed p).
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Dense RK4 Riccati reference vs the three factored flows.
    RiccatiCompare {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        /// Number of measurement rows.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        record_every: Option<usize>,
    },
    /// Swarm tracking: full Kalman-Bucy filter vs the factored variants.
    Swarm {
        /// Ambient dimension, two coordinates per agent (even).
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        record_every: Option<usize>,
        #[arg(long)]
        q_dispersion: Option<f64>,
        #[arg(long)]
        n_scale: Option<f64>,
        /// Zero out process and measurement noise.
        #[arg(long)]
        noise_free: bool,
    },
    /// Brownian-motion covariance flow: steady states and error growth.
    Brownian {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        record_every: Option<usize>,
    },
    /// Gaussian variational-inference flow with a PPCA covariance.
    Viflow {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Expectation mode: "exact" or "mc".
        #[arg(long)]
        mode: Option<String>,
        /// Monte-Carlo batch size (mc mode).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        record_every: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out_dir = cli
        .out
        .or_else(|| file.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;

    match cli.command {
        Command::ProjectBench { dims, p, r, reps } => {
            let cfg = config::resolve_bench(&file, dims, p, r, reps, seed)?;
            experiments::project_bench(&cfg, &out_dir)
        }
        Command::RiccatiCompare {
            d,
            p,
            k,
            h,
            t_end,
            record_every,
        } => {
            let cfg = config::resolve_riccati(&file, d, p, k, h, t_end, record_every, seed)?;
            experiments::riccati_compare(&cfg, &out_dir)
        }
        Command::Swarm {
            d,
            p,
            h,
            t_end,
            record_every,
            q_dispersion,
            n_scale,
            noise_free,
        } => {
            let cfg = config::resolve_swarm(
                &file,
                d,
                p,
                h,
                t_end,
                record_every,
                q_dispersion,
                n_scale,
                noise_free,
                seed,
            )?;
            experiments::swarm(&cfg, &out_dir)
        }
        Command::Brownian {
            d,
            p,
            lambda,
            nu,
            h,
            t_end,
            record_every,
        } => {
            let cfg =
                config::resolve_brownian(&file, d, p, lambda, nu, h, t_end, record_every, seed)?;
            experiments::brownian(&cfg, &out_dir)
        }
        Command::Viflow {
            d,
            p,
            epsilon,
            mode,
            k,
            h,
            t_end,
            record_every,
        } => {
            let cfg = config::resolve_viflow(
                &file,
                d,
                p,
                epsilon,
                mode,
                k,
                h,
                t_end,
                record_every,
                seed,
            )?;
            experiments::viflow(&cfg, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
