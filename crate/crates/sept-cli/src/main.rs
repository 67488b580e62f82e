//! `sept` — command-line front end for the SD-map fusion sandbox.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad files,
//! configs, or scene data), 3 numeric failure (divergence or a failed
//! gradient check).

mod commands;
mod graphs;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sept", version, about = "SD-map enhanced BEV perception sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with a manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of cells hidden by occlusion rectangles.
        #[arg(long, default_value_t = 0.0)]
        occlusion: f64,
        /// Probability of dropping each SD road edge.
        #[arg(long = "drop-sd", default_value_t = 0.0)]
        drop_sd: f64,
        /// Map window as x_min x_max y_min y_max (meters).
        #[arg(long, num_args = 4, allow_negative_numbers = true, default_values_t = [-50.0, 50.0, -25.0, 25.0])]
        window: Vec<f64>,
        /// Rigid SD-map misalignment baked into the files.
        #[arg(long = "sigma-t", default_value_t = 0.0)]
        sigma_t: f64,
        #[arg(long = "sigma-theta", default_value_t = 0.0)]
        sigma_theta: f64,
        #[arg(long = "n-roads", default_value_t = 5)]
        n_roads: usize,
        #[arg(long = "grid-spacing", default_value_t = 6.0)]
        grid_spacing: f64,
    },
    /// Preprocess scenes: raster PGMs, token dumps, keypoints, GT heatmaps.
    Prep {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Heatmap radius in cells.
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train the ablation matrix and write the per-run CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds to train each variant with.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Score aggregation from a CSV of sub-metrics, or lane-graph files.
    Metrics {
        /// CSV with header det_l,det_t,top_ll,top_lt or
        /// det_ls,det_a,det_te,top_lsls,top_lste.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Require the five-column lane-segment format.
        #[arg(long)]
        olus: bool,
        /// Predicted lane-graph JSON (lanes + adjacency sub-schema).
        #[arg(long = "pred-graph", requires = "gt_graph")]
        pred_graph: Option<PathBuf>,
        #[arg(long = "gt-graph", requires = "pred_graph")]
        gt_graph: Option<PathBuf>,
        /// Matching thresholds in meters for graph evaluation.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
        thresholds: Vec<f64>,
    },
    /// Run the full gradient verification suite.
    Gradcheck,
}

/// Failures mapped to exit codes 2 and 3.
pub enum Failure {
    Validation(String),
    Numeric(String),
}

impl Failure {
    fn validation(msg: impl std::fmt::Display) -> Self {
        Failure::Validation(msg.to_string())
    }

    fn numeric(msg: impl std::fmt::Display) -> Self {
        Failure::Numeric(msg.to_string())
    }
}

impl From<sept_core::train::TrainError> for Failure {
    fn from(err: sept_core::train::TrainError) -> Self {
        match err {
            sept_core::train::TrainError::Diverged { .. } => Failure::numeric(err),
            other => Failure::validation(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::validation(err)
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen { out, scenes, seed, occlusion, drop_sd, window, sigma_t, sigma_theta, n_roads, grid_spacing } => {
            commands::gen(
                &out, scenes, seed, occlusion, drop_sd, &window, sigma_t, sigma_theta, n_roads,
                grid_spacing,
            )
        }
        Command::Prep { scenes, out, sigma } => commands::prep(&scenes, &out, sigma),
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval { config, ckpt } => commands::eval(&config, &ckpt),
        Command::Ablate { config, out, seeds } => commands::ablate(&config, &out, &seeds),
        Command::Metrics { csv, olus, pred_graph, gt_graph, thresholds } => {
            commands::metrics(csv.as_deref(), olus, pred_graph.as_deref(), gt_graph.as_deref(), &thresholds)
        }
        Command::Gradcheck => commands::gradcheck(),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            3
        }
    }
}
