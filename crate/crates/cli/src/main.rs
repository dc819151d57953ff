//! `minlqg`: command-line driver for the Min-LQG mean-field solvers.
//!
//! Exit codes: 0 on success, 1 for invalid input (usage, config or
//! validation errors), 2 for numerical failures.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "minlqg", version, about = "Min-LQG mean-field game solvers")]
pub struct Cli {
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for CSV files and the manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads (falls back to MINLQG_THREADS, then all cores).
    #[arg(long, global = true, env = "MINLQG_THREADS")]
    pub threads: Option<usize>,
    /// Fixed-point tolerance.
    #[arg(long, global = true, default_value_t = 1e-3)]
    pub tol: f64,
    /// Override the number of time steps of the scenario grid.
    #[arg(long, global = true)]
    pub n_steps: Option<usize>,
    /// Fokker-Planck cells.
    #[arg(long, global = true, default_value_t = 801)]
    pub fp_nodes: usize,
    /// Ensemble paths per evaluation of F for vector states.
    #[arg(long, global = true, default_value_t = 500)]
    pub paths: usize,
    /// Samples per cell probability for vector states.
    #[arg(long, global = true, default_value_t = 256)]
    pub cell_samples: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Tracked mean path selection: a binary `--r`, a full `--lambda`, or (when
/// neither is given) the computed equilibrium.
#[derive(Debug, Clone, Args, Serialize)]
pub struct LambdaArgs {
    /// Left-cell probability of a scalar binary scenario.
    #[arg(long)]
    pub r: Option<f64>,
    /// CDM rows separated by `;`, entries by `,` (e.g. "0.4,0.6;0.5,0.5").
    #[arg(long)]
    pub lambda: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SweepParam {
    #[value(name = "Q")]
    Q,
    #[value(name = "sigma")]
    Sigma,
    #[value(name = "M")]
    M,
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "R")]
    R,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Check a scenario against the model assumptions.
    Validate,
    /// Solve every class Riccati equation and write Π(t).
    SolveRiccati,
    /// Evaluate value, control and choice probabilities.
    EvalControl {
        #[command(flatten)]
        lambda: LambdaArgs,
        /// Evaluation times.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0, 1.5])]
        times: Vec<f64>,
        /// Single state, components separated by `,`; scalar grids otherwise.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<String>,
        #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
        x_min: f64,
        #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
        x_max: f64,
        #[arg(long, default_value_t = 61)]
        x_points: usize,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Propagate the population law and write density snapshots.
    SolveFp {
        #[command(flatten)]
        lambda: LambdaArgs,
        /// Snapshot times as fractions of the horizon.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0])]
        snapshots: Vec<f64>,
    },
    /// Compute mean-field equilibria.
    FindFixedPoint {
        /// Return every equilibrium (scan + refinement, or multi-start).
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0.5)]
        omega: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Equilibria as one class parameter varies (applied to every class).
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        /// Number of parameter values.
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
    /// Euler–Maruyama population simulation.
    Simulate {
        #[command(flatten)]
        lambda: LambdaArgs,
        #[arg(long, default_value_t = 10_000)]
        agents: usize,
        /// Agents whose paths are written.
        #[arg(long, default_value_t = 10)]
        keep: usize,
        #[arg(long, default_value_t = 1)]
        substeps: usize,
    },
    /// Estimate ε-Nash gaps for several population sizes.
    CheckNash {
        #[command(flatten)]
        lambda: LambdaArgs,
        #[arg(long = "N", value_delimiter = ',', default_values_t = vec![10, 100, 1000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        agent_paths: usize,
        #[arg(long, default_value_t = 4096)]
        probes: usize,
    },
    /// Regenerate the data behind the reference figures.
    ReproduceFigure {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        fig: u8,
        /// Q-grid for figure 4.
        #[arg(long, default_value_t = 1.0)]
        from: f64,
        #[arg(long, default_value_t = 30.0)]
        to: f64,
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
