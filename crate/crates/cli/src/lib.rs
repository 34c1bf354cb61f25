//! Command-line driver: synthetic data, assimilation, evaluation, rendering
//! and hyperparameter grid search.

pub mod commands;
pub mod config;
pub mod render;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpda_core::{Boundary, GradientTest, GridSpec, Hyperparams, Method};

pub use commands::{gridsearch, GridSearch, GridSearchReference};
pub use render::RenderMode;

/// Outcome of a successful command invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Diverged,
}

impl Outcome {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Outcome::Success => ExitCode::SUCCESS,
            Outcome::Diverged => ExitCode::from(2),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mpda", version, about = "Spatial data assimilation with Gaussian message passing")]
pub struct Cli {
    /// key=value file supplying defaults for any long flag; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a ground-truth field and noisy observations of it.
    Synth(SynthArgs),
    /// Estimate the posterior mean field from observations.
    Assimilate(AssimilateArgs),
    /// Compare an estimate with the truth.
    Eval(EvalArgs),
    /// Write a field as a PGM or PPM image.
    Render(RenderArgs),
    /// Sweep message-passing weight and damping over a synthetic problem.
    Gridsearch(GridSearchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 256)]
    pub nx: usize,
    /// Defaults to nx.
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long, default_value = "dirichlet", value_parser = parse_boundary)]
    pub boundary: Boundary,
}

impl GridArgs {
    pub fn grid(&self) -> anyhow::Result<GridSpec> {
        Ok(GridSpec::unit_square(self.nx, self.ny.unwrap_or(self.nx), self.boundary)?)
    }
}

fn parse_gradient_test(s: &str) -> Result<GradientTest, String> {
    s.parse().map_err(|e: mpda_core::Error| e.to_string())
}

fn parse_boundary(s: &str) -> Result<Boundary, String> {
    s.parse().map_err(|e: mpda_core::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct PriorArgs {
    /// SPDE order; the smoothness is alpha - 1.
    #[arg(long, default_value_t = 2)]
    pub alpha: u32,
    #[arg(long, default_value_t = 0.15)]
    pub lengthscale: f64,
    /// Marginal standard deviation of the prior.
    #[arg(long, default_value_t = 1.1)]
    pub sigma: f64,
    /// Observation noise variance; defaults to 1% of the prior variance.
    #[arg(long)]
    pub obs_var: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Message weight.
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub c: f64,
    /// Damping rate.
    #[arg(long, default_value_t = 0.6)]
    pub eta: f64,
    /// Early-stop threshold relative to the second-sweep change.
    #[arg(long, default_value_t = 1e-3)]
    pub tau: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
}

pub fn hyperparams(prior: &PriorArgs, solver: &SolverArgs) -> anyhow::Result<Hyperparams> {
    let sigma2 = prior.sigma * prior.sigma;
    let hyper = Hyperparams {
        alpha: prior.alpha,
        lengthscale: prior.lengthscale,
        sigma2,
        sigma_y2: prior.obs_var.unwrap_or(0.01 * sigma2),
        c: solver.c,
        eta: solver.eta,
        tau: solver.tau,
        max_iters: solver.max_iters,
    };
    hyper.validate()?;
    Ok(hyper)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Fraction of nodes observed.
    #[arg(long, default_value_t = 0.05)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub obs: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mp,
    MpMultigrid,
    #[value(name = "3dvar")]
    Var3d,
    Exact,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mp => Method::Mp,
            MethodArg::MpMultigrid => Method::MpMultigrid,
            MethodArg::Var3d => Method::Var3d,
            MethodArg::Exact => Method::Exact,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AssimilateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, value_enum, default_value = "mp-multigrid")]
    pub method: MethodArg,
    #[arg(long, value_name = "PATH")]
    pub obs: PathBuf,
    /// Posterior mean field.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Diagnostics record; defaults to the output path with `.diag.txt` appended.
    #[arg(long, value_name = "PATH")]
    pub diagnostics: Option<PathBuf>,
    /// Worker threads for message-passing sweeps.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Subdomain columns for a partitioned mp run.
    #[arg(long)]
    pub px: Option<usize>,
    /// Subdomain rows for a partitioned mp run.
    #[arg(long)]
    pub py: Option<usize>,
    /// Sweeps between halo exchanges in a partitioned run.
    #[arg(long, default_value_t = 1)]
    pub exchange_period: usize,
    /// Smallest side of the coarsest multigrid level.
    #[arg(long, default_value_t = mpda_core::multigrid::DEFAULT_BASE_DIM)]
    pub base_dim: usize,
    /// 3D-Var gradient tolerance.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// 3D-Var gradient test: relative-inf (max|g| <= tol*max(1,|J|)) or absolute-l2 (|g|_2 <= tol).
    #[arg(long, default_value = "relative-inf", value_parser = parse_gradient_test)]
    pub grad_test: GradientTest,
    /// 3D-Var iteration cap.
    #[arg(long, default_value_t = 500)]
    pub lbfgs_iters: usize,
    /// 3D-Var curvature pairs kept.
    #[arg(long, default_value_t = 10)]
    pub memory: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub estimate: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    /// Per-cell weights, e.g. cosine of latitude.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Write the pointwise absolute error field here.
    #[arg(long, value_name = "PATH")]
    pub l1_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long, value_name = "PATH")]
    pub field: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gray")]
    pub mode: RenderMode,
}

#[derive(Debug, Clone, Args)]
pub struct GridSearchArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long, default_value_t = 0.05)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Message weights to try.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-10,-2,-1,1,5,10,20")]
    pub c: Vec<f64>,
    /// Damping rates to try.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8")]
    pub eta: Vec<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub tau: f64,
    #[arg(long, default_value_t = 4000)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value = "auto")]
    pub reference: GridSearchReference,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Also write the table here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Parse arguments, merge the optional config file and run the command.
pub fn run<I, T>(args: I) -> anyhow::Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = config::parse_with_config(args)?;
    commands::dispatch(cli)
}

/// Entry point used by the binary: maps results to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(outcome) => outcome.exit_code(),
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return if clap_err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            }
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
