//! Command-line harness for the collapse lab.
//!
//! `run` parses arguments, executes one subcommand and maps the outcome to an
//! exit code: 0 on success, 1 when a check fails, 2 on a configuration error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable that caps `--parallel`.
pub const THREADS_ENV: &str = "COLLAPSE_LAB_THREADS";

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config files or inputs.
    Config(String),
    /// The run completed but a check did not hold.
    Check(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Check(_) => EXIT_CHECK_FAILED,
        }
    }
}

/// Errors from the numerical core: input problems are configuration errors,
/// everything else is a failed run.
impl From<collapse_core::Error> for Failure {
    fn from(e: collapse_core::Error) -> Self {
        use collapse_core::Error as E;
        match e {
            E::Domain(_) | E::Shape(_) | E::Io { .. } | E::Parse { .. } => Failure::Config(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "collapse-lab",
    version,
    about = "Neural collapse experiments on the unconstrained-feature model"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of seeds to run.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Trace record interval in iterations or epochs.
    #[arg(long, global = true)]
    pub record_every: Option<usize>,
    /// Run independent jobs on up to N threads.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Print one JSON object per result instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ProblemArgs {
    /// Number of classes.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Feature dimension.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Samples per class.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Classifier weight decay.
    #[arg(long, global = true)]
    pub lambda_w: Option<f64>,
    /// Feature weight decay.
    #[arg(long, global = true)]
    pub lambda_h: Option<f64>,
    /// Bias weight decay.
    #[arg(long, global = true)]
    pub lambda_b: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct OptimizerArgs {
    /// gd-momentum, adam or lbfgs.
    #[arg(long, global = true)]
    pub optimizer: Option<String>,
    /// Learning rate (GD-momentum and Adam).
    #[arg(long, global = true)]
    pub step_size: Option<f64>,
    /// Heavy-ball momentum (GD-momentum).
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    /// History length (L-BFGS).
    #[arg(long, global = true)]
    pub memory: Option<usize>,
    /// Iteration cap.
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Stop once the gradient norm falls below this.
    #[arg(long, global = true)]
    pub grad_tol: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train W, H, b from random starts and certify the endpoints.
    Train,
    /// Train H, b with the classifier frozen at a scaled simplex ETF.
    TrainFixedEtf {
        /// identity or random.
        #[arg(long)]
        lift: Option<String>,
    },
    /// Train the two-layer feature extractor on synthetic data.
    TrainBackbone {
        #[arg(long)]
        random_labels: bool,
        /// all-params or peeled-wh.
        #[arg(long)]
        decay_mode: Option<String>,
        /// Hidden width; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Classify a saved state as global minimum, strict saddle or non-critical.
    Certify {
        state: PathBuf,
        #[arg(long, default_value_t = collapse_core::optim::CERTIFY_TOL)]
        tol: f64,
    },
    /// Perturb the origin along its negative-curvature direction and train.
    SaddleProbe {
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Run the seeded lemma property suites.
    Lemmas {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print the minimizer of the scale curve.
    RhoStar,
    /// Print objective, gradient and collapse metrics of a saved state.
    Metrics {
        state: PathBuf,
        /// Measure NC4 with the global feature mean taken as zero.
        #[arg(long)]
        center: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_CONFIG };
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("collapse-lab: {f}");
            f.exit_code()
        }
    }
}
