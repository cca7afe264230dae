//! Command-line driver: configuration layering, subcommands and exit codes.

pub mod config;
pub mod output;
pub mod run;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{env_layer, parse_kv, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lrpost::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("oracle comparison FAILED")]
    OracleFail,
    #[error("{failed} of {total} sweep points failed")]
    SweepFailed { failed: usize, total: usize },
}

impl CliError {
    /// 2 configuration, 3 numerical or I/O failure, 4 oracle FAIL.
    pub fn exit_code(&self) -> i32 {
        use lrpost::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidConfig(_) | E::DimensionMismatch { .. } | E::OracleCap { .. }) => 2,
            CliError::Core(_) | CliError::Io { .. } | CliError::SweepFailed { .. } => 3,
            CliError::OracleFail => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lrpost", version, about = "Low-rank posterior covariance experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Leading eigenvalues of the prior-preconditioned misfit Hessian.
    Eigs,
    /// Pointwise posterior variance field.
    Variance,
    /// Compare against a dense reference; exit 4 on FAIL.
    Oracle,
    /// Repeat `eigs` over one parameter axis.
    Sweep {
        /// `key=v1,v2,…`, e.g. `nu=1e-1,1e-2,1e-3`.
        #[arg(long)]
        axis: String,
    },
    /// Analytic and discrete Laplacian eigenvalue table.
    Analytic,
}

/// Flags mirror the configuration keys; unset flags fall through to the
/// environment, then the config file, then defaults.
#[derive(Debug, Args, Default)]
pub struct Opts {
    /// `key=value` configuration file (a manifest works too).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub problem: Option<String>,
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub n_side: Option<String>,
    #[arg(long = "nt", global = true)]
    pub n_t: Option<String>,
    #[arg(long, global = true)]
    pub t_final: Option<String>,
    #[arg(long, global = true)]
    pub nu: Option<String>,
    #[arg(long, global = true)]
    pub wind: Option<String>,
    #[arg(long, global = true)]
    pub beta_ratio: Option<String>,
    #[arg(long, global = true)]
    pub prior: Option<String>,
    #[arg(long, global = true)]
    pub sensors: Option<String>,
    #[arg(long, global = true)]
    pub eps0: Option<String>,
    #[arg(long, global = true)]
    pub eps_eig: Option<String>,
    #[arg(long, global = true)]
    pub m_a: Option<String>,
    #[arg(long, global = true)]
    pub check_every: Option<String>,
    #[arg(long, global = true)]
    pub restart: Option<String>,
    #[arg(long, global = true)]
    pub solver: Option<String>,
    #[arg(long, global = true)]
    pub n_eigs: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<String>,
}

impl Opts {
    fn layer(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("problem", &self.problem),
            ("mode", &self.mode),
            ("n_side", &self.n_side),
            ("n_t", &self.n_t),
            ("t_final", &self.t_final),
            ("nu", &self.nu),
            ("wind", &self.wind),
            ("beta_ratio", &self.beta_ratio),
            ("prior", &self.prior),
            ("sensors", &self.sensors),
            ("eps0", &self.eps0),
            ("eps_eig", &self.eps_eig),
            ("m_a", &self.m_a),
            ("check_every", &self.check_every),
            ("restart", &self.restart),
            ("solver", &self.solver),
            ("n_eigs", &self.n_eigs),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

/// Resolves flag > environment > file > default.
pub fn resolve_config<I>(opts: &Opts, env: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let file = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    RunConfig::from_layers(&[file, env_layer(env)?, opts.layer()])
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    match &cli.command {
        Command::Eigs => {
            let run = run::cmd_eigs(cfg)?;
            println!(
                "iterations={} retained={} largest={:.6e} max_rank={} out={}",
                run.solved.iterations(),
                run.solved.retained(cfg.eps_eig),
                run.largest(),
                run.solved.max_rank(),
                cfg.out.display()
            );
        }
        Command::Variance => {
            let run = run::cmd_variance(cfg)?;
            let v = run.summary.variance();
            println!(
                "retained={} variance_min={:.6e} variance_max={:.6e} out={}",
                run.summary.retained(),
                v.min(),
                v.max(),
                cfg.out.display()
            );
        }
        Command::Oracle => {
            let report = run::cmd_oracle(cfg)?;
            print!("{}", report.to_key_value());
            if !report.pass() {
                return Err(CliError::OracleFail);
            }
        }
        Command::Sweep { axis } => {
            let points = run::cmd_sweep(cfg, axis)?;
            println!("points={} summary={}", points.len(), cfg.out.join("summary.csv").display());
        }
        Command::Analytic => print!("{}", run::cmd_analytic(cfg)?),
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<A, T, E>(args: A, env: E) -> i32
where
    A: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    E: IntoIterator<Item = (String, String)>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve_config(&cli.opts, env).and_then(|cfg| execute(&cli, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lrpost: {e}");
            e.exit_code()
        }
    }
}
