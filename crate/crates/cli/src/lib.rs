//! `lazymdp`: solve, bound, sweep, learn and compare importance maps on
//! tabular lazy-MDPs from the command line.
//!
//! Every command resolves and validates its whole configuration before any
//! computation, keeps its artifacts in memory, and writes them only once the
//! command has finished. A failed command therefore never leaves partial
//! output behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod env;
pub mod render;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lazy_mdp::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_non_convergence() => EXIT_NON_CONVERGENCE,
            _ => EXIT_CONFIG,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "lazymdp", version, about = "Tabular lazy-MDP experiments")]
pub struct Cli {
    /// Suppress the report on stdout; files and exit codes are unchanged.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the lazy-MDP at one penalty and map where control is taken.
    Solve(CommonArgs),
    /// Compute the penalty bounds eta_min and eta_max.
    EtaBounds(CommonArgs),
    /// Solve over a grid of penalties and check the bound endpoints.
    Sweep(SweepArgs),
    /// Q-learning on the lazy-MDP over a range of seeds and penalties.
    Explore(ExploreArgs),
    /// Compare action-gap, importance-advice and lazy-gap maps.
    Importance(CommonArgs),
    /// Check that an environment (and default policy) loads.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Canonical map name (rivers_bridges, kdt, kdt_apple), a .map file or an MDP .json file.
    #[arg(long)]
    pub env: Option<String>,
    /// uniform | second-best | optimal | optimal-except:<mask> | file:<policy.json>
    #[arg(long = "default", value_name = "POLICY")]
    pub default_policy: Option<String>,
    #[arg(long, conflicts_with = "eta_grid")]
    pub eta: Option<f64>,
    /// Comma-separated list, `lin:START:STOP:N` or `log:START:STOP:N`.
    #[arg(long, value_name = "GRID")]
    pub eta_grid: Option<String>,
    /// Overrides the environment's discount.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// `N` for seeds 0..N, or `A..B`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for seed- and grid-parallel work.
    #[arg(long)]
    pub workers: Option<usize>,
    /// TOML file with the same keys; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also locate both thresholds by bisection and compare them with the formulas.
    #[arg(long)]
    pub bisect: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExploreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub phases: Option<usize>,
    /// Episodes per phase.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

/// Artifacts of a finished command.
#[derive(Debug, Default)]
pub struct Output {
    /// File name and contents, written under the output directory.
    pub files: Vec<(String, String)>,
    pub stdout: String,
    /// Failed assertions; any entry turns the exit code into 4.
    pub failures: Vec<String>,
    pub out_dir: Option<PathBuf>,
}

impl Output {
    fn file(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    pub fn write(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(io(&path))?;
        }
        Ok(())
    }
}

pub fn execute(cli: Cli) -> Result<Output> {
    match cli.command {
        Command::Solve(args) => commands::solve(&config::resolve(&args)?),
        Command::EtaBounds(args) => commands::eta_bounds(&config::resolve(&args)?),
        Command::Sweep(args) => commands::sweep(&config::resolve(&args.common)?, args.bisect),
        Command::Explore(args) => {
            let mut experiment = config::resolve(&args.common)?;
            config::apply_learning_flags(&mut experiment, args.phases, args.episodes, args.max_steps)?;
            commands::explore(&experiment)
        }
        Command::Importance(args) => commands::importance(&config::resolve(&args)?),
        Command::Validate(args) => commands::validate(&config::resolve(&args)?),
    }
}

/// Parses arguments, runs the command, writes its artifacts and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let quiet = cli.quiet;
    let output = match execute(cli) {
        Ok(output) => output,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Err(e) = output.write() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    if !quiet {
        print!("{}", output.stdout);
    }
    if output.failures.is_empty() {
        EXIT_OK
    } else {
        for f in &output.failures {
            eprintln!("assertion failed: {f}");
        }
        EXIT_ASSERTION
    }
}
