//! Experiment configuration: command-line flags layered over an optional
//! TOML file, resolved and validated in one place.
//!
//! ```toml
//! env = "kdt_apple"
//! default = "uniform"
//! eta_grid = [0.0, 0.03, 0.05]   # or eta = 0.03, or a grid spec string
//! seeds = "0..100"
//! out = "results"
//!
//! [learning]
//! alpha = 0.5
//! n_phases = 100
//! ```

use std::ops::Range;
use std::path::{Path, PathBuf};

use lazy_mdp::learning::QLearningConfig;
use lazy_mdp::mdp::{DEFAULT_MAX_ITERS, DEFAULT_TOL};
use lazy_mdp::StochasticPolicy;
use serde::Deserialize;

use crate::env::{self, Environment};
use crate::{config_error, CommonArgs, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub env: Option<String>,
    pub default: Option<String>,
    pub eta: Option<f64>,
    pub eta_grid: Option<GridValue>,
    pub gamma: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub seed: Option<u64>,
    pub seeds: Option<String>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub learning: LearningSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    List(Vec<f64>),
    Spec(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    pub alpha: Option<f64>,
    pub epsilon0: Option<f64>,
    pub epsilon_inf: Option<f64>,
    pub decay_horizon: Option<usize>,
    pub episodes_per_phase: Option<usize>,
    pub n_phases: Option<usize>,
    pub max_episode_steps: Option<usize>,
    pub exploring_starts: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Etas {
    Single(f64),
    Grid(Vec<f64>),
}

impl Etas {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Etas::Single(eta) => vec![*eta],
            Etas::Grid(grid) => grid.clone(),
        }
    }
}

/// A fully resolved and validated experiment.
#[derive(Debug)]
pub struct Experiment {
    pub env: Environment,
    pub default_name: String,
    pub default_policy: StochasticPolicy,
    pub etas: Option<Etas>,
    pub tol: f64,
    pub max_iters: usize,
    pub seeds: Range<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub learning: QLearningConfig,
}

impl Experiment {
    /// Runs `f` on a worker pool of the configured size.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| config_error(format!("cannot start {n} workers: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

pub const DEFAULT_SEEDS: Range<u64> = 0..100;

pub fn resolve(args: &CommonArgs) -> Result<Experiment> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };

    let etas = if let Some(eta) = args.eta {
        Some(Etas::Single(eta))
    } else if let Some(spec) = &args.eta_grid {
        Some(Etas::Grid(parse_grid(spec)?))
    } else {
        match (file.eta, &file.eta_grid) {
            (Some(_), Some(_)) => return Err(config_error("config sets both eta and eta_grid")),
            (Some(eta), None) => Some(Etas::Single(eta)),
            (None, Some(GridValue::List(list))) => Some(Etas::Grid(list.clone())),
            (None, Some(GridValue::Spec(spec))) => Some(Etas::Grid(parse_grid(spec)?)),
            (None, None) => None,
        }
    };
    if let Some(etas) = &etas {
        check_etas(&etas.values())?;
    }

    let seeds = if let Some(seed) = args.seed {
        seed..seed + 1
    } else if let Some(spec) = &args.seeds {
        parse_seeds(spec)?
    } else {
        match (file.seed, &file.seeds) {
            (Some(_), Some(_)) => return Err(config_error("config sets both seed and seeds")),
            (Some(seed), None) => seed..seed + 1,
            (None, Some(spec)) => parse_seeds(spec)?,
            (None, None) => DEFAULT_SEEDS,
        }
    };

    let tol = args.tol.or(file.tol).unwrap_or(DEFAULT_TOL);
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(config_error(format!("tol must be positive, got {tol}")));
    }
    let max_iters = args.max_iters.or(file.max_iters).unwrap_or(DEFAULT_MAX_ITERS);
    if max_iters == 0 {
        return Err(config_error("max-iters must be at least 1"));
    }
    let workers = args.workers.or(file.workers);
    if workers == Some(0) {
        return Err(config_error("workers must be at least 1"));
    }
    let gamma = args.gamma.or(file.gamma);
    if let Some(g) = gamma {
        if !(0.0..1.0).contains(&g) {
            return Err(config_error(format!("gamma must lie in [0, 1), got {g}")));
        }
    }

    let learning = learning_config(&file.learning)?;
    let env_name = args
        .env
        .clone()
        .or(file.env)
        .ok_or_else(|| config_error("no environment given (use --env or `env` in the config)"))?;
    let env = env::load(&env_name, gamma)?;
    let default_name = args
        .default_policy
        .clone()
        .or(file.default)
        .unwrap_or_else(|| "uniform".into());
    let default_policy = env::default_policy(&env, &default_name, tol, max_iters)?;

    Ok(Experiment {
        env,
        default_name,
        default_policy,
        etas,
        tol,
        max_iters,
        seeds,
        out: args.out.clone().or(file.out),
        workers,
        learning,
    })
}

fn learning_config(section: &LearningSection) -> Result<QLearningConfig> {
    let d = QLearningConfig::default();
    let config = QLearningConfig {
        alpha: section.alpha.unwrap_or(d.alpha),
        epsilon0: section.epsilon0.unwrap_or(d.epsilon0),
        epsilon_inf: section.epsilon_inf.unwrap_or(d.epsilon_inf),
        decay_horizon: section.decay_horizon.or(d.decay_horizon),
        episodes_per_phase: section.episodes_per_phase.unwrap_or(d.episodes_per_phase),
        n_phases: section.n_phases.unwrap_or(d.n_phases),
        max_episode_steps: section.max_episode_steps.unwrap_or(d.max_episode_steps),
        exploring_starts: section.exploring_starts.unwrap_or(d.exploring_starts),
        ..d
    };
    config.validate().map_err(|e| config_error(format!("learning: {e}")))?;
    Ok(config)
}

pub fn apply_learning_flags(
    experiment: &mut Experiment,
    phases: Option<usize>,
    episodes: Option<usize>,
    max_steps: Option<usize>,
) -> Result<()> {
    let l = &mut experiment.learning;
    l.n_phases = phases.unwrap_or(l.n_phases);
    l.episodes_per_phase = episodes.unwrap_or(l.episodes_per_phase);
    l.max_episode_steps = max_steps.unwrap_or(l.max_episode_steps);
    l.validate().map_err(|e| config_error(format!("learning: {e}")))
}

fn check_etas(etas: &[f64]) -> Result<()> {
    if etas.is_empty() {
        return Err(config_error("eta grid is empty"));
    }
    if let Some(bad) = etas.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(config_error(format!("eta must be finite and non-negative, got {bad}")));
    }
    if etas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_error("eta grid must be strictly increasing"));
    }
    Ok(())
}

fn parse_number<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| config_error(format!("invalid {what} `{text}`")))
}

/// `a,b,c`, `lin:START:STOP:N` or `log:START:STOP:N` (both ends included).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let ranged = |body: &str, log: bool| -> Result<Vec<f64>> {
        let parts: Vec<&str> = body.split(':').collect();
        let [start, stop, n] = parts[..] else {
            return Err(config_error(format!("grid `{spec}` needs START:STOP:N")));
        };
        let (start, stop): (f64, f64) = (parse_number(start, "grid start")?, parse_number(stop, "grid stop")?);
        let n: usize = parse_number(n, "grid size")?;
        if n < 2 {
            return Err(config_error("a ranged grid needs at least 2 points"));
        }
        if log && !(start > 0.0 && stop > 0.0) {
            return Err(config_error("log grid ends must be positive"));
        }
        Ok((0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                if log {
                    (start.ln() + t * (stop.ln() - start.ln())).exp()
                } else {
                    start + t * (stop - start)
                }
            })
            .collect())
    };
    if let Some(body) = spec.strip_prefix("lin:") {
        ranged(body, false)
    } else if let Some(body) = spec.strip_prefix("log:") {
        ranged(body, true)
    } else {
        spec.split(',').map(|x| parse_number(x, "eta")).collect()
    }
}

/// `N` for `0..N`, or `A..B`.
pub fn parse_seeds(spec: &str) -> Result<Range<u64>> {
    let range = match spec.split_once("..") {
        Some((a, b)) => parse_number(a, "seed")?..parse_number(b, "seed")?,
        None => 0..parse_number(spec, "seed count")?,
    };
    if range.is_empty() {
        return Err(config_error(format!("seed range `{spec}` is empty")));
    }
    Ok(range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("lin:0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        let log = parse_grid("log:0.01:1:3").unwrap();
        assert!((log[1] - 0.1).abs() < 1e-15);
        assert!(parse_grid("lin:0:1").is_err());
        assert!(parse_grid("log:0:1:4").is_err());
        assert!(parse_grid("0,x").is_err());
    }

    #[test]
    fn seeds() {
        assert_eq!(parse_seeds("5").unwrap(), 0..5);
        assert_eq!(parse_seeds("3..7").unwrap(), 3..7);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("4..4").is_err());
    }

    #[test]
    fn eta_checks() {
        assert!(check_etas(&[0.0, 0.1]).is_ok());
        assert!(check_etas(&[0.1, 0.1]).is_err());
        assert!(check_etas(&[-0.1]).is_err());
        assert!(check_etas(&[]).is_err());
    }

    #[test]
    fn file_config_parses_sections() {
        let file: FileConfig = toml::from_str(
            "env = \"kdt\"\neta_grid = [0.0, 0.03]\n[learning]\nn_phases = 3\n",
        )
        .unwrap();
        assert_eq!(file.env.as_deref(), Some("kdt"));
        assert_eq!(file.learning.n_phases, Some(3));
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }
}
