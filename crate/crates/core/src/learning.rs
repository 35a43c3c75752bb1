//! Seeded tabular Q-learning on base MDPs and lazy-MDPs, Z-function learning
//! and Monte-Carlo occupancy estimation.
//!
//! Every routine owns a `ChaCha8Rng` seeded from its arguments, so a run is a
//! pure function of `(inputs, config)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::grid::CompiledGrid;
use crate::lazy::{project_policy, LazyMdpSpec};
use crate::mdp::{sample_index, sample_initial, QTable, StochasticPolicy, TabularMdp, ZTable, TIE_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub alpha: f64,
    pub epsilon0: f64,
    pub epsilon_inf: f64,
    /// Episodes over which epsilon decays linearly; `None` spans the whole run.
    pub decay_horizon: Option<usize>,
    /// Overrides the MDP's discount when set.
    pub gamma: Option<f64>,
    pub episodes_per_phase: usize,
    pub n_phases: usize,
    pub max_episode_steps: usize,
    pub seed: u64,
    /// Start episodes uniformly over non-absorbing states instead of from the
    /// initial distribution.
    pub exploring_starts: bool,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        QLearningConfig {
            alpha: 0.5,
            epsilon0: 0.1,
            epsilon_inf: 0.0,
            decay_horizon: None,
            gamma: None,
            episodes_per_phase: 1000,
            n_phases: 100,
            max_episode_steps: 1000,
            seed: 0,
            exploring_starts: false,
        }
    }
}

impl QLearningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(0.0 <= self.epsilon_inf && self.epsilon_inf <= self.epsilon0 && self.epsilon0 <= 1.0) {
            return bad(format!(
                "need 0 <= epsilon_inf ({}) <= epsilon0 ({}) <= 1",
                self.epsilon_inf, self.epsilon0
            ));
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return bad(format!("gamma {g} outside [0, 1)"));
            }
        }
        if self.max_episode_steps == 0 || self.episodes_per_phase == 0 || self.n_phases == 0 {
            return bad("episode, phase and step counts must be positive".into());
        }
        if self.decay_horizon == Some(0) {
            return bad("decay_horizon must be positive".into());
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.episodes_per_phase * self.n_phases
    }

    /// Exploration rate at the start of episode `e` (0-based).
    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = self.decay_horizon.unwrap_or_else(|| self.total_episodes()) as f64;
        let frac = (episode as f64 / horizon).min(1.0);
        self.epsilon0 + (self.epsilon_inf - self.epsilon0) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRun {
    /// Learned table; one extra trailing column for the lazy action in lazy runs.
    pub q: QTable,
    /// Per phase: expected undiscounted, penalty-free return of the greedy
    /// policy from the initial distribution over `max_episode_steps` steps.
    pub scores: Vec<f64>,
    /// Per phase: fraction of the agent's decisions that chose the lazy action.
    pub lazy_frequency: Vec<f64>,
    /// State-visit distribution of the final phase's training episodes.
    pub occupancy: Vec<f64>,
}

impl LearningRun {
    pub fn final_score(&self) -> f64 {
        *self.scores.last().expect("at least one phase")
    }

    pub fn final_control_frequency(&self) -> f64 {
        1.0 - self.lazy_frequency.last().expect("at least one phase")
    }

    /// CSV with header `phase,score,lazy_frequency`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("phase,score,lazy_frequency\n");
        for (p, (s, l)) in self.scores.iter().zip(&self.lazy_frequency).enumerate() {
            out.push_str(&format!("{p},{},{}\n", sig(*s), sig(*l)));
        }
        out
    }
}

/// Occupancy CSV with header `state,row,col,has_key,door_open,mass`.
pub fn occupancy_csv(grid: &CompiledGrid, occupancy: &[f64]) -> String {
    let mut out = String::from("state,row,col,has_key,door_open,mass\n");
    for (s, &m) in occupancy.iter().enumerate() {
        let st = grid.state(s);
        out.push_str(&format!(
            "{s},{},{},{},{},{}\n",
            st.row,
            st.col,
            st.has_key,
            st.door_open,
            sig(m)
        ));
    }
    out
}

fn step<R: Rng>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
    let next = sample_index(mdp.successors(s, a).iter().copied(), rng);
    (next, mdp.reward(s, a))
}

fn start_state<R: Rng>(mdp: &TabularMdp, config: &QLearningConfig, live: &[usize], rng: &mut R) -> usize {
    if config.exploring_starts && !live.is_empty() {
        live[rng.random_range(0..live.len())]
    } else {
        sample_initial(mdp, rng)
    }
}

/// Uniform choice among the actions within the tie tolerance of the maximum.
fn greedy_random_tie<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = row.iter().filter(|&&x| x >= max - TIE_TOL).count();
    let mut k = if ties > 1 { rng.random_range(0..ties) } else { 0 };
    for (a, &x) in row.iter().enumerate() {
        if x >= max - TIE_TOL {
            if k == 0 {
                return a;
            }
            k -= 1;
        }
    }
    unreachable!("the maximum is always attained")
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// The lazy part of a learning problem: default policy and penalty.
struct Laziness<'a> {
    default_policy: &'a StochasticPolicy,
    eta: f64,
}

fn run(mdp: &TabularMdp, lazy: Option<Laziness<'_>>, config: &QLearningConfig) -> Result<LearningRun> {
    config.validate()?;
    mdp.ensure_valid()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n_cols = na + usize::from(lazy.is_some());
    let gamma = config.gamma.unwrap_or(mdp.gamma());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut q = QTable::zeros(ns, n_cols);
    let live: Vec<usize> = (0..ns).filter(|&s| !mdp.is_absorbing(s)).collect();

    let mut scores = Vec::with_capacity(config.n_phases);
    let mut lazy_frequency = Vec::with_capacity(config.n_phases);
    let mut visits = vec![0u64; ns];
    for phase in 0..config.n_phases {
        let last_phase = phase + 1 == config.n_phases;
        let (mut decisions, mut lazy_decisions) = (0u64, 0u64);
        for e in 0..config.episodes_per_phase {
            let epsilon = config.epsilon(phase * config.episodes_per_phase + e);
            let mut s = start_state(mdp, config, &live, &mut rng);
            for _ in 0..config.max_episode_steps {
                if mdp.is_absorbing(s) {
                    break;
                }
                if last_phase {
                    visits[s] += 1;
                }
                let choice = if rng.random::<f64>() < epsilon {
                    rng.random_range(0..n_cols)
                } else {
                    greedy_random_tie(q.row(s), &mut rng)
                };
                decisions += 1;
                let (next, reward) = match &lazy {
                    Some(l) if choice == na => {
                        lazy_decisions += 1;
                        let a = l.default_policy.sample(s, &mut rng);
                        step(mdp, s, a, &mut rng)
                    }
                    Some(l) => {
                        let (next, r) = step(mdp, s, choice, &mut rng);
                        (next, r - l.eta)
                    }
                    None => step(mdp, s, choice, &mut rng),
                };
                let target = if mdp.is_absorbing(next) {
                    reward
                } else {
                    reward + gamma * row_max(q.row(next))
                };
                let old = q.get(s, choice);
                q.set(s, choice, old + config.alpha * (target - old));
                s = next;
            }
            if last_phase && mdp.is_absorbing(s) {
                visits[s] += 1;
            }
        }
        lazy_frequency.push(if decisions == 0 {
            0.0
        } else {
            lazy_decisions as f64 / decisions as f64
        });
        let greedy = match &lazy {
            Some(l) => project_policy(&lazy_greedy_policy(&q), l.default_policy)?,
            None => crate::eval::greedy_from_q(&q),
        };
        scores.push(horizon_return(mdp, &greedy, config.max_episode_steps)?);
    }
    let total: u64 = visits.iter().sum();
    let occupancy = visits
        .iter()
        .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
        .collect();
    Ok(LearningRun {
        q,
        scores,
        lazy_frequency,
        occupancy,
    })
}

/// Tabular Q-learning on the MDP itself.
pub fn q_learning(mdp: &TabularMdp, config: &QLearningConfig) -> Result<LearningRun> {
    run(mdp, None, config)
}

/// Q-learning on the lazy-MDP. Choosing the lazy action executes an action
/// drawn from the default policy; the agent sees only the resulting state and
/// the base reward, with no penalty. Every other action pays `eta`.
pub fn q_learning_lazy(spec: &LazyMdpSpec, config: &QLearningConfig) -> Result<LearningRun> {
    run(
        spec.base(),
        Some(Laziness {
            default_policy: spec.default_policy(),
            eta: spec.eta(),
        }),
        config,
    )
}

/// Greedy policy over a learned augmented table, the last column being the
/// lazy action. Deferring wins ties, as in the exact solver.
pub fn lazy_greedy_policy(q_plus: &QTable) -> StochasticPolicy {
    let (ns, nu) = (q_plus.n_states(), q_plus.n_actions());
    let na = nu - 1;
    let mut probs = vec![0.0; ns * nu];
    for s in 0..ns {
        let row = q_plus.row(s);
        let out = &mut probs[s * nu..(s + 1) * nu];
        let best = row_max(&row[..na]);
        if row[na] >= best - TIE_TOL {
            out[na] = 1.0;
        } else {
            let ties: Vec<usize> = (0..na).filter(|&a| row[a] >= best - TIE_TOL).collect();
            for &a in &ties {
                out[a] = 1.0 / ties.len() as f64;
            }
        }
    }
    StochasticPolicy::new(ns, nu, probs).expect("rows are distributions")
}

/// Expected undiscounted return of `pi` from the initial distribution over
/// `horizon` steps, computed by propagating the state distribution.
pub fn horizon_return(mdp: &TabularMdp, pi: &StochasticPolicy, horizon: usize) -> Result<f64> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())?;
    let ns = mdp.n_states();
    let mut dist: Vec<f64> = mdp.initial_dist().to_vec();
    let mut next = vec![0.0; ns];
    let mut total = 0.0;
    for _ in 0..horizon {
        let mut live_mass = 0.0;
        next.fill(0.0);
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 || mdp.is_absorbing(s) {
                continue;
            }
            for (a, &p) in pi.row(s).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                total += mass * p * mdp.reward(s, a);
                for &(s2, t) in mdp.successors(s, a) {
                    next[s2] += mass * p * t;
                }
            }
        }
        std::mem::swap(&mut dist, &mut next);
        live_mass += (0..ns).filter(|&s| !mdp.is_absorbing(s)).map(|s| dist[s]).sum::<f64>();
        if live_mass < 1e-15 {
            break;
        }
    }
    Ok(total)
}

/// Learns `Z` of a fixed policy from unit rewards outside the absorbing set.
/// Behavior is epsilon-greedy around the target policy; the bootstrap uses
/// the target policy's expected next value.
pub fn learn_z(mdp: &TabularMdp, target: &StochasticPolicy, config: &QLearningConfig) -> Result<ZTable> {
    config.validate()?;
    mdp.ensure_valid()?;
    target.check_shape(mdp.n_states(), mdp.n_actions())?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = config.gamma.unwrap_or(mdp.gamma());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = QTable::zeros(ns, na);
    let live: Vec<usize> = (0..ns).filter(|&s| !mdp.is_absorbing(s)).collect();
    for e in 0..config.total_episodes() {
        let epsilon = config.epsilon(e);
        let mut s = start_state(mdp, config, &live, &mut rng);
        for _ in 0..config.max_episode_steps {
            if mdp.is_absorbing(s) {
                break;
            }
            let a = if rng.random::<f64>() < epsilon {
                rng.random_range(0..na)
            } else {
                target.sample(s, &mut rng)
            };
            let (next, _) = step(mdp, s, a, &mut rng);
            let bootstrap = if mdp.is_absorbing(next) {
                0.0
            } else {
                target.expect(next, z.row(next))
            };
            let old = z.get(s, a);
            z.set(s, a, old + config.alpha * (1.0 + gamma * bootstrap - old));
            s = next;
        }
    }
    Ok(z)
}

/// Monte-Carlo state-visit distribution of `pi` over episodes from the
/// initial distribution. Terminal states count once when reached.
pub fn occupancy(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    n_episodes: usize,
    max_episode_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())?;
    if n_episodes == 0 || max_episode_steps == 0 {
        return Err(Error::InvalidParameter("episode and step counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visits = vec![0u64; mdp.n_states()];
    for _ in 0..n_episodes {
        let mut s = sample_initial(mdp, &mut rng);
        for _ in 0..max_episode_steps {
            visits[s] += 1;
            if mdp.is_absorbing(s) {
                break;
            }
            let a = pi.sample(s, &mut rng);
            s = step(mdp, s, a, &mut rng).0;
        }
    }
    let total: u64 = visits.iter().sum();
    Ok(visits.iter().map(|&v| v as f64 / total as f64).collect())
}
