//! Finite MDPs, stochastic policies and the value tables attached to them.
//!
//! Storage is dense and row-major: `transitions[(s * n_actions + a) * n_states + s']`
//! and `rewards[s * n_actions + a]`. A sparse successor view is derived once at
//! construction so that sweeps cost O(nonzeros) instead of O(|S|^2 |A|).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of probability tables.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Absolute tolerance used to decide that two action values are tied.
pub const TIE_TOL: f64 = 1e-9;

/// Default sup-norm tolerance for the iterative solvers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Default iteration cap for the iterative solvers.
pub const DEFAULT_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    initial_dist: Vec<f64>,
    absorbing: Vec<bool>,
    // CSR view of the nonzero transitions, one row per (s, a).
    row_ptr: Vec<usize>,
    successors: Vec<(usize, f64)>,
}

impl TabularMdp {
    /// Builds an MDP from dense tables. Only shapes are checked here; use
    /// [`TabularMdp::validate`] for the probabilistic invariants.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial_dist: Vec<f64>,
        absorbing: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidParameter("n_states must be positive".into()));
        }
        if n_actions == 0 {
            return Err(Error::InvalidParameter("n_actions must be positive".into()));
        }
        let sa = n_states * n_actions;
        if transitions.len() != sa * n_states {
            return Err(Error::dim("transitions", sa * n_states, transitions.len()));
        }
        if rewards.len() != sa {
            return Err(Error::dim("rewards", sa, rewards.len()));
        }
        if initial_dist.len() != n_states {
            return Err(Error::dim("initial_dist", n_states, initial_dist.len()));
        }
        if absorbing.len() != n_states {
            return Err(Error::dim("absorbing", n_states, absorbing.len()));
        }
        let mut row_ptr = Vec::with_capacity(sa + 1);
        let mut successors = Vec::new();
        row_ptr.push(0);
        for row in transitions.chunks_exact(n_states) {
            successors.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| **p != 0.0)
                    .map(|(next, p)| (next, *p)),
            );
            row_ptr.push(successors.len());
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            transitions,
            rewards,
            initial_dist,
            absorbing,
            row_ptr,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Nonzero entries of `P(. | s, a)` as `(next_state, probability)` pairs.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        let row = s * self.n_actions + a;
        &self.successors[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn absorbing(&self) -> &[bool] {
        &self.absorbing
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn reward_range(&self) -> (f64, f64) {
        self.rewards
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }

    /// Same dynamics with a replacement reward table.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        let expected = self.n_states * self.n_actions;
        if rewards.len() != expected {
            return Err(Error::dim("rewards", expected, rewards.len()));
        }
        Ok(Self {
            rewards,
            ..self.clone()
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    /// Checks every invariant and reports all violations, not just the first.
    pub fn validate(&self) -> std::result::Result<(), ValidationReport> {
        let mut violations = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            violations.push(Violation::Gamma { gamma: self.gamma });
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !p.is_finite() || p < 0.0 {
                        violations.push(Violation::BadProbability {
                            state: s,
                            action: a,
                            next,
                            p,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs().is_nan() || (sum - 1.0).abs() > STOCHASTIC_TOL {
                    violations.push(Violation::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                let r = self.reward(s, a);
                if !r.is_finite() {
                    violations.push(Violation::NonFiniteReward {
                        state: s,
                        action: a,
                    });
                }
                if self.absorbing[s] {
                    if row[s] != 1.0 {
                        violations.push(Violation::AbsorbingTransition {
                            state: s,
                            action: a,
                        });
                    }
                    if r != 0.0 {
                        violations.push(Violation::AbsorbingReward {
                            state: s,
                            action: a,
                            reward: r,
                        });
                    }
                }
            }
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                violations.push(Violation::BadInitial { state: s, p });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs().is_nan() || (sum - 1.0).abs() > STOCHASTIC_TOL {
            violations.push(Violation::InitialSum { sum });
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations })
        }
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        self.validate().map_err(Error::InvalidMdp)
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                size: self.n_states,
            });
        }
        Ok(())
    }

    pub(crate) fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                size: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn to_document(&self) -> MdpDocument {
        let mut transitions = Vec::with_capacity(self.successors.len());
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for &(next, p) in self.successors(s, a) {
                    transitions.push((s, a, next, p));
                }
            }
        }
        MdpDocument {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            initial_dist: self.initial_dist.clone(),
            absorbing: (0..self.n_states).filter(|&s| self.absorbing[s]).collect(),
            rewards: self.rewards.clone(),
            transitions,
        }
    }

    pub fn from_document(doc: &MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        let mut transitions = vec![0.0; ns * na * ns];
        for &(s, a, next, p) in &doc.transitions {
            if s >= ns || next >= ns {
                return Err(Error::Document(format!(
                    "transition ({s}, {a}, {next}) has a state index outside 0..{ns}"
                )));
            }
            if a >= na {
                return Err(Error::Document(format!(
                    "transition ({s}, {a}, {next}) has an action index outside 0..{na}"
                )));
            }
            transitions[(s * na + a) * ns + next] = p;
        }
        let mut absorbing = vec![false; ns];
        for &s in &doc.absorbing {
            if s >= ns {
                return Err(Error::Document(format!("absorbing index {s} outside 0..{ns}")));
            }
            absorbing[s] = true;
        }
        Self::new(
            ns,
            na,
            doc.gamma,
            transitions,
            doc.rewards.clone(),
            doc.initial_dist.clone(),
            absorbing,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("MDP documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument =
            serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// Text form of a [`TabularMdp`]. Transitions are listed sparsely as
/// `[s, a, s', p]` quadruples; unlisted entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    pub absorbing: Vec<usize>,
    pub rewards: Vec<f64>,
    pub transitions: Vec<(usize, usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Gamma { gamma: f64 },
    BadProbability { state: usize, action: usize, next: usize, p: f64 },
    RowSum { state: usize, action: usize, sum: f64 },
    NonFiniteReward { state: usize, action: usize },
    AbsorbingTransition { state: usize, action: usize },
    AbsorbingReward { state: usize, action: usize, reward: f64 },
    BadInitial { state: usize, p: f64 },
    InitialSum { sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Gamma { gamma } => write!(f, "gamma = {gamma} is outside [0, 1)"),
            Violation::BadProbability { state, action, next, p } => {
                write!(f, "P({next} | {state}, {action}) = {p} is not a probability")
            }
            Violation::RowSum { state, action, sum } => {
                write!(f, "transition row ({state}, {action}) sums to {sum}")
            }
            Violation::NonFiniteReward { state, action } => {
                write!(f, "reward ({state}, {action}) is not finite")
            }
            Violation::AbsorbingTransition { state, action } => {
                write!(f, "absorbing state {state} does not self-loop under action {action}")
            }
            Violation::AbsorbingReward { state, action, reward } => {
                write!(f, "absorbing state {state} has reward {reward} under action {action}")
            }
            Violation::BadInitial { state, p } => {
                write!(f, "initial probability of state {state} is {p}")
            }
            Violation::InitialSum { sum } => write!(f, "initial distribution sums to {sum}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Row-stochastic state-to-action table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::dim("policy table", n_states * n_actions, probs.len()));
        }
        let policy = Self {
            n_states,
            n_actions,
            probs,
        };
        policy.check_rows()?;
        Ok(policy)
    }

    fn check_rows(&self) -> Result<()> {
        for s in 0..self.n_states {
            let row = self.row(s);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs().is_nan() || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotStochastic {
                    what: "policy",
                    state: s,
                    sum,
                });
            }
        }
        Ok(())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    size: n_actions,
                });
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Expectation of a state-action table row under this policy.
    pub fn expect(&self, s: usize, values: &[f64]) -> f64 {
        self.row(s).iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub(crate) fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states {
            return Err(Error::dim("policy states", n_states, self.n_states));
        }
        if self.n_actions != n_actions {
            return Err(Error::dim("policy actions", n_actions, self.n_actions));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s).iter().copied().enumerate(), rng)
    }
}

/// State-indexed value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn max_abs_diff(&self, other: &ValueTable) -> f64 {
        max_abs_diff(&self.0, &other.0)
    }
}

/// State-action table, row-major over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

/// Discounted step counts share the Q-table layout.
pub type ZTable = QTable;

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::dim("Q-table", n_states * n_actions, values.len()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row_max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index action among those within [`TIE_TOL`] of the row maximum.
    pub fn argmax(&self, s: usize) -> usize {
        let max = self.row_max(s);
        self.row(s)
            .iter()
            .position(|&v| v >= max - TIE_TOL)
            .expect("rows are non-empty")
    }

    /// Keeps the first `n_actions` columns.
    pub fn restrict_actions(&self, n_actions: usize) -> Result<QTable> {
        if n_actions > self.n_actions {
            return Err(Error::dim("restricted actions", self.n_actions, n_actions));
        }
        let values = (0..self.n_states)
            .flat_map(|s| self.row(s)[..n_actions].iter().copied())
            .collect();
        Ok(QTable {
            n_states: self.n_states,
            n_actions,
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }

    pub(crate) fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states {
            return Err(Error::dim("Q-table states", n_states, self.n_states));
        }
        if self.n_actions != n_actions {
            return Err(Error::dim("Q-table actions", n_actions, self.n_actions));
        }
        Ok(())
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Draws an index from `(index, weight)` pairs whose weights sum to one.
pub(crate) fn sample_index<R, I>(weights: I, rng: &mut R) -> usize
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = (usize, f64)>,
{
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum.
    last
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next: usize,
    pub reward: f64,
    pub absorbing: bool,
}

/// Simulates one transition. Absorbing states return `(s, 0, true)` without
/// consuming randomness.
pub fn sample_step<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<Step> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    if mdp.is_absorbing(s) {
        return Ok(Step {
            next: s,
            reward: 0.0,
            absorbing: true,
        });
    }
    let next = sample_index(mdp.successors(s, a).iter().copied(), rng);
    Ok(Step {
        next,
        reward: mdp.reward(s, a),
        absorbing: mdp.is_absorbing(next),
    })
}

/// Draws a start state from the initial distribution.
pub fn sample_initial<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R) -> usize {
    sample_index(mdp.initial_dist().iter().copied().enumerate(), rng)
}
