//! Exact policy evaluation, the Z-function and base-MDP value iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{QTable, StochasticPolicy, TabularMdp, ValueTable, ZTable, DEFAULT_MAX_ITERS, TIE_TOL};

/// How a linear policy-evaluation system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMethod {
    /// Direct LU solve for small state spaces, sparse iteration otherwise.
    #[default]
    Auto,
    Direct,
    Iterative,
}

const DIRECT_LIMIT: usize = 200;

/// The Markov reward process induced by a policy.
struct InducedChain {
    gamma: f64,
    reward: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl InducedChain {
    fn new(mdp: &TabularMdp, pi: &StochasticPolicy, rewards: &[f64]) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut reward = vec![0.0; ns];
        let mut rows = Vec::with_capacity(ns);
        let mut dense = vec![0.0; ns];
        let mut touched = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let p = pi.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                reward[s] += p * rewards[s * na + a];
                for &(next, q) in mdp.successors(s, a) {
                    if dense[next] == 0.0 {
                        touched.push(next);
                    }
                    dense[next] += p * q;
                }
            }
            touched.sort_unstable();
            let row = touched
                .drain(..)
                .map(|next| (next, std::mem::take(&mut dense[next])))
                .collect();
            rows.push(row);
        }
        Self {
            gamma: mdp.gamma(),
            reward,
            rows,
        }
    }

    fn backup(&self, v: &[f64], s: usize) -> f64 {
        self.reward[s] + self.gamma * self.rows[s].iter().map(|&(n, p)| p * v[n]).sum::<f64>()
    }

    fn solve(&self, tol: f64, method: EvalMethod) -> Result<Vec<f64>> {
        let n = self.reward.len();
        let direct = match method {
            EvalMethod::Direct => true,
            EvalMethod::Iterative => false,
            EvalMethod::Auto => n <= DIRECT_LIMIT,
        };
        if direct {
            self.solve_direct()
        } else {
            self.solve_iterative(tol)
        }
    }

    fn solve_direct(&self) -> Result<Vec<f64>> {
        let n = self.reward.len();
        let mut m = DMatrix::<f64>::identity(n, n);
        for (s, row) in self.rows.iter().enumerate() {
            for &(next, p) in row {
                m[(s, next)] -= self.gamma * p;
            }
        }
        let b = DVector::from_column_slice(&self.reward);
        // I - gamma P is strictly diagonally dominant for gamma < 1.
        let x = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidParameter("singular evaluation system".into()))?;
        Ok(x.iter().copied().collect())
    }

    fn solve_iterative(&self, tol: f64) -> Result<Vec<f64>> {
        let n = self.reward.len();
        let mut v = vec![0.0; n];
        let mut next = vec![0.0; n];
        let scale = stopping_scale(self.gamma);
        let mut residual = f64::INFINITY;
        for _ in 0..DEFAULT_MAX_ITERS {
            residual = 0.0;
            for s in 0..n {
                next[s] = self.backup(&v, s);
                residual = f64::max(residual, (next[s] - v[s]).abs());
            }
            std::mem::swap(&mut v, &mut next);
            if residual * scale < tol {
                return Ok(v);
            }
        }
        Err(Error::NonConvergence {
            residual,
            iterations: DEFAULT_MAX_ITERS,
        })
    }
}

/// Multiplier turning a Bellman residual into a bound on the distance to the
/// fixed point of the iterate that follows it.
pub(crate) fn stopping_scale(gamma: f64) -> f64 {
    (gamma / (1.0 - gamma)).max(1.0)
}

fn check_inputs(mdp: &TabularMdp, pi: &StochasticPolicy) -> Result<()> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())
}

/// `V` for an arbitrary state-action reward table under the dynamics of `mdp`.
pub fn evaluate_rewards(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    rewards: &[f64],
    tol: f64,
    method: EvalMethod,
) -> Result<ValueTable> {
    check_inputs(mdp, pi)?;
    let expected = mdp.n_states() * mdp.n_actions();
    if rewards.len() != expected {
        return Err(Error::dim("reward table", expected, rewards.len()));
    }
    InducedChain::new(mdp, pi, rewards)
        .solve(tol, method)
        .map(ValueTable)
}

pub fn policy_eval_v(mdp: &TabularMdp, pi: &StochasticPolicy, tol: f64) -> Result<ValueTable> {
    policy_eval_v_with(mdp, pi, tol, EvalMethod::Auto)
}

pub fn policy_eval_v_with(
    mdp: &TabularMdp,
    pi: &StochasticPolicy,
    tol: f64,
    method: EvalMethod,
) -> Result<ValueTable> {
    evaluate_rewards(mdp, pi, mdp.rewards(), tol, method)
}

/// `Q(s, a) = r(s, a) + gamma E[V(s')]` for a given reward table and `V`.
pub fn q_from_v(mdp: &TabularMdp, rewards: &[f64], v: &[f64]) -> QTable {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let mut q = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let cont: f64 = mdp.successors(s, a).iter().map(|&(n, p)| p * v[n]).sum();
            q.set(s, a, rewards[s * na + a] + gamma * cont);
        }
    }
    q
}

pub fn policy_eval_q(mdp: &TabularMdp, pi: &StochasticPolicy, tol: f64) -> Result<QTable> {
    let v = policy_eval_v(mdp, pi, tol)?;
    Ok(q_from_v(mdp, mdp.rewards(), &v.0))
}

/// Reward table of ones outside the absorbing set.
pub fn unit_rewards(mdp: &TabularMdp) -> Vec<f64> {
    let na = mdp.n_actions();
    (0..mdp.n_states())
        .flat_map(|s| {
            let r = if mdp.is_absorbing(s) { 0.0 } else { 1.0 };
            std::iter::repeat_n(r, na)
        })
        .collect()
}

/// Expected discounted number of steps spent outside the absorbing set.
pub fn z_eval(mdp: &TabularMdp, pi: &StochasticPolicy, tol: f64) -> Result<ZTable> {
    let rewards = unit_rewards(mdp);
    let v = evaluate_rewards(mdp, pi, &rewards, tol, EvalMethod::Auto)?;
    Ok(q_from_v(mdp, &rewards, &v.0))
}

/// One application of the Bellman optimality operator.
pub fn bellman_optimality_step(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    q.check_shape(mdp.n_states(), mdp.n_actions())?;
    let v: Vec<f64> = (0..mdp.n_states()).map(|s| q.row_max(s)).collect();
    Ok(q_from_v(mdp, mdp.rewards(), &v))
}

pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<QTable> {
    value_iteration_traced(mdp, tol, max_iters).map(|(q, _)| q)
}

/// Value iteration from `Q = 0`, also returning the residual of every sweep.
pub fn value_iteration_traced(
    mdp: &TabularMdp,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, Vec<f64>)> {
    mdp.ensure_valid()?;
    let scale = stopping_scale(mdp.gamma());
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let mut residuals = Vec::new();
    for _ in 0..max_iters {
        let next = bellman_optimality_step(mdp, &q)?;
        let residual = next.max_abs_diff(&q);
        residuals.push(residual);
        q = next;
        if residual * scale < tol {
            return Ok((q, residuals));
        }
    }
    Err(Error::NonConvergence {
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        iterations: max_iters,
    })
}

/// Uniform over the actions within [`TIE_TOL`] of the row maximum.
pub fn greedy_from_q(q: &QTable) -> StochasticPolicy {
    let (ns, na) = (q.n_states(), q.n_actions());
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let max = q.row_max(s);
        let ties: Vec<usize> = (0..na).filter(|&a| q.get(s, a) >= max - TIE_TOL).collect();
        let w = 1.0 / ties.len() as f64;
        for a in ties {
            probs[s * na + a] = w;
        }
    }
    StochasticPolicy::new(ns, na, probs).expect("greedy rows are distributions")
}

/// Deterministic greedy policy with lowest-index tie-breaking.
pub fn greedy_deterministic(q: &QTable) -> StochasticPolicy {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| q.argmax(s)).collect();
    StochasticPolicy::deterministic(q.n_actions(), &actions).expect("argmax is in range")
}

/// Pushes a state distribution one step forward under `pi`.
pub fn propagate(mdp: &TabularMdp, pi: &StochasticPolicy, dist: &[f64]) -> Result<Vec<f64>> {
    check_inputs(mdp, pi)?;
    if dist.len() != mdp.n_states() {
        return Err(Error::dim("state distribution", mdp.n_states(), dist.len()));
    }
    let mut out = vec![0.0; mdp.n_states()];
    for (s, &mass) in dist.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for &(next, q) in mdp.successors(s, a) {
                out[next] += mass * p * q;
            }
        }
    }
    Ok(out)
}

/// Normalized discounted state occupancy `(1 - gamma) sum_t gamma^t P(s_t = s)`
/// from the initial distribution.
pub fn discounted_occupancy(mdp: &TabularMdp, pi: &StochasticPolicy, tol: f64) -> Result<Vec<f64>> {
    check_inputs(mdp, pi)?;
    let gamma = mdp.gamma();
    let start: Vec<f64> = mdp.initial_dist().iter().map(|p| (1.0 - gamma) * p).collect();
    let mut d = start.clone();
    for _ in 0..DEFAULT_MAX_ITERS {
        let pushed = propagate(mdp, pi, &d)?;
        let next: Vec<f64> = start.iter().zip(&pushed).map(|(s, p)| s + gamma * p).collect();
        let residual = crate::mdp::max_abs_diff(&next, &d);
        d = next;
        if residual * stopping_scale(gamma) < tol {
            return Ok(d);
        }
    }
    Err(Error::NonConvergence {
        residual: f64::NAN,
        iterations: DEFAULT_MAX_ITERS,
    })
}

/// Expected start-state value `E_{s0 ~ delta0}[V(s0)]`.
pub fn start_value(mdp: &TabularMdp, v: &ValueTable) -> f64 {
    mdp.initial_dist().iter().zip(&v.0).map(|(p, v)| p * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_mdp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_loop(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 2, gamma, vec![1.0, 1.0], vec![reward, reward], vec![1.0], vec![false])
            .unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let mdp = single_loop(1.0, 0.9);
        let pi = StochasticPolicy::uniform(1, 2);
        for method in [EvalMethod::Direct, EvalMethod::Iterative] {
            let v = policy_eval_v_with(&mdp, &pi, 1e-12, method).unwrap();
            assert!((v.0[0] - 10.0).abs() < 1e-10);
        }
        let q = policy_eval_q(&mdp, &pi, 1e-12).unwrap();
        assert!(q.values().iter().all(|x| (x - 10.0).abs() < 1e-10));
    }

    #[test]
    fn absorbing_states_have_zero_value_and_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = random_mdp(&mut rng, 6, 3, 0.9, 2);
        let pi = StochasticPolicy::uniform(6, 3);
        let v = policy_eval_v(&mdp, &pi, 1e-12).unwrap();
        let q = policy_eval_q(&mdp, &pi, 1e-12).unwrap();
        for s in (0..6).filter(|&s| mdp.is_absorbing(s)) {
            assert_eq!(v.0[s], 0.0);
            assert!(q.row(s).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn q_satisfies_one_step_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 8, 3, 0.8, 1);
        let pi = StochasticPolicy::uniform(8, 3);
        let v = policy_eval_v(&mdp, &pi, 1e-12).unwrap();
        let q = policy_eval_q(&mdp, &pi, 1e-12).unwrap();
        for s in 0..8 {
            for a in 0..3 {
                let rhs = mdp.reward(s, a)
                    + mdp.gamma()
                        * mdp.successors(s, a).iter().map(|&(n, p)| p * v.0[n]).sum::<f64>();
                assert!((q.get(s, a) - rhs).abs() < 1e-10);
            }
            assert!((pi.expect(s, q.row(s)) - v.0[s]).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_rejects_mismatched_policy() {
        let mdp = single_loop(1.0, 0.9);
        assert!(matches!(
            policy_eval_v(&mdp, &StochasticPolicy::uniform(2, 2), 1e-10),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn z_without_absorbing_states_is_horizon() {
        let mdp = single_loop(0.0, 0.99);
        let z = z_eval(&mdp, &StochasticPolicy::uniform(1, 2), 1e-12).unwrap();
        assert!(z.values().iter().all(|x| (x - 100.0).abs() < 1e-10));
    }

    #[test]
    fn z_on_three_step_chain() {
        // s0 -> s1 -> s2 -> s3 (absorbing)
        let mut t = vec![0.0; 16];
        for s in 0..3 {
            t[s * 4 + s + 1] = 1.0;
        }
        t[3 * 4 + 3] = 1.0;
        let mdp = TabularMdp::new(4, 1, 0.5, t, vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0], vec![false, false, false, true])
            .unwrap();
        let z = z_eval(&mdp, &StochasticPolicy::uniform(4, 1), 1e-12).unwrap();
        assert!((z.get(0, 0) - 1.75).abs() < 1e-12);
        assert_eq!(z.get(3, 0), 0.0);
    }

    #[test]
    fn value_iteration_on_absorbing_only_mdp() {
        let mdp = TabularMdp::new(1, 2, 0.9, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], vec![true]).unwrap();
        let q = value_iteration(&mdp, 1e-10, 10).unwrap();
        assert!(q.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn value_iteration_two_state_chain() {
        // s0 --a0 (r=1)--> s1 absorbing; a1 stays in s0 with r=0
        let mdp = TabularMdp::new(
            2,
            2,
            0.9,
            vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0],
            vec![false, true],
        )
        .unwrap();
        let q = value_iteration(&mdp, 1e-12, 10_000).unwrap();
        assert!((q.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((q.get(0, 1) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn value_iteration_reports_non_convergence() {
        let mdp = single_loop(1.0, 0.9);
        assert!(matches!(
            value_iteration(&mdp, 1e-10, 3),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn greedy_tie_conventions() {
        let q = QTable::new(3, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.3, 0.3 + 1e-12, 0.0]).unwrap();
        let pi = greedy_from_q(&q);
        assert_eq!(pi.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(pi.row(1), &[0.5, 0.5, 0.0]);
        assert_eq!(pi.row(2), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn discounted_occupancy_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = random_mdp(&mut rng, 7, 2, 0.9, 1);
        let d = discounted_occupancy(&mdp, &StochasticPolicy::uniform(7, 2), 1e-12).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
