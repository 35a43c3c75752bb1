//! Optimal control in lazy-MDPs.
//!
//! The greedy operator works on `Q` over base actions only. At a successor
//! state the greedy choice is worth `max(max_a Q(s', a), E_default[Q(s', .)] + eta_s')`,
//! the larger of acting and deferring, so no augmented table is ever built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::lazy::{self, build_augmented, gap_of_row, lazy_action_value, LazyGapMap, LazyMdpSpec};
use crate::mdp::{QTable, StochasticPolicy, TIE_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazySolution {
    pub eta: f64,
    /// Fixed point of the greedy operator, over base actions.
    pub q_star: QTable,
    /// Optimal policy over the augmented action space.
    pub pi_plus_star: StochasticPolicy,
    pub gap_star: LazyGapMap,
    /// True where the optimal policy takes control.
    pub control_mask: Vec<bool>,
    pub residual: f64,
    pub iterations: usize,
}

impl LazySolution {
    pub fn control_count(&self) -> usize {
        self.control_mask.iter().filter(|&&c| c).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solutions always serialize")
    }
}

/// True when a gap is large enough to justify paying `eta`. Equality, up to
/// [`TIE_TOL`], defers to the lazy action.
pub fn takes_control(gap: f64, eta: f64) -> bool {
    gap > eta + TIE_TOL
}

/// Greedy policy in the lazy-MDP: uniform over the best base actions where
/// the lazy-gap exceeds `eta`, the lazy action otherwise.
pub fn lazy_greedy(q: &QTable, default_policy: &StochasticPolicy, eta: f64) -> Result<StochasticPolicy> {
    let (ns, na) = (default_policy.n_states(), default_policy.n_actions());
    q.check_shape(ns, na)?;
    let nu = na + 1;
    let mut probs = vec![0.0; ns * nu];
    for s in 0..ns {
        let row = q.row(s);
        let out = &mut probs[s * nu..(s + 1) * nu];
        if takes_control(gap_of_row(default_policy.row(s), row), eta) {
            let max = q.row_max(s);
            let ties: Vec<usize> = (0..na).filter(|&a| row[a] >= max - TIE_TOL).collect();
            let w = 1.0 / ties.len() as f64;
            for a in ties {
                out[a] = w;
            }
        } else {
            out[na] = 1.0;
        }
    }
    StochasticPolicy::new(ns, nu, probs)
}

fn greedy_values(q: &QTable, spec: &LazyMdpSpec) -> Vec<f64> {
    (0..spec.n_states())
        .map(|s| {
            let row = q.row(s);
            let act = q.row_max(s);
            let defer = lazy_action_value(spec.default_policy().row(s), row, spec.penalty(s));
            act.max(defer)
        })
        .collect()
}

/// One synchronous application of the greedy operator.
pub fn greedy_operator_step(q: &QTable, spec: &LazyMdpSpec) -> Result<QTable> {
    q.check_shape(spec.n_states(), spec.n_actions())?;
    Ok(lazy::q_excl_from_v_plus(spec, &greedy_values(q, spec)))
}

/// Iterates the greedy operator from `Q = 0` until the distance to the fixed
/// point is certified below `tol`.
pub fn solve(spec: &LazyMdpSpec, tol: f64, max_iters: usize) -> Result<LazySolution> {
    solve_from(spec, QTable::zeros(spec.n_states(), spec.n_actions()), tol, max_iters)
}

/// Like [`solve`], starting from `init`; a solution at a nearby penalty
/// converges in far fewer iterations.
pub fn solve_from(spec: &LazyMdpSpec, init: QTable, tol: f64, max_iters: usize) -> Result<LazySolution> {
    init.check_shape(spec.n_states(), spec.n_actions())?;
    let scale = eval::stopping_scale(spec.base().gamma());
    let mut q = init;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        let next = greedy_operator_step(&q, spec)?;
        residual = next.max_abs_diff(&q);
        q = next;
        iterations += 1;
        if residual * scale < tol {
            return Ok(solution_from_q(spec, q, residual, iterations));
        }
    }
    Err(Error::NonConvergence {
        residual,
        iterations,
    })
}

fn solution_from_q(spec: &LazyMdpSpec, q_star: QTable, residual: f64, iterations: usize) -> LazySolution {
    let default = spec.default_policy();
    let gap_star = lazy::lazy_gap(&q_star, default).expect("shapes checked by the solver");
    let pi_plus_star = lazy_greedy(&q_star, default, spec.eta()).expect("shapes checked by the solver");
    let control_mask = gap_star
        .gaps()
        .iter()
        .map(|&g| takes_control(g, spec.eta()))
        .collect();
    LazySolution {
        eta: spec.eta(),
        q_star,
        pi_plus_star,
        gap_star,
        control_mask,
        residual,
        iterations,
    }
}

/// Standard value iteration on the explicitly augmented MDP.
pub fn oracle_solve(spec: &LazyMdpSpec, tol: f64, max_iters: usize) -> Result<QTable> {
    eval::value_iteration(&build_augmented(spec), tol, max_iters)
}

/// Sorted states where the solution takes control.
pub fn control_set(solution: &LazySolution) -> Vec<usize> {
    solution
        .control_mask
        .iter()
        .enumerate()
        .filter_map(|(s, &c)| c.then_some(s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularMdp;
    use crate::random::random_spec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(rows: &[&[f64]]) -> QTable {
        let na = rows[0].len();
        QTable::new(rows.len(), na, rows.concat()).unwrap()
    }

    #[test]
    fn lazy_greedy_thresholds() {
        let uniform = StochasticPolicy::uniform(1, 2);
        let table = q(&[&[1.0, 0.0]]);
        assert_eq!(lazy_greedy(&table, &uniform, 0.6).unwrap().row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(lazy_greedy(&table, &uniform, 0.4).unwrap().row(0), &[1.0, 0.0, 0.0]);
        // gap == eta defers
        assert_eq!(lazy_greedy(&table, &uniform, 0.5).unwrap().row(0), &[0.0, 0.0, 1.0]);
        let three = q(&[&[1.0, 1.0, 0.0]]);
        let pi = lazy_greedy(&three, &StochasticPolicy::uniform(1, 3), 0.2).unwrap();
        assert_eq!(pi.row(0), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn greedy_step_on_absorbing_only_spec() {
        let base = TabularMdp::new(1, 2, 0.9, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], vec![true]).unwrap();
        let spec = LazyMdpSpec::new(base, StochasticPolicy::uniform(1, 2), 0.0).unwrap();
        let zero = QTable::zeros(1, 2);
        assert_eq!(greedy_operator_step(&zero, &spec).unwrap(), zero);
        let aug = oracle_solve(&spec.with_eta(0.7).unwrap(), 1e-12, 100).unwrap();
        assert!(aug.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_state_fixed_point_matches_hand_algebra() {
        // One state, rewards (1, 0), gamma 0.5, uniform default, eta 0.2.
        // Acting on a0 forever: Q0 = 0.8 + 0.5 V, V = max(Q0, (Q0 + Q1)/2 + 0.2),
        // Q1 = -0.2 + 0.5 V. Gap = (Q0 - Q1)/2 = 0.5 > 0.2, so V = Q0:
        // Q0 = 0.8 / 0.5 = 1.6, Q1 = -0.2 + 0.8 = 0.6.
        let base = TabularMdp::new(1, 2, 0.5, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], vec![false]).unwrap();
        let spec = LazyMdpSpec::new(base, StochasticPolicy::uniform(1, 2), 0.2).unwrap();
        let sol = solve(&spec, 1e-13, 10_000).unwrap();
        assert!((sol.q_star.get(0, 0) - 1.6).abs() < 1e-12);
        assert!((sol.q_star.get(0, 1) - 0.6).abs() < 1e-12);
        assert_eq!(control_set(&sol), vec![0]);

        // eta 0.6 > gap: deferring forever earns 0.5 per step, V = 1.0;
        // Q0 = 1 - 0.6 + 0.5 = 0.9, Q1 = -0.6 + 0.5 = -0.1, gap 0.5 <= 0.6.
        let sol = solve(&spec.with_eta(0.6).unwrap(), 1e-13, 10_000).unwrap();
        assert!((sol.q_star.get(0, 0) - 0.9).abs() < 1e-12);
        assert!((sol.q_star.get(0, 1) + 0.1).abs() < 1e-12);
        assert!(control_set(&sol).is_empty());
        assert_eq!(sol.pi_plus_star.row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn operator_is_a_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let spec = random_spec(&mut rng, 8, 4);
            let (ns, na) = (spec.n_states(), spec.n_actions());
            let mut random_q = || {
                QTable::new(ns, na, (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
            };
            let (q1, q2) = (random_q(), random_q());
            let lhs = greedy_operator_step(&q1, &spec)
                .unwrap()
                .max_abs_diff(&greedy_operator_step(&q2, &spec).unwrap());
            assert!(lhs <= spec.base().gamma() * q1.max_abs_diff(&q2) + 1e-12);
        }
    }

    #[test]
    fn solution_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let spec = random_spec(&mut rng, 10, 4);
            let sol = solve(&spec, 1e-11, 100_000).unwrap();
            let na = spec.n_actions();
            for s in 0..spec.n_states() {
                let lazy = sol.pi_plus_star.prob(s, na);
                assert_eq!(sol.control_mask[s], lazy == 0.0);
                assert_eq!(sol.control_mask[s], lazy != 1.0);
                assert_eq!(sol.control_mask[s], sol.gap_star.gaps()[s] > spec.eta() + TIE_TOL);
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = random_spec(&mut rng, 6, 3);
        match solve(&spec, 1e-12, 1) {
            Err(Error::NonConvergence { iterations: 1, residual }) => assert!(residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_penalty_lazy_action_never_beats_best_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let spec = random_spec(&mut rng, 8, 3);
            let ns = spec.n_states();
            let uniform = StochasticPolicy::uniform(ns, spec.n_actions());
            let spec = LazyMdpSpec::new(spec.base().clone(), uniform, 0.0).unwrap();
            let aug = oracle_solve(&spec, 1e-12, 100_000).unwrap();
            let base = eval::value_iteration(spec.base(), 1e-12, 100_000).unwrap();
            for s in 0..ns {
                assert!((aug.row_max(s) - base.row_max(s)).abs() < 1e-9);
            }
        }
    }
}
