//! The lazy-MDP construction and the quantities derived from it: policy
//! projection, the penalty cost function, `Q` excluding the lazy action, the
//! augmented `Q_+` and the lazy-gap.
//!
//! Absorbing states carry no penalty. Every formula here charges
//! `eta_s = eta * 1{s not absorbing}` so that the augmented MDP keeps zero
//! rewards on its absorbing rows and all identities hold on every entry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalMethod};
use crate::mdp::{MdpDocument, QTable, StochasticPolicy, TabularMdp, ValueTable, STOCHASTIC_TOL, TIE_TOL};

/// A base MDP, a default policy over its actions and a penalty for acting.
/// The lazy action is the index `base.n_actions()` of the augmented space.
#[derive(Debug, Clone, PartialEq)]
pub struct LazyMdpSpec {
    base: TabularMdp,
    default_policy: StochasticPolicy,
    eta: f64,
}

impl LazyMdpSpec {
    pub fn new(base: TabularMdp, default_policy: StochasticPolicy, eta: f64) -> Result<Self> {
        base.ensure_valid()?;
        default_policy.check_shape(base.n_states(), base.n_actions())?;
        if eta.is_nan() || eta < 0.0 || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be finite and >= 0, got {eta}")));
        }
        Ok(Self {
            base,
            default_policy,
            eta,
        })
    }

    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn default_policy(&self) -> &StochasticPolicy {
        &self.default_policy
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lazy_action(&self) -> usize {
        self.base.n_actions()
    }

    pub fn n_states(&self) -> usize {
        self.base.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    /// Penalty charged for a non-lazy action in state `s`.
    pub fn penalty(&self, s: usize) -> f64 {
        if self.base.is_absorbing(s) {
            0.0
        } else {
            self.eta
        }
    }

    /// Same base MDP and default policy with another penalty.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if eta.is_nan() || eta < 0.0 || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be finite and >= 0, got {eta}")));
        }
        Ok(Self {
            eta,
            ..self.clone()
        })
    }

    pub fn to_document(&self) -> LazySpecDocument {
        LazySpecDocument {
            mdp: self.base.to_document(),
            default_policy: self.default_policy.probs().to_vec(),
            eta: self.eta,
        }
    }

    pub fn from_document(doc: &LazySpecDocument) -> Result<Self> {
        let base = TabularMdp::from_document(&doc.mdp)?;
        let default =
            StochasticPolicy::new(base.n_states(), base.n_actions(), doc.default_policy.clone())?;
        Self::new(base, default, doc.eta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("spec documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LazySpecDocument =
            serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// The MDP document fields plus `default_policy` (row-major) and `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazySpecDocument {
    #[serde(flatten)]
    pub mdp: MdpDocument,
    pub default_policy: Vec<f64>,
    pub eta: f64,
}

/// Per-state lazy-gap `max_a Q(s, a) - E_{default}[Q(s, .)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LazyGapMap(pub Vec<f64>);

impl LazyGapMap {
    pub fn gaps(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// The lazy-MDP as an ordinary MDP with one extra action.
pub fn build_augmented(spec: &LazyMdpSpec) -> TabularMdp {
    let base = &spec.base;
    let (ns, na) = (base.n_states(), base.n_actions());
    let nu = na + 1;
    let mut transitions = vec![0.0; ns * nu * ns];
    let mut rewards = vec![0.0; ns * nu];
    for s in 0..ns {
        let penalty = spec.penalty(s);
        for a in 0..na {
            let dst = (s * nu + a) * ns;
            transitions[dst..dst + ns].copy_from_slice(base.transition_row(s, a));
            rewards[s * nu + a] = base.reward(s, a) - penalty;
        }
        let lazy = (s * nu + na) * ns;
        if base.is_absorbing(s) {
            // Mixing self-loops can round below 1.
            transitions[lazy + s] = 1.0;
            continue;
        }
        for a in 0..na {
            let w = spec.default_policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for &(next, p) in base.successors(s, a) {
                transitions[lazy + next] += w * p;
            }
            rewards[s * nu + na] += w * base.reward(s, a);
        }
    }
    TabularMdp::new(
        ns,
        nu,
        base.gamma(),
        transitions,
        rewards,
        base.initial_dist().to_vec(),
        base.absorbing().to_vec(),
    )
    .expect("augmented shapes follow from the base MDP")
}

fn check_augmented(pi_plus: &StochasticPolicy, spec: &LazyMdpSpec) -> Result<()> {
    pi_plus.check_shape(spec.n_states(), spec.n_actions() + 1)
}

/// The base policy executed by an augmented policy once the lazy action is
/// replaced by the default: `pi(a|s) = pi_+(a|s) + pi_+(lazy|s) default(a|s)`.
pub fn project_policy(
    pi_plus: &StochasticPolicy,
    default_policy: &StochasticPolicy,
) -> Result<StochasticPolicy> {
    let (ns, na) = (default_policy.n_states(), default_policy.n_actions());
    pi_plus.check_shape(ns, na + 1)?;
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let lazy = pi_plus.prob(s, na);
        probs.extend((0..na).map(|a| pi_plus.prob(s, a) + lazy * default_policy.prob(s, a)));
    }
    StochasticPolicy::new(ns, na, probs)
}

/// Conditional policy given that the lazy action is not taken.
pub fn strip_lazy(pi_plus: &StochasticPolicy) -> Result<StochasticPolicy> {
    let na = pi_plus.n_actions().checked_sub(1).filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidParameter("augmented policy needs at least two actions".into())
    })?;
    let ns = pi_plus.n_states();
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let active = 1.0 - pi_plus.prob(s, na);
        if active <= STOCHASTIC_TOL {
            return Err(Error::UndefinedRow { state: s });
        }
        probs.extend((0..na).map(|a| pi_plus.prob(s, a) / active));
    }
    StochasticPolicy::new(ns, na, probs)
}

/// Expected discounted penalty `C^{pi_+}` paid by an augmented policy.
pub fn cost_eval(spec: &LazyMdpSpec, pi_plus: &StochasticPolicy, tol: f64) -> Result<ValueTable> {
    check_augmented(pi_plus, spec)?;
    let pi = project_policy(pi_plus, &spec.default_policy)?;
    let (ns, na) = (spec.n_states(), spec.n_actions());
    let rewards: Vec<f64> = (0..ns)
        .flat_map(|s| {
            let c = -spec.penalty(s) * (1.0 - pi_plus.prob(s, na));
            std::iter::repeat_n(c, na)
        })
        .collect();
    eval::evaluate_rewards(&spec.base, &pi, &rewards, tol, EvalMethod::Auto)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedValue {
    /// `V_+^{pi_+}` in the lazy-MDP.
    pub v_plus: ValueTable,
    /// `V^pi` of the projected policy in the base MDP.
    pub v_pi: ValueTable,
    /// `C^{pi_+}`.
    pub cost: ValueTable,
}

/// `V_+ = V^pi + C`, computed from the base MDP only.
pub fn v_plus_decomposed(
    spec: &LazyMdpSpec,
    pi_plus: &StochasticPolicy,
    tol: f64,
) -> Result<DecomposedValue> {
    check_augmented(pi_plus, spec)?;
    let pi = project_policy(pi_plus, &spec.default_policy)?;
    let v_pi = eval::policy_eval_v(&spec.base, &pi, tol)?;
    let cost = cost_eval(spec, pi_plus, tol)?;
    let v_plus = ValueTable(v_pi.0.iter().zip(&cost.0).map(|(v, c)| v + c).collect());
    Ok(DecomposedValue { v_plus, v_pi, cost })
}

/// Value of acting now with a concrete action and following `pi_+` afterwards.
pub fn q_excl_lazy(spec: &LazyMdpSpec, pi_plus: &StochasticPolicy, tol: f64) -> Result<QTable> {
    let v_plus = v_plus_decomposed(spec, pi_plus, tol)?.v_plus;
    Ok(q_excl_from_v_plus(spec, &v_plus.0))
}

pub(crate) fn q_excl_from_v_plus(spec: &LazyMdpSpec, v_plus: &[f64]) -> QTable {
    let base = &spec.base;
    let rewards: Vec<f64> = (0..base.n_states())
        .flat_map(|s| (0..base.n_actions()).map(move |a| base.reward(s, a) - spec.penalty(s)))
        .collect();
    eval::q_from_v(base, &rewards, v_plus)
}

/// Augmented `Q_+`: equal to `Q_excl` on base actions, and
/// `E_default[Q_excl(s, .)] + eta_s` on the lazy action.
pub fn q_plus_from_q_excl(q_excl: &QTable, spec: &LazyMdpSpec) -> Result<QTable> {
    let (ns, na) = (spec.n_states(), spec.n_actions());
    q_excl.check_shape(ns, na)?;
    let mut out = QTable::zeros(ns, na + 1);
    for s in 0..ns {
        let row = q_excl.row(s);
        out.row_mut(s)[..na].copy_from_slice(row);
        out.set(s, na, lazy_action_value(spec.default_policy.row(s), row, spec.penalty(s)));
    }
    Ok(out)
}

pub(crate) fn lazy_action_value(default_row: &[f64], q_row: &[f64], penalty: f64) -> f64 {
    default_row.iter().zip(q_row).map(|(p, q)| p * q).sum::<f64>() + penalty
}

pub(crate) fn gap_of_row(default_row: &[f64], q_row: &[f64]) -> f64 {
    let max = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean: f64 = default_row.iter().zip(q_row).map(|(p, q)| p * q).sum();
    let gap = max - mean;
    if gap < TIE_TOL {
        0.0
    } else {
        gap
    }
}

/// Lazy-gap of a base-action Q-table. Gaps below the tie tolerance are
/// reported as exactly zero.
pub fn lazy_gap(q: &QTable, default_policy: &StochasticPolicy) -> Result<LazyGapMap> {
    q.check_shape(default_policy.n_states(), default_policy.n_actions())?;
    Ok(LazyGapMap(
        (0..q.n_states())
            .map(|s| gap_of_row(default_policy.row(s), q.row(s)))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_augmented_policy, random_spec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state(rewards: Vec<f64>, gamma: f64, eta: f64, default: Vec<f64>) -> LazyMdpSpec {
        let na = rewards.len();
        let base = TabularMdp::new(1, na, gamma, vec![1.0; na], rewards, vec![1.0], vec![false]).unwrap();
        let default = StochasticPolicy::new(1, na, default).unwrap();
        LazyMdpSpec::new(base, default, eta).unwrap()
    }

    #[test]
    fn augmented_rewards() {
        let spec = one_state(vec![0.0, 1.0], 0.9, 0.1, vec![0.5, 0.5]);
        let aug = build_augmented(&spec);
        assert_eq!(aug.n_actions(), 3);
        assert!((aug.reward(0, 2) - 0.5).abs() < 1e-15);
        assert!((aug.reward(0, 1) - 0.9).abs() < 1e-15);
        assert!((aug.reward(0, 0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn augmented_mdp_is_valid_and_lazy_rows_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let spec = random_spec(&mut rng, 10, 4);
            let aug = build_augmented(&spec);
            aug.validate().unwrap();
            for s in 0..spec.n_states() {
                let sum: f64 = aug.transition_row(s, spec.lazy_action()).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = TabularMdp::new(1, 2, 0.9, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], vec![false]).unwrap();
        let default = StochasticPolicy::uniform(1, 2);
        assert!(LazyMdpSpec::new(base.clone(), default.clone(), -0.1).is_err());
        assert!(LazyMdpSpec::new(base.clone(), StochasticPolicy::uniform(1, 3), 0.1).is_err());
        let broken = base.with_gamma(1.0);
        assert!(matches!(LazyMdpSpec::new(broken, default, 0.1), Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn projection_cases() {
        let default = StochasticPolicy::new(3, 2, vec![0.5, 0.5, 0.3, 0.7, 0.5, 0.5]).unwrap();
        let pi_plus = StochasticPolicy::new(3, 3, vec![0.0, 0.0, 1.0, 0.2, 0.8, 0.0, 0.5, 0.0, 0.5]).unwrap();
        let pi = project_policy(&pi_plus, &default).unwrap();
        assert_eq!(pi.row(0), &[0.5, 0.5]);
        assert_eq!(pi.row(1), &[0.2, 0.8]);
        assert_eq!(pi.row(2), &[0.75, 0.25]);
    }

    #[test]
    fn strip_lazy_cases() {
        let pi_plus = StochasticPolicy::new(2, 3, vec![0.2, 0.3, 0.5, 0.4, 0.6, 0.0]).unwrap();
        let pi = strip_lazy(&pi_plus).unwrap();
        assert!((pi.prob(0, 0) - 0.4).abs() < 1e-15 && (pi.prob(0, 1) - 0.6).abs() < 1e-15);
        assert_eq!(pi.row(1), &[0.4, 0.6]);
        let lazy = StochasticPolicy::new(2, 3, vec![0.2, 0.8, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(strip_lazy(&lazy), Err(Error::UndefinedRow { state: 1 })));
    }

    #[test]
    fn cost_of_always_lazy_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_spec(&mut rng, 8, 3);
        let ns = spec.n_states();
        let na = spec.n_actions();
        let lazy = StochasticPolicy::deterministic(na + 1, &vec![na; ns]).unwrap();
        let c = cost_eval(&spec, &lazy, 1e-12).unwrap();
        assert!(c.0.iter().all(|&x| x == 0.0));
        let d = v_plus_decomposed(&spec, &lazy, 1e-12).unwrap();
        let v_default = eval::policy_eval_v(spec.base(), spec.default_policy(), 1e-12).unwrap();
        assert!(d.v_plus.max_abs_diff(&v_default) < 1e-12);
    }

    #[test]
    fn cost_of_never_lazy_without_absorption() {
        let spec = one_state(vec![1.0, 0.0], 0.9, 0.2, vec![0.5, 0.5]);
        let active = StochasticPolicy::new(1, 3, vec![0.5, 0.5, 0.0]).unwrap();
        let c = cost_eval(&spec, &active, 1e-12).unwrap();
        assert!((c.0[0] + 0.2 / 0.1).abs() < 1e-12);
        let d = v_plus_decomposed(&spec, &active, 1e-12).unwrap();
        // V^{pi_excl} = 0.5 / 0.1
        assert!((d.v_plus.0[0] - (5.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn cost_of_half_lazy_self_loop() {
        let spec = one_state(vec![0.0, 0.0], 0.5, 0.1, vec![0.5, 0.5]);
        let half = StochasticPolicy::new(1, 3, vec![0.5, 0.0, 0.5]).unwrap();
        let c = cost_eval(&spec, &half, 1e-12).unwrap();
        assert!((c.0[0] + 0.1).abs() < 1e-14);
    }

    #[test]
    fn q_excl_at_absorbing_state_is_zero() {
        let base = TabularMdp::new(
            2,
            2,
            0.9,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0],
            vec![false, true],
        )
        .unwrap();
        let spec = LazyMdpSpec::new(base, StochasticPolicy::uniform(2, 2), 0.3).unwrap();
        let pi_plus = StochasticPolicy::uniform(2, 3);
        let q = q_excl_lazy(&spec, &pi_plus, 1e-12).unwrap();
        assert_eq!(q.row(1), &[0.0, 0.0]);
        assert!((q.get(0, 0) - 0.7).abs() < 1e-12);
        let q_plus = q_plus_from_q_excl(&q, &spec).unwrap();
        assert_eq!(q_plus.get(1, 2), 0.0);
    }

    #[test]
    fn q_excl_with_zero_penalty_and_lazy_policy_is_default_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = random_spec(&mut rng, 8, 3).with_eta(0.0).unwrap();
        let (ns, na) = (spec.n_states(), spec.n_actions());
        let lazy = StochasticPolicy::deterministic(na + 1, &vec![na; ns]).unwrap();
        let q = q_excl_lazy(&spec, &lazy, 1e-12).unwrap();
        let q_default = eval::policy_eval_q(spec.base(), spec.default_policy(), 1e-12).unwrap();
        assert!(q.max_abs_diff(&q_default) < 1e-10);
    }

    #[test]
    fn q_plus_lazy_column() {
        let spec = one_state(vec![0.0, 0.0], 0.9, 0.0, vec![0.5, 0.5]);
        let q = QTable::new(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(q_plus_from_q_excl(&q, &spec).unwrap().row(0), &[1.0, 3.0, 2.0]);
        let spec = one_state(vec![0.0, 0.0], 0.9, 0.5, vec![1.0, 0.0]);
        assert_eq!(q_plus_from_q_excl(&q, &spec).unwrap().get(0, 2), 1.5);
    }

    #[test]
    fn prop1_identity_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let spec = random_spec(&mut rng, 8, 3);
            let (ns, na) = (spec.n_states(), spec.n_actions());
            let pi_plus = random_augmented_policy(&mut rng, ns, na);
            let v_plus = v_plus_decomposed(&spec, &pi_plus, 1e-12).unwrap().v_plus;
            let q_excl = q_excl_lazy(&spec, &pi_plus, 1e-12).unwrap();
            for s in 0..ns {
                let lazy = pi_plus.prob(s, na);
                // (1 - lazy) E_{pi_excl}[Q_excl] written without the division
                let active_part: f64 = (0..na).map(|a| pi_plus.prob(s, a) * q_excl.get(s, a)).sum();
                let lazy_part =
                    lazy * lazy_action_value(spec.default_policy().row(s), q_excl.row(s), spec.penalty(s));
                assert!((v_plus.0[s] - active_part - lazy_part).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gap_cases() {
        let uniform = StochasticPolicy::uniform(1, 2);
        let constant = QTable::new(1, 2, vec![2.0, 2.0]).unwrap();
        assert_eq!(lazy_gap(&constant, &uniform).unwrap().0, vec![0.0]);
        let q = QTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(lazy_gap(&q, &uniform).unwrap().0, vec![0.5]);
        let on_argmax = StochasticPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(lazy_gap(&q, &on_argmax).unwrap().0, vec![0.0]);
    }

    #[test]
    fn spec_document_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = random_spec(&mut rng, 6, 3);
        assert_eq!(LazyMdpSpec::from_json(&spec.to_json()).unwrap(), spec);
    }
}
