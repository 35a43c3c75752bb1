//! Penalty thresholds: `eta_max`, above which the optimal lazy policy always
//! defers, and `eta_min`, below which it never does. Both are computed in
//! closed form from base-MDP value functions, and can be checked empirically
//! with [`frequency_sweep`] and [`empirical_thresholds`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, greedy_deterministic};
use crate::fmt::sig;
use crate::lazy::{gap_of_row, project_policy, LazyMdpSpec};
use crate::mdp::{QTable, StochasticPolicy, TabularMdp, ZTable, DEFAULT_MAX_ITERS, TIE_TOL};
use crate::solver;

/// Pairs with `v(s, a) <= -1 + EXCLUSION_TOL` never defer and drop out of `eta_min`.
pub const EXCLUSION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaBounds {
    pub eta_min: f64,
    pub eta_max: f64,
    pub diagnostics: BoundsDiagnostics,
}

/// Per-state terms behind the two bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsDiagnostics {
    /// Lazy-gap of the default policy's own Q-function.
    pub default_gap: Vec<f64>,
    /// `u(s, a) = Q*(s, a) - E_default[Q*(s, .)]`.
    pub u: QTable,
    /// `v(s) = E_{pi*}[Z(s, .)] - E_default[Z(s, .)]`; the same for every action.
    pub v: Vec<f64>,
    /// `max_a u(s, a) / (1 + v(s))`, absent for absorbing or excluded states.
    pub ratio: Vec<Option<f64>>,
    /// States dropped because `v(s) <= -1`.
    pub excluded: Vec<bool>,
    /// Every decision state was excluded; `eta_min` is reported as 0.
    pub all_excluded: bool,
    /// States whose optimal action was chosen among ties; `Z` may depend on the choice.
    pub tied_states: Vec<usize>,
    pub eta_min_state: Option<usize>,
    pub eta_max_state: Option<usize>,
}

impl BoundsDiagnostics {
    pub fn v_at(&self, s: usize, _a: usize) -> f64 {
        self.v[s]
    }

    /// CSV with one row per state.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,default_gap,max_u,v,ratio,excluded\n");
        for s in 0..self.v.len() {
            let max_u = self.u.row_max(s);
            let ratio = self.ratio[s].map(sig).unwrap_or_default();
            out.push_str(&format!(
                "{s},{},{},{},{ratio},{}\n",
                sig(self.default_gap[s]),
                sig(max_u),
                sig(self.v[s]),
                self.excluded[s]
            ));
        }
        out
    }
}

/// Value tables feeding the bound formulas, exact or learned.
#[derive(Debug, Clone, Copy)]
pub struct BoundTables<'a> {
    /// Estimate of the optimal base-MDP `Q*`.
    pub q_star: &'a QTable,
    /// `Z` of the policy below.
    pub z_star: &'a ZTable,
    /// Optimal policy estimate used for the `Z` expectation.
    pub pi_star: &'a StochasticPolicy,
    /// Estimate of the default policy's `Q`, for `eta_max`.
    pub q_default: &'a QTable,
    pub absorbing: &'a [bool],
}

fn check_tables(t: &BoundTables<'_>, default_policy: &StochasticPolicy) -> Result<()> {
    let (ns, na) = (default_policy.n_states(), default_policy.n_actions());
    t.q_star.check_shape(ns, na)?;
    t.z_star.check_shape(ns, na)?;
    t.pi_star.check_shape(ns, na)?;
    t.q_default.check_shape(ns, na)?;
    if t.absorbing.len() != ns {
        return Err(Error::dim("absorbing mask", ns, t.absorbing.len()));
    }
    Ok(())
}

/// Evaluates both bound formulas on the supplied tables.
pub fn estimate_bounds_learned(tables: &BoundTables<'_>, default_policy: &StochasticPolicy) -> Result<EtaBounds> {
    check_tables(tables, default_policy)?;
    let ns = default_policy.n_states();
    let na = default_policy.n_actions();

    let default_gap: Vec<f64> = (0..ns)
        .map(|s| gap_of_row(default_policy.row(s), tables.q_default.row(s)))
        .collect();
    let eta_max_state = (0..ns)
        .filter(|&s| !tables.absorbing[s])
        .max_by(|&a, &b| default_gap[a].total_cmp(&default_gap[b]));
    let eta_max = eta_max_state.map_or(0.0, |s| default_gap[s]);

    let mut u = QTable::zeros(ns, na);
    let mut v = vec![0.0; ns];
    let mut ratio = vec![None; ns];
    let mut excluded = vec![false; ns];
    for s in 0..ns {
        let q_row = tables.q_star.row(s);
        let mean_q = default_policy.expect(s, q_row);
        for (a, &q) in q_row.iter().enumerate() {
            u.set(s, a, q - mean_q);
        }
        let z_row = tables.z_star.row(s);
        v[s] = tables.pi_star.expect(s, z_row) - default_policy.expect(s, z_row);
        if tables.absorbing[s] {
            continue;
        }
        if v[s] <= -1.0 + EXCLUSION_TOL {
            excluded[s] = true;
            continue;
        }
        ratio[s] = Some((u.row_max(s) / (1.0 + v[s])).max(0.0));
    }
    let eta_min_state = (0..ns)
        .filter(|&s| ratio[s].is_some())
        .min_by(|&a, &b| ratio[a].unwrap().total_cmp(&ratio[b].unwrap()));
    let decision_states = tables.absorbing.iter().filter(|&&a| !a).count();
    let all_excluded = decision_states > 0 && eta_min_state.is_none();
    let eta_min = eta_min_state.and_then(|s| ratio[s]).unwrap_or(0.0);

    Ok(EtaBounds {
        eta_min,
        eta_max,
        diagnostics: BoundsDiagnostics {
            default_gap,
            u,
            v,
            ratio,
            excluded,
            all_excluded,
            tied_states: Vec::new(),
            eta_min_state,
            eta_max_state,
        },
    })
}

/// Exact bounds: `Q` of the default by policy evaluation, `Q*` by value
/// iteration, the optimal policy greedy with lowest-index ties, and its `Z`.
pub fn eta_bounds(base: &TabularMdp, default_policy: &StochasticPolicy, tol: f64) -> Result<EtaBounds> {
    base.ensure_valid()?;
    default_policy.check_shape(base.n_states(), base.n_actions())?;
    let q_default = eval::policy_eval_q(base, default_policy, tol)?;
    let q_star = eval::value_iteration(base, tol, DEFAULT_MAX_ITERS)?;
    let pi_star = greedy_deterministic(&q_star);
    let z_star = eval::z_eval(base, &pi_star, tol)?;
    let mut bounds = estimate_bounds_learned(
        &BoundTables {
            q_star: &q_star,
            z_star: &z_star,
            pi_star: &pi_star,
            q_default: &q_default,
            absorbing: base.absorbing(),
        },
        default_policy,
    )?;
    bounds.diagnostics.tied_states = (0..base.n_states())
        .filter(|&s| !base.is_absorbing(s))
        .filter(|&s| {
            let max = q_star.row_max(s);
            q_star.row(s).iter().filter(|&&x| x >= max - TIE_TOL).count() > 1
        })
        .collect();
    Ok(bounds)
}

pub fn eta_max(base: &TabularMdp, default_policy: &StochasticPolicy, tol: f64) -> Result<f64> {
    base.ensure_valid()?;
    let q_default = eval::policy_eval_q(base, default_policy, tol)?;
    Ok((0..base.n_states())
        .filter(|&s| !base.is_absorbing(s))
        .map(|s| gap_of_row(default_policy.row(s), q_default.row(s)))
        .fold(0.0, f64::max))
}

pub fn eta_min(base: &TabularMdp, default_policy: &StochasticPolicy, tol: f64) -> Result<f64> {
    eta_bounds(base, default_policy, tol).map(|b| b.eta_min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    /// Fraction of non-absorbing states where the optimal policy defers.
    pub lazy_frequency: f64,
    pub control_count: usize,
    /// Start-state value of the projected policy in the base MDP, penalty excluded.
    pub score: f64,
    /// Lazy frequency weighted by the discounted state occupancy.
    pub visit_lazy_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "eta,lazy_frequency,control_count,score";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                sig(r.eta),
                sig(r.lazy_frequency),
                r.control_count,
                sig(r.score)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweeps always serialize")
    }
}

/// Solves the lazy-MDP at one penalty and summarizes the optimal policy.
pub fn sweep_point(spec: &LazyMdpSpec, tol: f64) -> Result<SweepRow> {
    let base = spec.base();
    let sol = solver::solve(spec, tol, DEFAULT_MAX_ITERS)?;
    let decision: Vec<usize> = (0..base.n_states()).filter(|&s| !base.is_absorbing(s)).collect();
    let control_count = sol.control_count();
    let lazy_frequency = if decision.is_empty() {
        1.0
    } else {
        1.0 - control_count as f64 / decision.len() as f64
    };
    let pi = project_policy(&sol.pi_plus_star, spec.default_policy())?;
    let score = eval::start_value(base, &eval::policy_eval_v(base, &pi, tol)?);
    let occupancy = eval::discounted_occupancy(base, &pi, tol)?;
    let (lazy_mass, total_mass) = decision.iter().fold((0.0, 0.0), |(l, t), &s| {
        let lazy = if sol.control_mask[s] { 0.0 } else { 1.0 };
        (l + lazy * occupancy[s], t + occupancy[s])
    });
    let visit_lazy_frequency = if total_mass > 0.0 { lazy_mass / total_mass } else { 1.0 };
    Ok(SweepRow {
        eta: spec.eta(),
        lazy_frequency,
        control_count,
        score,
        visit_lazy_frequency,
    })
}

/// Solves the lazy-MDP at every penalty of an ascending grid.
pub fn frequency_sweep(
    base: &TabularMdp,
    default_policy: &StochasticPolicy,
    eta_grid: &[f64],
    tol: f64,
) -> Result<SweepResult> {
    if eta_grid.windows(2).any(|w| matches!(w[0].partial_cmp(&w[1]), None | Some(std::cmp::Ordering::Greater))) {
        return Err(Error::InvalidParameter("eta grid must be sorted ascending".into()));
    }
    let template = LazyMdpSpec::new(base.clone(), default_policy.clone(), 0.0)?;
    let rows = eta_grid
        .par_iter()
        .map(|&eta| {
            template
                .with_eta(eta)
                .and_then(|spec| sweep_point(&spec, tol))
                .map_err(|e| Error::AtEta {
                    eta,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

/// Penalty thresholds located by bisection on solver outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalThresholds {
    /// Supremum of the penalties at which no decision state defers.
    pub never_lazy_below: f64,
    /// Infimum of the penalties at which every state defers.
    pub always_lazy_from: f64,
}

/// Bisects the solver's control count to `precision`. The two predicates are
/// monotone in `eta` on the instances this is meant for; the search assumes it.
///
/// States are classified by comparing the solved lazy-gap with `eta` strictly,
/// without the tie tolerance: near a threshold the gap can move almost in
/// lockstep with `eta`, and a fixed tolerance would then shift the located
/// threshold by up to `TIE_TOL / (1 - slope)`.
pub fn empirical_thresholds(
    base: &TabularMdp,
    default_policy: &StochasticPolicy,
    tol: f64,
    precision: f64,
) -> Result<EmpiricalThresholds> {
    let template = LazyMdpSpec::new(base.clone(), default_policy.clone(), 0.0)?;
    let decision = base.absorbing().iter().filter(|&&a| !a).count();
    // Bisection probes converge on each other, so each solve starts from the last.
    let warm = std::cell::RefCell::new(QTable::zeros(base.n_states(), base.n_actions()));
    let count = |eta: f64| -> Result<usize> {
        let spec = template.with_eta(eta)?;
        let sol = solver::solve_from(&spec, warm.borrow().clone(), tol, DEFAULT_MAX_ITERS).map_err(|e| {
            Error::AtEta {
                eta,
                source: Box::new(e),
            }
        })?;
        let n = sol.gap_star.gaps().iter().filter(|&&g| g > eta).count();
        *warm.borrow_mut() = sol.q_star;
        Ok(n)
    };
    let all_lazy = |eta: f64| count(eta).map(|c| c == 0);
    let never_lazy = |eta: f64| count(eta).map(|c| c == decision);

    let always_lazy_from = if all_lazy(0.0)? {
        0.0
    } else {
        let mut hi = 1.0;
        while !all_lazy(hi)? {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::InvalidParameter("no all-lazy penalty below 1e12".into()));
            }
        }
        let mut lo = 0.0;
        while hi - lo > precision {
            let mid = 0.5 * (lo + hi);
            if all_lazy(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let never_lazy_below = if !never_lazy(0.0)? {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = always_lazy_from.max(precision);
        while hi - lo > precision {
            let mid = 0.5 * (lo + hi);
            if never_lazy(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };

    Ok(EmpiricalThresholds {
        never_lazy_below,
        always_lazy_from,
    })
}
