//! State-importance measures compared against the lazy-gap.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fmt::sig;
use crate::grid::CompiledGrid;
use crate::lazy::LazyMdpSpec;
use crate::mdp::{QTable, DEFAULT_MAX_ITERS, TIE_TOL};
use crate::solver;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub measure: String,
    /// Penalty the map was computed at, for lazy-gap maps.
    pub eta: Option<f64>,
    pub values: Vec<f64>,
}

impl ImportanceMap {
    /// States whose importance exceeds `threshold` by more than the tie tolerance.
    pub fn support(&self, threshold: f64) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&s| self.values[s] > threshold + TIE_TOL)
            .collect()
    }

    /// The natural support: above `eta` for lazy-gap maps, above zero otherwise.
    pub fn active_support(&self) -> Vec<usize> {
        self.support(self.eta.unwrap_or(0.0))
    }

    /// CSV with header `state,row,col,has_key,door_open,value`.
    pub fn to_csv(&self, grid: &CompiledGrid) -> String {
        let mut out = String::from("state,row,col,has_key,door_open,value\n");
        for (s, &v) in self.values.iter().enumerate() {
            let st = grid.state(s);
            out.push_str(&format!(
                "{s},{},{},{},{},{}\n",
                st.row,
                st.col,
                st.has_key,
                st.door_open,
                sig(v)
            ));
        }
        out
    }
}

fn per_state(measure: &str, q: &QTable, f: impl Fn(&[f64]) -> f64) -> ImportanceMap {
    ImportanceMap {
        measure: measure.into(),
        eta: None,
        values: (0..q.n_states()).map(|s| f(q.row(s))).collect(),
    }
}

/// Best minus second-best action value; zero with a single action.
pub fn action_gap(q: &QTable) -> ImportanceMap {
    per_state("action_gap", q, |row| {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.as_slice() {
            [best, second, ..] => best - second,
            _ => 0.0,
        }
    })
}

/// Best minus worst action value.
pub fn importance_advice(q: &QTable) -> ImportanceMap {
    per_state("importance_advice", q, |row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    })
}

/// Lazy-gap of the optimal lazy-MDP solution at the spec's penalty.
pub fn lazy_gap_importance(spec: &LazyMdpSpec, tol: f64) -> Result<ImportanceMap> {
    let sol = solver::solve(spec, tol, DEFAULT_MAX_ITERS)?;
    Ok(ImportanceMap {
        measure: "lazy_gap".into(),
        eta: Some(spec.eta()),
        values: sol.gap_star.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_on_a_row() {
        let q = QTable::new(2, 4, vec![3.0, 1.0, 3.0, 0.0, 4.0, 2.0, 1.0, -1.0]).unwrap();
        assert_eq!(action_gap(&q).values, vec![0.0, 2.0]);
        assert_eq!(importance_advice(&q).values, vec![3.0, 5.0]);
        assert_eq!(action_gap(&q).support(0.0), vec![1]);
    }

    #[test]
    fn single_action_is_unimportant() {
        let q = QTable::new(2, 1, vec![7.0, -2.0]).unwrap();
        assert_eq!(action_gap(&q).values, vec![0.0, 0.0]);
        assert_eq!(importance_advice(&q).values, vec![0.0, 0.0]);
    }
}
