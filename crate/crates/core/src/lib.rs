//! Tabular lazy-MDPs: augment a finite MDP with a "lazy" action that defers
//! to a default policy at a per-step penalty, solve the result exactly, and
//! measure where control actually matters.

pub mod bounds;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod grid;
pub mod importance;
pub mod lazy;
pub mod learning;
pub mod mdp;
pub mod random;
pub mod solver;

pub use bounds::{eta_bounds, frequency_sweep, EtaBounds, SweepResult, SweepRow};
pub use error::{Error, Result};
pub use grid::{CompiledGrid, GridError, GridParams, GridWorldSpec};
pub use lazy::{LazyGapMap, LazyMdpSpec};
pub use mdp::{QTable, StochasticPolicy, TabularMdp, ValueTable, ZTable};
pub use solver::{solve, LazySolution};
