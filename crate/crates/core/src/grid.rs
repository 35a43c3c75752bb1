//! Text-map gridworlds: Rivers & Bridges, Key-Door-Treasure and its apple
//! variant, compiled to [`TabularMdp`]s over `(row, col, has_key, door_open)`.
//!
//! A map file is a block of optional `key=value` header lines followed by the
//! grid itself, one row per line:
//!
//! ```text
//! gamma=0.9
//! water_reward=-100
//! #######
//! #S.~.G#
//! #..=..#
//! #######
//! ```
//!
//! Legend: `#` wall, `.` floor, `S` start, `G` goal, `~` water, `=` bridge,
//! `K` key, `D` door, `A` apple.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::eval;
use crate::mdp::{QTable, StochasticPolicy, TabularMdp, DEFAULT_MAX_ITERS, TIE_TOL};

pub const MAX_STATES: usize = 1_000_000;
/// Largest dense transition tensor `compile` will allocate, in entries.
pub const MAX_DENSE_ENTRIES: usize = 1 << 28;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const N_ACTIONS: usize = 4;
pub const ACTION_NAMES: [&str; N_ACTIONS] = ["up", "down", "left", "right"];
const MOVES: [(isize, isize); N_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

pub const RIVERS_BRIDGES_MAP: &str = include_str!("../maps/rivers_bridges.map");
pub const KDT_MAP: &str = include_str!("../maps/kdt.map");
pub const KDT_APPLE_MAP: &str = include_str!("../maps/kdt_apple.map");

/// Canonical map text by file stem.
pub fn canonical_map(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".map") {
        "rivers_bridges" => Some(RIVERS_BRIDGES_MAP),
        "kdt" => Some(KDT_MAP),
        "kdt_apple" => Some(KDT_APPLE_MAP),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Wall,
    Floor,
    Start,
    Goal,
    Water,
    Bridge,
    Key,
    Door,
    Apple,
}

impl Cell {
    pub fn from_char(c: char) -> Option<Cell> {
        Some(match c {
            '#' => Cell::Wall,
            '.' => Cell::Floor,
            'S' => Cell::Start,
            'G' => Cell::Goal,
            '~' => Cell::Water,
            '=' => Cell::Bridge,
            'K' => Cell::Key,
            'D' => Cell::Door,
            'A' => Cell::Apple,
            _ => return None,
        })
    }

    pub fn to_char(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Floor => '.',
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Water => '~',
            Cell::Bridge => '=',
            Cell::Key => 'K',
            Cell::Door => 'D',
            Cell::Apple => 'A',
        }
    }

    /// Entering this cell ends the episode.
    pub fn is_terminal(self) -> bool {
        matches!(self, Cell::Goal | Cell::Water | Cell::Apple)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub step_reward: f64,
    pub water_reward: f64,
    pub goal_reward: f64,
    pub apple_reward: f64,
    pub gamma: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            step_reward: 0.0,
            water_reward: -100.0,
            goal_reward: 1.0,
            apple_reward: 0.1,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IssueKind {
    EmptyMap,
    UnknownChar(char),
    Ragged { expected: usize, found: usize },
    NoStart,
    ExtraStart,
    NoGoal,
    OpenBorder(char),
    BadHeader(String),
}

/// One problem found while parsing a map; positions are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct MapIssue {
    pub line: usize,
    pub column: Option<usize>,
    pub kind: IssueKind,
}

impl fmt::Display for MapIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}", self.line)?;
        if let Some(col) = self.column {
            write!(f, ", column {col}")?;
        }
        write!(f, ": ")?;
        match &self.kind {
            IssueKind::EmptyMap => write!(f, "map has no grid rows"),
            IssueKind::UnknownChar(c) => write!(f, "unknown character {c:?}"),
            IssueKind::Ragged { expected, found } => write!(f, "row has {found} cells, expected {expected}"),
            IssueKind::NoStart => write!(f, "no start cell 'S'"),
            IssueKind::ExtraStart => write!(f, "second start cell 'S'"),
            IssueKind::NoGoal => write!(f, "no goal cell 'G'"),
            IssueKind::OpenBorder(c) => write!(f, "border cell {c:?} must be wall or water"),
            IssueKind::BadHeader(msg) => write!(f, "{msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("invalid map:{}", .0.iter().map(|i| format!("\n  {i}")).collect::<String>())]
    Invalid(Vec<MapIssue>),

    #[error("state space exceeds {limit} states")]
    TooManyStates { limit: usize },

    #[error("mask covers {found} states, grid has {expected}")]
    MaskShape { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldSpec {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    pub params: GridParams,
}

impl GridWorldSpec {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn start(&self) -> (usize, usize) {
        let i = self.cells.iter().position(|&c| c == Cell::Start).expect("validated");
        (i / self.cols, i % self.cols)
    }

    /// Cells of the given kind, row-major.
    pub fn cells_of(&self, kind: Cell) -> Vec<(usize, usize)> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i] == kind)
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    /// Passable cells walled on two opposite sides: the gaps between rooms.
    pub fn doorways(&self) -> Vec<(usize, usize)> {
        let wall = |r: usize, c: usize| self.cell(r, c) == Cell::Wall;
        let mut out = Vec::new();
        for r in 1..self.rows.saturating_sub(1) {
            for c in 1..self.cols.saturating_sub(1) {
                if !wall(r, c) && ((wall(r - 1, c) && wall(r + 1, c)) || (wall(r, c - 1) && wall(r, c + 1))) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Map text with a header reproducing the parameters.
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "gamma={}\nstep_reward={}\nwater_reward={}\ngoal_reward={}\napple_reward={}\n",
            p.gamma, p.step_reward, p.water_reward, p.goal_reward, p.apple_reward
        );
        for row in self.cells.chunks(self.cols) {
            out.extend(row.iter().map(|c| c.to_char()));
            out.push('\n');
        }
        out
    }
}

fn is_header(line: &str) -> bool {
    match line.split_once('=') {
        Some((key, _)) => !key.is_empty() && key.chars().all(|c| c.is_ascii_lowercase() || c == '_'),
        None => false,
    }
}

fn apply_header(params: &mut GridParams, line: &str) -> std::result::Result<(), String> {
    let (key, value) = line.split_once('=').expect("checked by is_header");
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("value of {key:?} is not a number"))?;
    if !value.is_finite() {
        return Err(format!("value of {key:?} is not finite"));
    }
    let slot = match key {
        "gamma" => &mut params.gamma,
        "step_reward" => &mut params.step_reward,
        "water_reward" => &mut params.water_reward,
        "goal_reward" => &mut params.goal_reward,
        "apple_reward" => &mut params.apple_reward,
        _ => return Err(format!("unknown header key {key:?}")),
    };
    *slot = value;
    Ok(())
}

/// Parses map text. Header values override `params`; every problem found is
/// reported, not only the first.
pub fn parse_grid(text: &str, params: &GridParams) -> std::result::Result<GridWorldSpec, GridError> {
    let mut params = *params;
    let mut issues = Vec::new();
    let mut grid: Vec<(usize, Vec<char>)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if grid.is_empty() && is_header(line) {
            if let Err(msg) = apply_header(&mut params, line) {
                issues.push(MapIssue {
                    line: line_no,
                    column: None,
                    kind: IssueKind::BadHeader(msg),
                });
            }
            continue;
        }
        grid.push((line_no, line.chars().collect()));
    }
    if !(params.gamma >= 0.0 && params.gamma < 1.0) {
        issues.push(MapIssue {
            line: 1,
            column: None,
            kind: IssueKind::BadHeader(format!("gamma {} outside [0, 1)", params.gamma)),
        });
    }
    let Some((first_line, first)) = grid.first() else {
        issues.push(MapIssue {
            line: 1,
            column: None,
            kind: IssueKind::EmptyMap,
        });
        return Err(GridError::Invalid(issues));
    };
    let (first_line, cols) = (*first_line, first.len());

    let mut cells = Vec::with_capacity(grid.len() * cols);
    let mut starts = 0;
    let mut goals = 0;
    let n_rows = grid.len();
    for (r, (line_no, chars)) in grid.iter().enumerate() {
        if chars.len() != cols {
            issues.push(MapIssue {
                line: *line_no,
                column: None,
                kind: IssueKind::Ragged {
                    expected: cols,
                    found: chars.len(),
                },
            });
        }
        for c in 0..cols {
            let ch = chars.get(c).copied().unwrap_or('#');
            let at = |kind| MapIssue {
                line: *line_no,
                column: Some(c + 1),
                kind,
            };
            let cell = match Cell::from_char(ch) {
                Some(cell) => cell,
                None => {
                    issues.push(at(IssueKind::UnknownChar(ch)));
                    Cell::Wall
                }
            };
            match cell {
                Cell::Start => {
                    starts += 1;
                    if starts > 1 {
                        issues.push(at(IssueKind::ExtraStart));
                    }
                }
                Cell::Goal => goals += 1,
                _ => {}
            }
            let border = r == 0 || r + 1 == n_rows || c == 0 || c + 1 == cols;
            if border && !matches!(cell, Cell::Wall | Cell::Water) && chars.get(c).is_some() {
                issues.push(at(IssueKind::OpenBorder(ch)));
            }
            cells.push(cell);
        }
    }
    if starts == 0 {
        issues.push(MapIssue {
            line: first_line,
            column: None,
            kind: IssueKind::NoStart,
        });
    }
    if goals == 0 {
        issues.push(MapIssue {
            line: first_line,
            column: None,
            kind: IssueKind::NoGoal,
        });
    }
    if !issues.is_empty() {
        return Err(GridError::Invalid(issues));
    }
    Ok(GridWorldSpec {
        rows: n_rows,
        cols,
        cells,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridState {
    pub row: usize,
    pub col: usize,
    pub has_key: bool,
    pub door_open: bool,
}

/// A `(has_key, door_open)` panel of the state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slice {
    pub has_key: bool,
    pub door_open: bool,
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "has_key={} door_open={}", self.has_key, self.door_open)
    }
}

impl GridState {
    pub fn slice(&self) -> Slice {
        Slice {
            has_key: self.has_key,
            door_open: self.door_open,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledGrid {
    spec: GridWorldSpec,
    mdp: TabularMdp,
    states: Vec<GridState>,
    index: HashMap<GridState, usize>,
    by_cell: Vec<Vec<usize>>,
}

struct Outcome {
    next: GridState,
    reward: f64,
}

fn step(spec: &GridWorldSpec, s: GridState, action: usize) -> Outcome {
    let p = &spec.params;
    let (dr, dc) = MOVES[action];
    let stay = Outcome {
        next: s,
        reward: p.step_reward,
    };
    let (Some(r), Some(c)) = (s.row.checked_add_signed(dr), s.col.checked_add_signed(dc)) else {
        return stay;
    };
    if r >= spec.rows || c >= spec.cols {
        return stay;
    }
    let mut next = GridState { row: r, col: c, ..s };
    let reward = match spec.cell(r, c) {
        Cell::Wall => return stay,
        Cell::Door if !s.has_key => return stay,
        Cell::Door => {
            next.door_open = true;
            p.step_reward
        }
        Cell::Key => {
            next.has_key = true;
            p.step_reward
        }
        Cell::Water => p.water_reward,
        Cell::Goal => p.goal_reward,
        Cell::Apple => p.apple_reward,
        Cell::Floor | Cell::Start | Cell::Bridge => p.step_reward,
    };
    Outcome { next, reward }
}

/// Builds the MDP over states reachable from the start. State 0 is the start;
/// the rest are numbered in breadth-first order.
pub fn compile(spec: &GridWorldSpec) -> std::result::Result<CompiledGrid, GridError> {
    let (sr, sc) = spec.start();
    let start = GridState {
        row: sr,
        col: sc,
        has_key: false,
        door_open: false,
    };
    let mut states = vec![start];
    let mut index = HashMap::from([(start, 0)]);
    let mut edges: Vec<[(usize, f64); N_ACTIONS]> = Vec::new();
    let mut queue = VecDeque::from([0]);
    while let Some(i) = queue.pop_front() {
        let s = states[i];
        let mut out = [(i, 0.0); N_ACTIONS];
        if !spec.cell(s.row, s.col).is_terminal() {
            for (a, slot) in out.iter_mut().enumerate() {
                let Outcome { next, reward } = step(spec, s, a);
                let j = *index.entry(next).or_insert_with(|| {
                    states.push(next);
                    queue.push_back(states.len() - 1);
                    states.len() - 1
                });
                if states.len() > MAX_STATES {
                    return Err(GridError::TooManyStates { limit: MAX_STATES });
                }
                *slot = (j, reward);
            }
        }
        if edges.len() <= i {
            edges.resize(i + 1, [(0, 0.0); N_ACTIONS]);
        }
        edges[i] = out;
    }

    let ns = states.len();
    if ns.saturating_mul(ns).saturating_mul(N_ACTIONS) > MAX_DENSE_ENTRIES {
        return Err(GridError::TooManyStates {
            limit: (MAX_DENSE_ENTRIES / N_ACTIONS).isqrt(),
        });
    }
    let mut transitions = vec![0.0; ns * N_ACTIONS * ns];
    let mut rewards = vec![0.0; ns * N_ACTIONS];
    for (s, out) in edges.iter().enumerate() {
        for (a, &(next, reward)) in out.iter().enumerate() {
            transitions[(s * N_ACTIONS + a) * ns + next] = 1.0;
            rewards[s * N_ACTIONS + a] = reward;
        }
    }
    let absorbing: Vec<bool> = states.iter().map(|s| spec.cell(s.row, s.col).is_terminal()).collect();
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    let mdp = TabularMdp::new(ns, N_ACTIONS, spec.params.gamma, transitions, rewards, initial, absorbing)
        .expect("compiled shapes are consistent");

    let mut by_cell = vec![Vec::new(); spec.rows * spec.cols];
    for (i, s) in states.iter().enumerate() {
        by_cell[s.row * spec.cols + s.col].push(i);
    }
    Ok(CompiledGrid {
        spec: spec.clone(),
        mdp,
        states,
        index,
        by_cell,
    })
}

/// Parses and compiles in one go.
pub fn load(text: &str, params: &GridParams) -> std::result::Result<CompiledGrid, GridError> {
    compile(&parse_grid(text, params)?)
}

pub fn rivers_bridges() -> CompiledGrid {
    load(RIVERS_BRIDGES_MAP, &GridParams::default()).expect("canonical map compiles")
}

pub fn kdt() -> CompiledGrid {
    load(KDT_MAP, &GridParams::default()).expect("canonical map compiles")
}

pub fn kdt_apple() -> CompiledGrid {
    load(KDT_APPLE_MAP, &GridParams::default()).expect("canonical map compiles")
}

impl CompiledGrid {
    pub fn spec(&self) -> &GridWorldSpec {
        &self.spec
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn into_mdp(self) -> TabularMdp {
        self.mdp
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn start_state(&self) -> usize {
        0
    }

    pub fn state(&self, s: usize) -> GridState {
        self.states[s]
    }

    pub fn states(&self) -> &[GridState] {
        &self.states
    }

    pub fn index_of(&self, state: &GridState) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn cell_of_state(&self, s: usize) -> (usize, usize) {
        (self.states[s].row, self.states[s].col)
    }

    /// Every state located on a cell, whatever its key and door flags.
    pub fn states_of_cell(&self, row: usize, col: usize) -> &[usize] {
        &self.by_cell[row * self.spec.cols + col]
    }

    pub fn cell_kind(&self, s: usize) -> Cell {
        let (r, c) = self.cell_of_state(s);
        self.spec.cell(r, c)
    }

    /// States standing on a cell of the given kind.
    pub fn mask_of(&self, kind: Cell) -> Vec<bool> {
        (0..self.n_states()).map(|s| self.cell_kind(s) == kind).collect()
    }

    pub fn bridge_mask(&self) -> Vec<bool> {
        self.mask_of(Cell::Bridge)
    }

    pub fn door_mask(&self) -> Vec<bool> {
        self.mask_of(Cell::Door)
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.mask_of(Cell::Key)
    }

    pub fn apple_mask(&self) -> Vec<bool> {
        self.mask_of(Cell::Apple)
    }

    /// States on a cell of `kind` or orthogonally adjacent to one.
    pub fn near_mask(&self, kind: Cell) -> Vec<bool> {
        self.near_cells_mask(&self.spec.cells_of(kind))
    }

    /// States on one of `cells` or orthogonally adjacent to one.
    pub fn near_cells_mask(&self, cells: &[(usize, usize)]) -> Vec<bool> {
        let near: BTreeSet<(usize, usize)> = cells
            .iter()
            .copied()
            .flat_map(|(r, c)| {
                let spec = &self.spec;
                std::iter::once((r, c)).chain(MOVES.iter().filter_map(move |&(dr, dc)| {
                    let (nr, nc) = (r.checked_add_signed(dr)?, c.checked_add_signed(dc)?);
                    (nr < spec.rows && nc < spec.cols).then_some((nr, nc))
                }))
            })
            .collect();
        (0..self.n_states()).map(|s| near.contains(&self.cell_of_state(s))).collect()
    }

    /// Slices present in the state space, sorted.
    pub fn slices(&self) -> Vec<Slice> {
        let set: BTreeSet<Slice> = self.states.iter().map(GridState::slice).collect();
        set.into_iter().collect()
    }

    pub fn states_in_slice(&self, slice: Slice) -> Vec<usize> {
        (0..self.n_states()).filter(|&s| self.states[s].slice() == slice).collect()
    }

    /// Spreads per-state values over the cell grid of one slice; cells without
    /// a state in the slice are `None`.
    pub fn panel(&self, values: &[f64], slice: Slice) -> Vec<Vec<Option<f64>>> {
        let mut out = vec![vec![None; self.spec.cols]; self.spec.rows];
        for s in self.states_in_slice(slice) {
            let (r, c) = self.cell_of_state(s);
            out[r][c] = Some(values[s]);
        }
        out
    }
}

pub fn default_uniform(grid: &CompiledGrid) -> StochasticPolicy {
    StochasticPolicy::uniform(grid.n_states(), N_ACTIONS)
}

fn optimal_q(grid: &CompiledGrid, tol: f64) -> Result<QTable> {
    eval::value_iteration(grid.mdp(), tol, DEFAULT_MAX_ITERS)
}

/// Deterministic optimal policy (lowest index among ties), uniform on `mask`.
pub fn default_optimal_except(grid: &CompiledGrid, mask: &[bool], tol: f64) -> Result<StochasticPolicy> {
    if mask.len() != grid.n_states() {
        return Err(GridError::MaskShape {
            expected: grid.n_states(),
            found: mask.len(),
        }
        .into());
    }
    optimal_except(grid.mdp(), mask, tol)
}

/// [`default_optimal_except`] for an arbitrary MDP.
pub fn optimal_except(mdp: &TabularMdp, mask: &[bool], tol: f64) -> Result<StochasticPolicy> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if mask.len() != ns {
        return Err(GridError::MaskShape {
            expected: ns,
            found: mask.len(),
        }
        .into());
    }
    let q = eval::value_iteration(mdp, tol, DEFAULT_MAX_ITERS)?;
    let mut probs = vec![0.0; ns * na];
    for (s, row) in probs.chunks_mut(na).enumerate() {
        if mask[s] {
            row.fill(1.0 / na as f64);
        } else {
            row[q.argmax(s)] = 1.0;
        }
    }
    StochasticPolicy::new(ns, na, probs)
}

/// The best action strictly worse than the optimum, lowest index among ties.
/// When every action is tied the second position of the tied order is used.
pub fn second_best_action(row: &[f64]) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<usize> = None;
    for (a, &x) in row.iter().enumerate() {
        if x < max - TIE_TOL && best.is_none_or(|b| x > row[b] + TIE_TOL) {
            best = Some(a);
        }
    }
    best.unwrap_or(if row.len() > 1 { 1 } else { 0 })
}

pub fn second_best_policy(q: &QTable) -> StochasticPolicy {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| second_best_action(q.row(s))).collect();
    StochasticPolicy::deterministic(q.n_actions(), &actions).expect("actions are in range")
}

/// Always plays the second-best action under `Q*`.
pub fn default_second_best(grid: &CompiledGrid, tol: f64) -> Result<StochasticPolicy> {
    Ok(second_best_policy(&optimal_q(grid, tol)?))
}
