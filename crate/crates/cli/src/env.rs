use std::path::Path;

use lazy_mdp::eval::value_iteration;
use lazy_mdp::fmt::sig;
use lazy_mdp::grid::{self, compile, parse_grid, second_best_policy, Cell, CompiledGrid, GridParams};
use lazy_mdp::{StochasticPolicy, TabularMdp};

use crate::{config_error, Result};

/// A compiled gridworld, or a bare MDP loaded from JSON.
#[derive(Debug, Clone)]
pub enum Environment {
    Grid(CompiledGrid),
    Mdp(TabularMdp),
}

impl Environment {
    pub fn mdp(&self) -> &TabularMdp {
        match self {
            Environment::Grid(g) => g.mdp(),
            Environment::Mdp(m) => m,
        }
    }

    pub fn grid(&self) -> Option<&CompiledGrid> {
        match self {
            Environment::Grid(g) => Some(g),
            Environment::Mdp(_) => None,
        }
    }

    /// Header of the per-state columns: grid coordinates when available.
    pub fn state_header(&self) -> &'static str {
        match self {
            Environment::Grid(_) => "state,row,col,has_key,door_open",
            Environment::Mdp(_) => "state",
        }
    }

    pub fn state_fields(&self, s: usize) -> String {
        match self {
            Environment::Grid(g) => {
                let st = g.state(s);
                format!("{s},{},{},{},{}", st.row, st.col, st.has_key, st.door_open)
            }
            Environment::Mdp(_) => s.to_string(),
        }
    }

    /// One row per state: coordinates plus a `column` value.
    pub fn per_state_csv(&self, column: &str, values: &[f64]) -> String {
        let mut out = format!("{},{column}\n", self.state_header());
        for (s, &v) in values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.state_fields(s), sig(v)));
        }
        out
    }

    /// Listing of the states where `mask` holds.
    pub fn state_listing(&self, mask: &[bool]) -> String {
        let mut out = format!("{}\n", self.state_header());
        for s in (0..mask.len()).filter(|&s| mask[s]) {
            out.push_str(&format!("{}\n", self.state_fields(s)));
        }
        out
    }

    pub fn describe(&self) -> String {
        let m = self.mdp();
        let absorbing = m.absorbing().iter().filter(|&&a| a).count();
        let mut out = format!(
            "states {}  actions {}  gamma {}  absorbing {}\n",
            m.n_states(),
            m.n_actions(),
            sig(m.gamma()),
            absorbing
        );
        if let Environment::Grid(g) = self {
            out.push_str(&format!("map {}x{}  slices {}\n", g.spec().rows(), g.spec().cols(), g.slices().len()));
        }
        out
    }
}

/// Canonical map name, `.json` MDP document or map file.
pub fn load(name: &str, gamma: Option<f64>) -> Result<Environment> {
    let path = Path::new(name);
    let (text, is_json) = match grid::canonical_map(name) {
        Some(text) => (text.to_string(), false),
        None => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read environment `{name}`: {e}")))?;
            (text, path.extension().is_some_and(|e| e == "json"))
        }
    };
    if is_json {
        let mdp = TabularMdp::from_json(&text)?;
        return Ok(Environment::Mdp(match gamma {
            Some(g) => mdp.with_gamma(g),
            None => mdp,
        }));
    }
    let mut spec = parse_grid(&text, &GridParams::default()).map_err(lazy_mdp::Error::from)?;
    if let Some(g) = gamma {
        spec.params.gamma = g;
    }
    Ok(Environment::Grid(compile(&spec).map_err(lazy_mdp::Error::from)?))
}

/// Resolves a default-policy name; see [`crate::CommonArgs::default_policy`].
pub fn default_policy(env: &Environment, name: &str, tol: f64, max_iters: usize) -> Result<StochasticPolicy> {
    let mdp = env.mdp();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if name == "uniform" {
        return Ok(StochasticPolicy::uniform(ns, na));
    }
    if name == "second-best" {
        return Ok(second_best_policy(&value_iteration(mdp, tol, max_iters)?));
    }
    if name == "optimal" {
        return Ok(grid::optimal_except(mdp, &vec![false; ns], tol)?);
    }
    if let Some(mask) = name.strip_prefix("optimal-except:") {
        return Ok(grid::optimal_except(mdp, &parse_mask(env, mask)?, tol)?);
    }
    if let Some(path) = name.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read default policy `{path}`: {e}")))?;
        let raw: StochasticPolicy =
            serde_json::from_str(&text).map_err(|e| config_error(format!("default policy `{path}`: {e}")))?;
        if (raw.n_states(), raw.n_actions()) != (ns, na) {
            return Err(config_error(format!(
                "default policy `{path}` is {}x{}, environment needs {ns}x{na}",
                raw.n_states(),
                raw.n_actions()
            )));
        }
        // Re-validate: deserialization does not check the rows.
        return Ok(StochasticPolicy::new(ns, na, raw.probs().to_vec())?);
    }
    Err(config_error(format!(
        "unknown default policy `{name}` (uniform, second-best, optimal, optimal-except:<mask>, file:<path>)"
    )))
}

/// Comma-separated cell kinds (`bridge`, `door`, `doorway`, `key`, `apple`,
/// `water`, `goal`) and state indices.
pub fn parse_mask(env: &Environment, spec: &str) -> Result<Vec<bool>> {
    let ns = env.mdp().n_states();
    let mut mask = vec![false; ns];
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Ok(s) = token.parse::<usize>() {
            if s >= ns {
                return Err(config_error(format!("mask state {s} out of range ({ns} states)")));
            }
            mask[s] = true;
            continue;
        }
        let g = env
            .grid()
            .ok_or_else(|| config_error(format!("mask `{token}` needs a gridworld environment")))?;
        let kind_mask = match token.trim_end_matches('s') {
            "bridge" => g.bridge_mask(),
            "door" => g.door_mask(),
            "key" => g.key_mask(),
            "apple" => g.apple_mask(),
            "water" => g.mask_of(Cell::Water),
            "goal" => g.mask_of(Cell::Goal),
            "doorway" => {
                let cells = g.spec().doorways();
                (0..ns).map(|s| cells.contains(&g.cell_of_state(s))).collect()
            }
            _ => return Err(config_error(format!("unknown mask `{token}`"))),
        };
        mask.iter_mut().zip(kind_mask).for_each(|(m, k)| *m |= k);
    }
    Ok(mask)
}
