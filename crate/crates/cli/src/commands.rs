use lazy_mdp::bounds::empirical_thresholds;
use lazy_mdp::eval::value_iteration;
use lazy_mdp::fmt::sig;
use lazy_mdp::importance::{action_gap, importance_advice, lazy_gap_importance, ImportanceMap};
use lazy_mdp::learning::{q_learning_lazy, LearningRun, QLearningConfig};
use lazy_mdp::mdp::TIE_TOL;
use lazy_mdp::{eta_bounds as compute_bounds, frequency_sweep, solve as solve_spec, EtaBounds, LazyMdpSpec};
use rayon::prelude::*;

use crate::config::{Etas, Experiment};
use crate::render::{self, side_by_side};
use crate::{config_error, Output, Result};

/// Score at or above which a run counts as having reached the treasure.
pub const SUCCESS_SCORE: f64 = 0.8;
pub const EXPLORE_ETAS: [f64; 3] = [0.0, 0.03, 0.05];
pub const IMPORTANCE_ETAS: [f64; 2] = [0.03, 0.05];

fn output(x: &Experiment) -> Output {
    Output {
        out_dir: x.out.clone(),
        ..Output::default()
    }
}

fn single_eta(x: &Experiment) -> Result<f64> {
    match &x.etas {
        Some(Etas::Single(eta)) => Ok(*eta),
        Some(Etas::Grid(_)) => Err(config_error("this command takes a single --eta, not a grid")),
        None => Err(config_error("--eta is required")),
    }
}

fn spec_at(x: &Experiment, eta: f64) -> Result<LazyMdpSpec> {
    Ok(LazyMdpSpec::new(x.env.mdp().clone(), x.default_policy.clone(), eta)?)
}

fn decision_count(x: &Experiment) -> usize {
    x.env.mdp().absorbing().iter().filter(|&&a| !a).count()
}

pub fn solve(x: &Experiment) -> Result<Output> {
    let eta = single_eta(x)?;
    let sol = solve_spec(&spec_at(x, eta)?, x.tol, x.max_iters)?;
    let mut out = output(x);
    out.stdout = format!(
        "eta {}  default {}\ncontrol {} of {} decision states  iterations {}  residual {:e}\n",
        sig(eta),
        x.default_name,
        sol.control_count(),
        decision_count(x),
        sol.iterations,
        sol.residual
    );
    out.file("solution.json", sol.to_json());
    out.file("control_set.csv", x.env.state_listing(&sol.control_mask));
    out.file("lazy_gap.csv", x.env.per_state_csv("lazy_gap", sol.gap_star.gaps()));
    if let Some(g) = x.env.grid() {
        let gaps = render::value_panels(g, sol.gap_star.gaps());
        let masks = render::mask_panels(g, &sol.control_mask);
        let mut text = render::legend();
        for (gap, mask) in gaps.into_iter().zip(masks) {
            text.push_str(&side_by_side(&[
                (format!("lazy-gap {}", gap.0), gap.1),
                (format!("control {}", mask.0), mask.1),
            ]));
        }
        out.stdout.push_str(&text);
        out.file("heatmaps.txt", text);
    }
    Ok(out)
}

fn bounds_summary(b: &EtaBounds) -> String {
    let state = |s: Option<usize>| s.map_or("-".into(), |s| s.to_string());
    let mut text = format!(
        "eta_min {}  (state {})\neta_max {}  (state {})\n",
        sig(b.eta_min),
        state(b.diagnostics.eta_min_state),
        sig(b.eta_max),
        state(b.diagnostics.eta_max_state)
    );
    if b.diagnostics.all_excluded {
        text.push_str("every decision state is excluded from eta_min; reported as 0\n");
    }
    text
}

pub fn eta_bounds(x: &Experiment) -> Result<Output> {
    let b = compute_bounds(x.env.mdp(), &x.default_policy, x.tol)?;
    let mut out = output(x);
    out.stdout = bounds_summary(&b);
    out.file(
        "eta_bounds.json",
        serde_json::to_string_pretty(&b).expect("bounds always serialize"),
    );
    out.file("bounds_diagnostics.csv", b.diagnostics.to_csv());
    Ok(out)
}

/// Log-spaced around both bounds, plus zero.
pub fn default_sweep_grid(b: &EtaBounds) -> Vec<f64> {
    if b.eta_max <= 0.0 {
        return vec![0.0, 1.0];
    }
    let lo = if b.eta_min > 0.0 { b.eta_min / 10.0 } else { b.eta_max / 1e3 };
    let hi = b.eta_max * 10.0;
    let n = 30;
    std::iter::once(0.0)
        .chain((0..n).map(|i| (lo.ln() + i as f64 / (n - 1) as f64 * (hi.ln() - lo.ln())).exp()))
        .collect()
}

pub fn sweep(x: &Experiment, bisect: bool) -> Result<Output> {
    let mdp = x.env.mdp();
    let b = compute_bounds(mdp, &x.default_policy, x.tol)?;
    let grid = x.etas.as_ref().map_or_else(|| default_sweep_grid(&b), Etas::values);
    let result = x.install(|| frequency_sweep(mdp, &x.default_policy, &grid, x.tol))??;

    let decision: Vec<usize> = (0..mdp.n_states()).filter(|&s| !mdp.is_absorbing(s)).collect();
    let mut report = Vec::new();
    let mut check = |ok: bool, line: String| report.push((ok, line));

    if b.eta_min > 0.0 {
        let eta = b.eta_min * (1.0 - 1e-3);
        let sol = solve_spec(&spec_at(x, eta)?, x.tol, x.max_iters)?;
        let lazy = decision.iter().filter(|&&s| !sol.control_mask[s]).count();
        check(lazy == 0, format!("eta_min*(1-1e-3) = {}: {lazy} lazy states (want 0)", sig(eta)));
    } else {
        check(true, "eta_min = 0: lower endpoint vacuous".into());
    }
    let eta = if b.eta_max > 0.0 { b.eta_max * (1.0 + 1e-3) } else { 1e-9 };
    let sol = solve_spec(&spec_at(x, eta)?, x.tol, x.max_iters)?;
    check(
        sol.control_count() == 0,
        format!("eta_max*(1+1e-3) = {}: {} control states (want 0)", sig(eta), sol.control_count()),
    );
    for row in &result.rows {
        if row.eta > b.eta_max + TIE_TOL && row.control_count != 0 {
            check(false, format!("grid eta {} above eta_max takes control", sig(row.eta)));
        }
        if row.eta < b.eta_min - TIE_TOL && row.control_count < decision.len() {
            check(false, format!("grid eta {} below eta_min defers somewhere", sig(row.eta)));
        }
    }
    if bisect {
        let t = empirical_thresholds(mdp, &x.default_policy, x.tol, 1e-11)?;
        let d_min = (t.never_lazy_below - b.eta_min).abs();
        let d_max = (t.always_lazy_from - b.eta_max).abs();
        check(
            d_min <= 1e-8,
            format!("bisection eta_min {} vs formula: |diff| {d_min:e}", sig(t.never_lazy_below)),
        );
        check(
            d_max <= 1e-8,
            format!("bisection eta_max {} vs formula: |diff| {d_max:e}", sig(t.always_lazy_from)),
        );
    }

    let mut out = output(x);
    let mut text = bounds_summary(&b);
    for (ok, line) in &report {
        text.push_str(&format!("{} {line}\n", if *ok { "PASS" } else { "FAIL" }));
    }
    out.failures = report.into_iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    out.stdout = format!("{}{text}", result.to_csv());
    out.file("sweep.csv", result.to_csv());
    out.file("sweep_report.txt", text);
    Ok(out)
}

fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-penalty aggregate of a seed sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploreSummary {
    pub eta: f64,
    pub mean_final_score: f64,
    pub std_final_score: f64,
    pub success_rate: f64,
    pub mean_final_control_frequency: f64,
    pub max_final_control_frequency: f64,
}

/// Runs lazy Q-learning for every `(eta, seed)` pair; results are in grid order.
pub fn explore_runs(spec: &LazyMdpSpec, etas: &[f64], seeds: std::ops::Range<u64>, config: &QLearningConfig) -> lazy_mdp::Result<Vec<(f64, u64, LearningRun)>> {
    let jobs: Vec<(f64, u64)> = etas.iter().flat_map(|&e| seeds.clone().map(move |s| (e, s))).collect();
    jobs.par_iter()
        .map(|&(eta, seed)| {
            let run = q_learning_lazy(&spec.with_eta(eta)?, &QLearningConfig { seed, ..config.clone() })?;
            Ok((eta, seed, run))
        })
        .collect()
}

pub fn summarize(runs: &[(f64, u64, LearningRun)], eta: f64) -> ExploreSummary {
    let mine: Vec<&LearningRun> = runs.iter().filter(|r| r.0 == eta).map(|r| &r.2).collect();
    let (mean, std) = mean_std(mine.iter().map(|r| r.final_score()));
    let success = mine.iter().filter(|r| r.final_score() >= SUCCESS_SCORE).count() as f64 / mine.len() as f64;
    let (ctrl, _) = mean_std(mine.iter().map(|r| r.final_control_frequency()));
    let max_ctrl = mine.iter().map(|r| r.final_control_frequency()).fold(0.0, f64::max);
    ExploreSummary {
        eta,
        mean_final_score: mean,
        std_final_score: std,
        success_rate: success,
        mean_final_control_frequency: ctrl,
        max_final_control_frequency: max_ctrl,
    }
}

pub fn explore(x: &Experiment) -> Result<Output> {
    let etas = x.etas.as_ref().map_or_else(|| EXPLORE_ETAS.to_vec(), Etas::values);
    let template = spec_at(x, 0.0)?;
    let runs = x.install(|| explore_runs(&template, &etas, x.seeds.clone(), &x.learning))??;

    let mut out = output(x);
    let mut curves = String::from("eta,phase,mean_score,std_score,mean_lazy_frequency\n");
    let mut finals = String::from("eta,seed,final_score,final_control_frequency\n");
    let mut summary =
        String::from("eta,mean_final_score,std_final_score,success_rate,mean_final_control_frequency\n");
    let mut heatmaps = render::legend();
    let ns = x.env.mdp().n_states();
    for &eta in &etas {
        let mine: Vec<(u64, &LearningRun)> = runs.iter().filter(|r| r.0 == eta).map(|r| (r.1, &r.2)).collect();
        for phase in 0..x.learning.n_phases {
            let (m, s) = mean_std(mine.iter().map(|r| r.1.scores[phase]));
            let (l, _) = mean_std(mine.iter().map(|r| r.1.lazy_frequency[phase]));
            curves.push_str(&format!("{},{phase},{},{},{}\n", sig(eta), sig(m), sig(s), sig(l)));
        }
        for (seed, run) in &mine {
            finals.push_str(&format!(
                "{},{seed},{},{}\n",
                sig(eta),
                sig(run.final_score()),
                sig(run.final_control_frequency())
            ));
        }
        let sm = summarize(&runs, eta);
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            sig(eta),
            sig(sm.mean_final_score),
            sig(sm.std_final_score),
            sig(sm.success_rate),
            sig(sm.mean_final_control_frequency)
        ));
        let occupancy: Vec<f64> = (0..ns)
            .map(|s| mine.iter().map(|r| r.1.occupancy[s]).sum::<f64>() / mine.len() as f64)
            .collect();
        out.file(format!("occupancy_eta{}.csv", sig(eta)), x.env.per_state_csv("mass", &occupancy));
        if let Some(g) = x.env.grid() {
            let spec = g.spec();
            let mut panels = Vec::new();
            for (title, has_key) in [("before key", false), ("after key", true)] {
                let mut cells = vec![vec![None; spec.cols()]; spec.rows()];
                for s in (0..ns).filter(|&s| g.state(s).has_key == has_key) {
                    let (r, c) = g.cell_of_state(s);
                    *cells[r][c].get_or_insert(0.0) += occupancy[s];
                }
                panels.push((format!("eta {} {title}", sig(eta)), render::cell_panel(spec, &cells)));
            }
            heatmaps.push_str(&side_by_side(&panels));
        }
    }
    out.stdout = format!("seeds {}..{}\n{summary}", x.seeds.start, x.seeds.end);
    out.file("curves.csv", curves);
    out.file("final.csv", finals);
    out.file("summary.csv", summary);
    if x.env.grid().is_some() {
        out.stdout.push_str(&heatmaps);
        out.file("occupancy.txt", heatmaps);
    }
    Ok(out)
}

pub fn importance(x: &Experiment) -> Result<Output> {
    let etas = x.etas.as_ref().map_or_else(|| IMPORTANCE_ETAS.to_vec(), Etas::values);
    let q = value_iteration(x.env.mdp(), x.tol, x.max_iters)?;
    let mut maps: Vec<ImportanceMap> = vec![action_gap(&q), importance_advice(&q)];
    for &eta in &etas {
        maps.push(lazy_gap_importance(&spec_at(x, eta)?, x.tol)?);
    }

    let mut out = output(x);
    out.stdout.push_str("measure,eta,support\n");
    for m in &maps {
        let eta = m.eta.map_or(String::new(), sig);
        out.stdout.push_str(&format!("{},{eta},{}\n", m.measure, m.active_support().len()));
        let name = match m.eta {
            Some(e) => format!("{}_eta{}.csv", m.measure, sig(e)),
            None => format!("{}.csv", m.measure),
        };
        out.file(name, x.env.per_state_csv("value", &m.values));
    }
    if let Some(g) = x.env.grid() {
        let per_map: Vec<Vec<(String, Vec<String>)>> = maps.iter().map(|m| render::value_panels(g, &m.values)).collect();
        let mut text = render::legend();
        for (i, slice) in g.slices().into_iter().enumerate() {
            let row: Vec<(String, Vec<String>)> = maps
                .iter()
                .zip(&per_map)
                .map(|(m, panels)| {
                    let label = m.eta.map_or(m.measure.clone(), |e| format!("{} {}", m.measure, sig(e)));
                    (label, panels[i].1.clone())
                })
                .collect();
            text.push_str(&format!("{}\n", render::slice_title(slice)));
            text.push_str(&side_by_side(&row));
        }
        out.stdout.push_str(&text);
        out.file("importance.txt", text);
    }
    Ok(out)
}

pub fn validate(x: &Experiment) -> Result<Output> {
    let mut out = output(x);
    out.stdout = format!("{}default {} ok\n", x.env.describe(), x.default_name);
    // Validation writes nothing.
    out.out_dir = None;
    Ok(out)
}
