//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p lazy-mdp-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use lazy_mdp::bounds::empirical_thresholds;
use lazy_mdp::eval::{greedy_deterministic, policy_eval_v, value_iteration, z_eval};
use lazy_mdp::grid::{self, default_optimal_except, default_second_best, default_uniform, Cell, CompiledGrid};
use lazy_mdp::importance::{action_gap, importance_advice, lazy_gap_importance};
use lazy_mdp::lazy::{build_augmented, v_plus_decomposed};
use lazy_mdp::learning::{learn_z, QLearningConfig};
use lazy_mdp::random::{random_augmented_policy, random_mdp, random_policy, random_spec};
use lazy_mdp::solver::{greedy_operator_step, oracle_solve};
use lazy_mdp::{eta_bounds, solve, LazyMdpSpec, QTable};
use lazy_mdp_cli::commands::{explore_runs, summarize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const TOL: f64 = 1e-12;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_q(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> QTable {
    QTable::new(ns, na, (0..ns * na).map(|_| rng.random_range(-10.0..=10.0)).collect()).unwrap()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// V_+ from the explicitly augmented MDP against V^pi + C from the base MDP.
fn value_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let spec = random_spec(&mut rng, 12, 4);
        let pi_plus = random_augmented_policy(&mut rng, spec.n_states(), spec.n_actions());
        let direct = policy_eval_v(&build_augmented(&spec), &pi_plus, TOL).map_err(|e| e.to_string())?;
        let split = v_plus_decomposed(&spec, &pi_plus, TOL).map_err(|e| e.to_string())?.v_plus;
        worst = worst.max(direct.max_abs_diff(&split));
    }
    ensure(worst < 1e-8, format!("100 specs, max |V+ - (V^pi + C)| = {worst:.1e}"))
}

fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let spec = random_spec(&mut rng, 12, 4);
        let (ns, na) = (spec.n_states(), spec.n_actions());
        let (q1, q2) = (random_q(&mut rng, ns, na), random_q(&mut rng, ns, na));
        let t1 = greedy_operator_step(&q1, &spec).map_err(|e| e.to_string())?;
        let t2 = greedy_operator_step(&q2, &spec).map_err(|e| e.to_string())?;
        worst = worst.max(t1.max_abs_diff(&t2) - spec.base().gamma() * q1.max_abs_diff(&q2));
    }
    ensure(worst <= 1e-12, format!("100 pairs, max ||TQ1-TQ2|| - gamma||Q1-Q2|| = {worst:.2e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let spec = random_spec(&mut rng, 12, 4);
        let sol = solve(&spec, TOL, 1_000_000).map_err(|e| e.to_string())?;
        let oracle = oracle_solve(&spec, TOL, 1_000_000).map_err(|e| e.to_string())?;
        for s in 0..spec.n_states() {
            for a in 0..spec.n_actions() {
                worst = worst.max((sol.q_star.get(s, a) - oracle.get(s, a)).abs());
            }
        }
    }
    ensure(worst < 1e-8, format!("50 specs, max |Q* - Q_oracle| over base actions = {worst:.1e}"))
}

fn bound_endpoints() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, g) in [("rivers_bridges", grid::rivers_bridges()), ("kdt", grid::kdt())] {
        let second_best = default_second_best(&g, TOL).map_err(|e| e.to_string())?;
        for (default_name, default) in [("uniform", default_uniform(&g)), ("second-best", second_best)] {
            let b = eta_bounds(g.mdp(), &default, TOL).map_err(|e| e.to_string())?;
            let spec = LazyMdpSpec::new(g.mdp().clone(), default.clone(), 0.0).unwrap();
            let at = |eta: f64| solve(&spec.with_eta(eta).unwrap(), 1e-11, 1_000_000).map_err(|e| e.to_string());
            let below = at(b.eta_min * (1.0 - 1e-3))?;
            let lazy_below = (0..g.n_states())
                .filter(|&s| !g.mdp().is_absorbing(s) && !below.control_mask[s])
                .count();
            let above = at(b.eta_max * (1.0 + 1e-3))?.control_count();
            let t = empirical_thresholds(g.mdp(), &default, 1e-11, 1e-11).map_err(|e| e.to_string())?;
            let d_min = (t.never_lazy_below - b.eta_min).abs();
            let d_max = (t.always_lazy_from - b.eta_max).abs();
            ok &= lazy_below == 0 && above == 0 && d_min <= 1e-8 && d_max <= 1e-8;
            lines.push(format!(
                "{name}/{default_name}: eta_min {:.6} eta_max {:.6} lazy-below {lazy_below} control-above {above} bisection diff {:.0e}/{:.0e}",
                b.eta_min, b.eta_max, d_min, d_max
            ));
        }
    }
    ensure(ok, lines.join("; "))
}

fn rivers_and_bridges() -> Outcome {
    let g = grid::rivers_bridges();
    let bridges = g.bridge_mask();
    let default = default_optimal_except(&g, &bridges, TOL).map_err(|e| e.to_string())?;
    let b = eta_bounds(g.mdp(), &default, TOL).map_err(|e| e.to_string())?;
    let mut ok = b.eta_min == 0.0;
    let mut detail = format!("eta_min = {}", b.eta_min);
    for eta in [1e-3, b.eta_max / 2.0] {
        let spec = LazyMdpSpec::new(g.mdp().clone(), default.clone(), eta).unwrap();
        let sol = solve(&spec, TOL, 1_000_000).map_err(|e| e.to_string())?;
        let same = sol.control_mask == bridges;
        ok &= same;
        detail += &format!("; eta {eta:.4}: control {} / bridges {} equal={same}", sol.control_count(), count(&bridges));
    }
    ensure(ok, detail)
}

/// Key, doorway/door and treasure cells with their orthogonal neighbours.
fn landmark_mask(g: &CompiledGrid) -> Vec<bool> {
    let spec = g.spec();
    let mut cells = spec.doorways();
    cells.extend(spec.cells_of(Cell::Door));
    cells.extend(spec.cells_of(Cell::Key));
    cells.extend(spec.cells_of(Cell::Goal));
    g.near_cells_mask(&cells)
}

fn kdt_control_sets() -> Outcome {
    let g = grid::kdt();
    let mut counts = Vec::new();
    let mut last = Vec::new();
    for eta in [0.008, 0.02, 0.05] {
        let spec = LazyMdpSpec::new(g.mdp().clone(), default_uniform(&g), eta).unwrap();
        let sol = solve(&spec, 1e-10, 1_000_000).map_err(|e| e.to_string())?;
        counts.push(sol.control_count());
        last = sol.control_mask;
    }
    let allowed = landmark_mask(&g);
    let outside = (0..g.n_states()).filter(|&s| last[s] && !allowed[s]).count();
    let decreasing = counts.windows(2).all(|w| w[0] > w[1]);
    ensure(
        decreasing && outside == 0,
        format!("control counts {counts:?} at eta 0.008/0.02/0.05; {outside} states at 0.05 outside landmarks"),
    )
}

fn apple_trap() -> Outcome {
    let g = grid::kdt_apple();
    let spec = LazyMdpSpec::new(g.mdp().clone(), default_uniform(&g), 0.0).unwrap();
    let runs = explore_runs(&spec, &[0.0, 0.03, 0.05], 0..100, &QLearningConfig::default()).map_err(|e| e.to_string())?;
    let [s0, s3, s5] = [0.0, 0.03, 0.05].map(|eta| summarize(&runs, eta));
    let trapped = (0.05..=0.15).contains(&s0.mean_final_score);
    let treasure = s3.success_rate >= 0.8;
    let quiet = s5.mean_final_control_frequency < 0.01;
    ensure(
        trapped && treasure && quiet,
        format!(
            "100 seeds: eta 0 mean score {:.3}; eta 0.03 success {:.0}% (mean {:.3}); eta 0.05 control frequency mean {:.2}% max {:.2}%",
            s0.mean_final_score,
            100.0 * s3.success_rate,
            s3.mean_final_score,
            100.0 * s5.mean_final_control_frequency,
            100.0 * s5.max_final_control_frequency
        ),
    )
}

fn z_function() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (ns, na) = (rng.random_range(2..=10), rng.random_range(2..=4));
        let gamma = rng.random_range(0.5..0.99);
        let mdp = random_mdp(&mut rng, ns, na, gamma, 0);
        let pi = random_policy(&mut rng, ns, na);
        let z = z_eval(&mdp, &pi, TOL).map_err(|e| e.to_string())?;
        let closed = 1.0 / (1.0 - gamma);
        worst = worst.max(z.values().iter().map(|v| (v - closed).abs()).fold(0.0, f64::max));
    }

    let g = grid::rivers_bridges();
    let pi = greedy_deterministic(&value_iteration(g.mdp(), TOL, 1_000_000).map_err(|e| e.to_string())?);
    let exact = z_eval(g.mdp(), &pi, TOL).map_err(|e| e.to_string())?;
    let config = QLearningConfig {
        epsilon0: 0.3,
        epsilon_inf: 0.3,
        n_phases: 1,
        episodes_per_phase: 100_000,
        max_episode_steps: 200,
        exploring_starts: true,
        ..QLearningConfig::default()
    };
    let learned = learn_z(g.mdp(), &pi, &config).map_err(|e| e.to_string())?;
    let scale = exact.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rel = learned.max_abs_diff(&exact) / scale;
    ensure(
        worst <= 1e-10 && rel <= 0.05,
        format!("closed form max error {worst:.1e}; learn_z sup-norm error {:.2}% of max |Z|", 100.0 * rel),
    )
}

fn importance_selectivity() -> Outcome {
    let g = grid::kdt();
    let q = value_iteration(g.mdp(), TOL, 1_000_000).map_err(|e| e.to_string())?;
    let (gap, advice) = (action_gap(&q), importance_advice(&q));
    let ordered = (0..g.n_states()).all(|s| advice.values[s] >= gap.values[s] && gap.values[s] >= 0.0);
    let gap_support = gap.support(0.0).len();
    let mut ok = ordered;
    let mut detail = format!("advice >= action_gap >= 0: {ordered}; action_gap support {gap_support}");
    for eta in [0.03, 0.05] {
        let spec = LazyMdpSpec::new(g.mdp().clone(), default_uniform(&g), eta).unwrap();
        let lazy = lazy_gap_importance(&spec, 1e-10).map_err(|e| e.to_string())?.active_support().len();
        ok &= lazy < gap_support;
        detail += &format!("; lazy-gap support at {eta} = {lazy}");
    }
    ensure(ok, detail)
}

fn run_into(dir: &Path, args: &[&str]) -> Result<(), String> {
    let mut full = vec!["lazymdp", "--quiet"];
    full.extend_from_slice(args);
    full.extend(["--out", dir.to_str().unwrap()]);
    match lazy_mdp_cli::run(&full) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited {code}")),
    }
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 5] = [
        &["solve", "--env", "kdt", "--eta", "0.02"],
        &["eta-bounds", "--env", "kdt", "--default", "second-best"],
        &["sweep", "--env", "rivers_bridges", "--eta-grid", "log:0.001:100:9"],
        &["importance", "--env", "kdt"],
        &["explore", "--env", "kdt_apple", "--seeds", "3", "--phases", "3", "--episodes", "50"],
    ];
    let mut checked = 0;
    for args in commands {
        // Thread count must not matter: the second run uses one worker.
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_into(a.path(), &[args, &["--workers", "3"]].concat())?;
        run_into(b.path(), &[args, &["--workers", "1"]].concat())?;
        let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
        if fa.is_empty() || fa != fb {
            return Err(format!("{} produced differing or no CSV output", args[0]));
        }
        checked += fa.len();
    }
    Ok(format!("5 commands rerun, {checked} CSV files byte-identical"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("value decomposition V+ = V^pi + C", value_decomposition),
        ("greedy operator contraction", contraction),
        ("oracle equivalence on the augmented MDP", oracle_equivalence),
        ("eta bound endpoints and bisection", bound_endpoints),
        ("rivers and bridges control set", rivers_and_bridges),
        ("KDT control sets", kdt_control_sets),
        ("KDT-apple learning", apple_trap),
        ("Z-function", z_function),
        ("importance selectivity", importance_selectivity),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {} ({name}, {secs:.1}s): {detail}", i + 1);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
