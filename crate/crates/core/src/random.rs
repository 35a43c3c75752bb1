//! Random instance generators for property tests and benchmarks.

use rand::Rng;

use crate::lazy::LazyMdpSpec;
use crate::mdp::{StochasticPolicy, TabularMdp};

fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize, support: usize) -> Vec<f64> {
    let mut p = vec![0.0; n];
    for _ in 0..support.max(1) {
        p[rng.random_range(0..n)] += rng.random::<f64>() + 1e-3;
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Random MDP whose last `n_absorbing` states are absorbing. Each transition
/// row has at most three successors; rewards are uniform in [-1, 1].
pub fn random_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    n_absorbing: usize,
) -> TabularMdp {
    assert!(n_absorbing < n_states, "at least one state must be non-absorbing");
    let first_absorbing = n_states - n_absorbing;
    let mut transitions = vec![0.0; n_states * n_actions * n_states];
    let mut rewards = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &mut transitions[(s * n_actions + a) * n_states..][..n_states];
            if s >= first_absorbing {
                row[s] = 1.0;
                continue;
            }
            row.copy_from_slice(&random_distribution(rng, n_states, 3));
            rewards[s * n_actions + a] = rng.random_range(-1.0..=1.0);
        }
    }
    let mut initial = random_distribution(rng, first_absorbing, 2);
    initial.resize(n_states, 0.0);
    let absorbing = (0..n_states).map(|s| s >= first_absorbing).collect();
    TabularMdp::new(n_states, n_actions, gamma, transitions, rewards, initial, absorbing)
        .expect("generated shapes are consistent")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> StochasticPolicy {
    let probs = (0..n_states)
        .flat_map(|_| random_distribution(rng, n_actions, n_actions))
        .collect();
    StochasticPolicy::new(n_states, n_actions, probs).expect("rows are normalized")
}

/// Random augmented policy whose rows put some mass on every row shape:
/// fully lazy, never lazy and mixed rows all occur.
pub fn random_augmented_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> StochasticPolicy {
    let n_aug = n_actions + 1;
    let mut probs = Vec::with_capacity(n_states * n_aug);
    for _ in 0..n_states {
        let mut row = random_distribution(rng, n_aug, n_aug);
        match rng.random_range(0..4) {
            0 => {
                row.iter_mut().for_each(|p| *p = 0.0);
                row[n_actions] = 1.0;
            }
            1 => {
                row[n_actions] = 0.0;
                let total: f64 = row.iter().sum();
                if total == 0.0 {
                    row[0] = 1.0;
                } else {
                    row.iter_mut().for_each(|p| *p /= total);
                }
            }
            _ => {}
        }
        probs.extend(row);
    }
    StochasticPolicy::new(n_states, n_aug, probs).expect("rows are normalized")
}

/// Random lazy-MDP with `2..=max_states` states, `2..=max_actions` actions,
/// gamma in [0.5, 0.95], eta in [0, 1] and a random default policy.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, max_states: usize, max_actions: usize) -> LazyMdpSpec {
    let ns = rng.random_range(2..=max_states);
    let na = rng.random_range(2..=max_actions);
    let gamma = rng.random_range(0.5..0.95);
    let n_abs = rng.random_range(0..ns.min(3));
    let base = random_mdp(rng, ns, na, gamma, n_abs);
    let default = random_policy(rng, ns, na);
    let eta = rng.random_range(0.0..=1.0);
    LazyMdpSpec::new(base, default, eta).expect("generated spec is valid")
}
