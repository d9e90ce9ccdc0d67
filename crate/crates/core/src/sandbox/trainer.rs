use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{env_step, shaped_reward, Action, Grid};
use super::SandboxError;
use crate::generation::RewardSpec;

/// Tabular action-value policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// `q[cell * 4 + action]`.
    pub q: Vec<f64>,
    pub behavior_epsilon: f64,
    pub learning_rate: f64,
}

impl Policy {
    pub const DEFAULT_EPSILON: f64 = 0.1;
    pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

    pub fn new(grid: &Grid) -> Self {
        Self {
            q: vec![0.0; grid.cell_count() * Action::COUNT],
            behavior_epsilon: Self::DEFAULT_EPSILON,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
        }
    }

    fn row(&self, cell: usize) -> &[f64] {
        &self.q[cell * Action::COUNT..(cell + 1) * Action::COUNT]
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.row(cell).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action, ties to the lowest action index.
    pub fn greedy(&self, cell: usize) -> Action {
        let row = self.row(cell);
        let mut best = 0;
        for a in 1..Action::COUNT {
            if row[a] > row[best] {
                best = a;
            }
        }
        Action::from_index(best)
    }

    /// Greedy action with ties broken uniformly at random.
    fn greedy_random_ties<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Action {
        let row = self.row(cell);
        let max = self.value(cell);
        let ties = row.iter().filter(|&&v| v == max).count();
        if ties == 1 {
            return self.greedy(cell);
        }
        let pick = rng.random_range(0..ties);
        let a = (0..Action::COUNT).filter(|&a| row[a] == max).nth(pick).unwrap_or(0);
        Action::from_index(a)
    }

    fn check_shape(&self, grid: &Grid) -> Result<(), SandboxError> {
        let expected = grid.cell_count() * Action::COUNT;
        if self.q.len() != expected {
            return Err(SandboxError::PolicyShape {
                got: self.q.len() / Action::COUNT,
                expected: grid.cell_count(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SliceStats {
    pub episodes: u64,
    pub env_steps: u64,
}

/// Runs `n_episodes` of ε-greedy Q-learning against the shaped reward.
///
/// `env_rng` drives transitions, `explore_rng` drives exploration and tie
/// breaking. On a non-finite shaped reward the slice stops and the error
/// names the reward; the policy keeps the updates made before that point.
pub fn train_slice<R1, R2>(
    policy: &mut Policy,
    grid: &Grid,
    spec: &RewardSpec,
    n_episodes: u64,
    env_rng: &mut R1,
    explore_rng: &mut R2,
) -> Result<SliceStats, SandboxError>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    if n_episodes == 0 {
        return Err(SandboxError::ZeroCount("n_episodes"));
    }
    policy.check_shape(grid)?;
    let gamma = grid.spec().gamma;
    let alpha = policy.learning_rate;
    let mut stats = SliceStats::default();
    for _ in 0..n_episodes {
        let mut cell = grid.spec().start;
        let mut steps = 0;
        loop {
            let s = grid.index(cell);
            let action = if explore_rng.random::<f64>() < policy.behavior_epsilon {
                Action::from_index(explore_rng.random_range(0..Action::COUNT))
            } else {
                policy.greedy_random_ties(s, explore_rng)
            };
            let t = env_step(grid, cell, action, steps, env_rng);
            steps += 1;
            stats.env_steps += 1;
            let r = shaped_reward(spec, grid, &t)?;
            let bootstrap = if t.reached_exit {
                0.0
            } else {
                gamma * policy.value(grid.index(t.to))
            };
            let q = &mut policy.q[s * Action::COUNT + action.index()];
            *q += alpha * (r + bootstrap - *q);
            if !q.is_finite() {
                return Err(SandboxError::InvalidReward { uid: spec.uid, value: *q });
            }
            cell = t.to;
            if t.done {
                break;
            }
        }
        stats.episodes += 1;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of greedy episodes that reached the exit within the horizon.
    pub j_hat: f64,
    pub episodes: u64,
    pub env_steps: u64,
}

/// Greedy rollouts scored by the task reward only.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &Policy,
    grid: &Grid,
    n_eval: u64,
    rng: &mut R,
) -> Result<EvalResult, SandboxError> {
    if n_eval == 0 {
        return Err(SandboxError::ZeroCount("n_eval"));
    }
    policy.check_shape(grid)?;
    let mut successes = 0u64;
    let mut env_steps = 0u64;
    for _ in 0..n_eval {
        let mut cell = grid.spec().start;
        let mut steps = 0;
        loop {
            let t = env_step(grid, cell, policy.greedy(grid.index(cell)), steps, rng);
            steps += 1;
            env_steps += 1;
            cell = t.to;
            if t.done {
                successes += u64::from(t.task_reward > 0.0);
                break;
            }
        }
    }
    Ok(EvalResult {
        j_hat: successes as f64 / n_eval as f64,
        episodes: n_eval,
        env_steps,
    })
}

/// Task-optimal policy from value iteration on the known dynamics.
pub fn optimal_policy(grid: &Grid) -> Policy {
    let n = grid.cell_count();
    let spec = grid.spec();
    let slip = spec.slip;
    let exit = grid.index(spec.exit);
    let mut policy = Policy::new(grid);
    let mut value = vec![0.0; n];
    let cells: Vec<_> = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| super::Cell::new(x, y)))
        .filter(|&c| !grid.is_blocked(c) && c != spec.exit)
        .collect();
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for &c in &cells {
            let s = grid.index(c);
            let outcome = |b: Action| {
                let next = grid.index(grid.apply(c, b));
                if next == exit {
                    1.0
                } else {
                    spec.gamma * value[next]
                }
            };
            for a in Action::ALL {
                let mut q = (1.0 - slip) * outcome(a);
                for b in Action::ALL {
                    q += slip / Action::COUNT as f64 * outcome(b);
                }
                policy.q[s * Action::COUNT + a.index()] = q;
            }
            let v = policy.value(s);
            delta = delta.max((v - value[s]).abs());
            value[s] = v;
        }
        if delta < 1e-13 {
            break;
        }
    }
    policy
}
