//! UCB, explore-then-commit, ε-greedy and round-robin selection.

use rand::Rng;

use super::{
    argmax_eligible, next_eligible, Decision, Diagnostics, LearnerStats, Result, SelectorConfig,
    SelectorError,
};

pub(crate) fn record_pull(stats: &mut LearnerStats, reward: f64) {
    stats.n += 1;
    stats.u_hat += reward;
}

fn all(k: usize) -> Vec<bool> {
    vec![true; k]
}

/// UCB: play every arm once in index order, then maximize
/// `mean + ucb_c * sqrt(2 ln t / n)`.
pub fn ucb_select(stats: &[LearnerStats], t: u64, cfg: &SelectorConfig) -> Result<Decision> {
    ucb_among(stats, t, cfg, &all(stats.len()))
}

pub(crate) fn ucb_among(
    stats: &[LearnerStats],
    t: u64,
    cfg: &SelectorConfig,
    eligible: &[bool],
) -> Result<Decision> {
    if stats.is_empty() {
        return Err(SelectorError::NoArms);
    }
    if let Some(arm) = (0..stats.len()).find(|&i| eligible[i] && stats[i].n == 0) {
        return Ok(Decision {
            arm,
            diagnostics: Diagnostics::Schedule,
        });
    }
    let ln_t = (t.max(1) as f64).ln();
    let indices: Vec<f64> = stats
        .iter()
        .map(|s| {
            let n = s.n as f64;
            s.u_hat / n + cfg.ucb_c * (2.0 * ln_t / n).sqrt()
        })
        .collect();
    let arm = argmax_eligible(&indices, eligible).ok_or(SelectorError::NoEligibleArms)?;
    Ok(Decision {
        arm,
        diagnostics: Diagnostics::Indices(indices),
    })
}

/// Explore-then-commit: round robin `(t - 1) mod K` for `t <= t0`, then the
/// arm with the best empirical mean at the end of exploration.
///
/// `committed` is the arm chosen at the first commit round, if any; the
/// caller stores the returned arm once `t > t0` so later means do not move
/// the commitment.
pub fn etc_select(
    stats: &[LearnerStats],
    t: u64,
    cfg: &SelectorConfig,
    committed: Option<usize>,
) -> Decision {
    etc_among(stats, t, cfg, committed, &all(stats.len()))
}

pub(crate) fn etc_among(
    stats: &[LearnerStats],
    t: u64,
    cfg: &SelectorConfig,
    committed: Option<usize>,
    eligible: &[bool],
) -> Decision {
    let k = stats.len();
    if t <= cfg.t0 {
        let slot = ((t.max(1) - 1) % k as u64) as usize;
        return Decision {
            arm: next_eligible(slot, eligible).unwrap_or(slot),
            diagnostics: Diagnostics::Schedule,
        };
    }
    let means = means_or_neg_inf(stats);
    if let Some(arm) = committed.filter(|&a| eligible[a]) {
        return Decision {
            arm,
            diagnostics: Diagnostics::Means(means),
        };
    }
    let played: Vec<bool> = stats.iter().zip(eligible).map(|(s, &e)| e && s.n > 0).collect();
    let arm = argmax_eligible(&means, &played)
        .or_else(|| next_eligible(0, eligible))
        .unwrap_or(0);
    Decision {
        arm,
        diagnostics: Diagnostics::Means(means),
    }
}

fn means_or_neg_inf(stats: &[LearnerStats]) -> Vec<f64> {
    stats
        .iter()
        .map(|s| s.mean().unwrap_or(f64::NEG_INFINITY))
        .collect()
}

/// ε-greedy: with probability `1 - epsilon` the best empirical mean
/// (unplayed arms count as 0), otherwise a uniformly random arm.
pub fn eg_select<R: Rng + ?Sized>(stats: &[LearnerStats], cfg: &SelectorConfig, rng: &mut R) -> Decision {
    eg_among(stats, cfg, &all(stats.len()), rng)
}

pub(crate) fn eg_among<R: Rng + ?Sized>(
    stats: &[LearnerStats],
    cfg: &SelectorConfig,
    eligible: &[bool],
    rng: &mut R,
) -> Decision {
    let means: Vec<f64> = stats.iter().map(|s| s.mean().unwrap_or(0.0)).collect();
    let explore = rng.random::<f64>() < cfg.epsilon;
    let arm = if explore {
        let pool: Vec<usize> = (0..stats.len()).filter(|&i| eligible[i]).collect();
        pool[rng.random_range(0..pool.len())]
    } else {
        argmax_eligible(&means, eligible).unwrap_or(0)
    };
    Decision {
        arm,
        diagnostics: Diagnostics::Means(means),
    }
}

/// Round robin: `(t - 1) mod K`.
pub fn uniform_select(t: u64, k: usize) -> Decision {
    uniform_among(t, &all(k))
}

pub(crate) fn uniform_among(t: u64, eligible: &[bool]) -> Decision {
    let k = eligible.len() as u64;
    let slot = ((t.max(1) - 1) % k) as usize;
    Decision {
        arm: next_eligible(slot, eligible).unwrap_or(slot),
        diagnostics: Diagnostics::Schedule,
    }
}
