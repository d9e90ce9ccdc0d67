//! Doubling data-driven regret balancing (D³RB).
//!
//! Each arm carries a regret coefficient estimate `d_hat` and a balancing
//! potential `phi = d_hat * sqrt(n)`. The arm with the smallest potential is
//! advanced. After every pull the misspecification test compares the arm's
//! optimistic value against the best pessimistic value among played arms; if
//! the arm looks too weak for its claimed coefficient, `d_hat` doubles.

use super::{
    check_observation, Decision, Diagnostics, LearnerStats, Result, SelectorConfig, SelectorError,
};

/// Per-mean confidence width `c * sqrt(ln(K * ln(max(n, 3)) / delta) / n)`.
///
/// `ln n` is clamped at `ln 3` so the outer logarithm's argument stays above
/// `K / delta > 1` for small `n`.
pub fn confidence_width(n: u64, cfg: &SelectorConfig) -> Result<f64> {
    if n == 0 {
        return Err(SelectorError::UndefinedWidth);
    }
    let nf = n as f64;
    let inner = cfg.k as f64 * nf.max(3.0).ln() / cfg.delta;
    Ok(cfg.c * (inner.ln() / nf).sqrt())
}

/// Argmin of `phi`; ties go to the smaller pull count, then the smaller index.
pub fn d3rb_select(stats: &[LearnerStats]) -> Result<Decision> {
    select_among(stats, &vec![true; stats.len()])
}

pub(crate) fn select_among(stats: &[LearnerStats], eligible: &[bool]) -> Result<Decision> {
    if stats.is_empty() {
        return Err(SelectorError::NoArms);
    }
    let arm = stats
        .iter()
        .enumerate()
        .filter(|(i, _)| eligible[*i])
        .min_by(|(i, a), (j, b)| {
            a.phi
                .total_cmp(&b.phi)
                .then(a.n.cmp(&b.n))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .ok_or(SelectorError::NoEligibleArms)?;
    Ok(Decision {
        arm,
        diagnostics: Diagnostics::Potentials(stats.iter().map(|s| s.phi).collect()),
    })
}

/// The misspecification test for the arm `it` that was just pulled.
///
/// Expects `stats[it].n` and `stats[it].u_hat` already updated and
/// `stats[it].d_hat` still holding the coefficient from before this step.
/// The right-hand maximum only ranges over arms with at least one pull.
pub fn misspec_test(stats: &[LearnerStats], it: usize, cfg: &SelectorConfig) -> Result<bool> {
    let k = stats.len();
    let arm = stats.get(it).ok_or(SelectorError::ArmOutOfRange { arm: it, k })?;
    if arm.n == 0 {
        return Err(SelectorError::UndefinedWidth);
    }
    let n = arm.n as f64;
    let lhs = arm.u_hat / n + arm.d_hat * n.sqrt() / n + confidence_width(arm.n, cfg)?;
    let mut rhs = f64::NEG_INFINITY;
    for s in stats.iter().filter(|s| s.n > 0) {
        let lower = s.u_hat / s.n as f64 - confidence_width(s.n, cfg)?;
        rhs = rhs.max(lower);
    }
    Ok(lhs < rhs)
}

/// Records `reward` for arm `it`, runs the misspecification test and
/// refreshes the arm's potential. Returns whether `d_hat` doubled.
///
/// Only `stats[it]` changes.
pub fn d3rb_update(
    stats: &mut [LearnerStats],
    it: usize,
    reward: f64,
    cfg: &SelectorConfig,
) -> Result<bool> {
    let k = stats.len();
    if it >= k {
        return Err(SelectorError::ArmOutOfRange { arm: it, k });
    }
    check_observation(it, reward)?;
    stats[it].n += 1;
    stats[it].u_hat += reward;
    let doubled = misspec_test(stats, it, cfg)?;
    let arm = &mut stats[it];
    if doubled {
        arm.d_hat *= 2.0;
    }
    arm.phi = arm.d_hat * (arm.n as f64).sqrt();
    Ok(doubled)
}
