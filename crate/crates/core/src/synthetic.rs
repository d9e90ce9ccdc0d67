//! Synthetic base learners with prescribed learning curves.
//!
//! A learner pulled for the `k`-th time returns `v(k)` plus bounded uniform
//! noise, clamped to `[0, 1]`. With zero noise every confidence interval is
//! trivially valid, which makes the regret-balancing guarantees checkable
//! exactly: the dominant learner's coefficient must never double, no arm may
//! run more than one pull ahead of it, and every arm's realized regret must
//! sit below the balance bound.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::selector::{
    confidence_width, d3rb_select, d3rb_update, fresh_stats, Algorithm, Selector, SelectorConfig,
    SelectorError,
};

/// Slack for comparisons between accumulated floating-point sums.
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveKind {
    Constant { value: f64 },
    /// `a - b / sqrt(k)`.
    Saturating { a: f64, b: f64 },
    /// `low + (high - low) / (1 + exp(-(k - midpoint) / scale))`.
    Logistic {
        low: f64,
        high: f64,
        midpoint: f64,
        scale: f64,
    },
    /// Linear ramp from `start` at `k = 1` to `end` at `k = knee`, flat after.
    Crossing { start: f64, end: f64, knee: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    #[serde(flatten)]
    pub kind: CurveKind,
    /// Half-width of the uniform observation noise.
    #[serde(default)]
    pub noise_amp: f64,
}

impl CurveSpec {
    pub fn new(kind: CurveKind) -> Self {
        Self { kind, noise_amp: 0.0 }
    }

    pub fn with_noise(mut self, noise_amp: f64) -> Self {
        self.noise_amp = noise_amp;
        self
    }

    pub fn constant(value: f64) -> Self {
        Self::new(CurveKind::Constant { value })
    }

    pub fn saturating(a: f64, b: f64) -> Self {
        Self::new(CurveKind::Saturating { a, b })
    }

    pub fn logistic(low: f64, high: f64, midpoint: f64, scale: f64) -> Self {
        Self::new(CurveKind::Logistic {
            low,
            high,
            midpoint,
            scale,
        })
    }

    pub fn crossing(start: f64, end: f64, knee: f64) -> Self {
        Self::new(CurveKind::Crossing { start, end, knee })
    }

    /// Mean value after `k >= 1` pulls, clamped to `[0, 1]`.
    pub fn mean(&self, k: u64) -> f64 {
        let k = k.max(1) as f64;
        let raw = match self.kind {
            CurveKind::Constant { value } => value,
            CurveKind::Saturating { a, b } => a - b / k.sqrt(),
            CurveKind::Logistic {
                low,
                high,
                midpoint,
                scale,
            } => low + (high - low) / (1.0 + (-(k - midpoint) / scale).exp()),
            CurveKind::Crossing { start, end, knee } => {
                if k >= knee || knee <= 1.0 {
                    end
                } else {
                    start + (end - start) * (k - 1.0) / (knee - 1.0)
                }
            }
        };
        raw.clamp(0.0, 1.0)
    }

    /// Limit of the mean as the pull count grows.
    pub fn asymptote(&self) -> f64 {
        let raw = match self.kind {
            CurveKind::Constant { value } => value,
            CurveKind::Saturating { a, .. } => a,
            CurveKind::Logistic { high, .. } => high,
            CurveKind::Crossing { end, .. } => end,
        };
        raw.clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let finite = match self.kind {
            CurveKind::Constant { value } => value.is_finite(),
            CurveKind::Saturating { a, b } => a.is_finite() && b.is_finite(),
            CurveKind::Logistic {
                low,
                high,
                midpoint,
                scale,
            } => [low, high, midpoint].iter().all(|v| v.is_finite()) && scale > 0.0,
            CurveKind::Crossing { start, end, knee } => {
                start.is_finite() && end.is_finite() && knee >= 1.0
            }
        };
        if !finite || !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return Err(TheoryError::InvalidCurve(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One observation of the learner after its `k`-th pull.
pub fn curve_pull<R: Rng + ?Sized>(spec: &CurveSpec, k: u64, rng: &mut R) -> f64 {
    let mean = spec.mean(k);
    if spec.noise_amp == 0.0 {
        return mean;
    }
    let u = rng.random_range(-spec.noise_amp..=spec.noise_amp);
    (mean + u).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// The star's cumulative mean falls below another curve's.
    Dominance,
    /// The star's running average decreases.
    DecreasingAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominanceViolation {
    pub curve: usize,
    pub t: u64,
    pub kind: ViolationKind,
}

/// First point where the monotone-dominance condition fails for `star`
/// over `t <= horizon`, evaluated on exact means.
pub fn dominance_violation(
    curves: &[CurveSpec],
    star: usize,
    horizon: u64,
) -> Option<DominanceViolation> {
    let mut sums = vec![0.0; curves.len()];
    let mut prev_avg = f64::NEG_INFINITY;
    for t in 1..=horizon {
        for (s, c) in sums.iter_mut().zip(curves) {
            *s += c.mean(t);
        }
        let avg = sums[star] / t as f64;
        if avg < prev_avg - SUM_TOLERANCE {
            return Some(DominanceViolation {
                curve: star,
                t,
                kind: ViolationKind::DecreasingAverage,
            });
        }
        prev_avg = avg;
        for (i, s) in sums.iter().enumerate() {
            if i != star && sums[star] < s - SUM_TOLERANCE * t as f64 {
                return Some(DominanceViolation {
                    curve: i,
                    t,
                    kind: ViolationKind::Dominance,
                });
            }
        }
    }
    None
}

pub fn check_monotone_dominance(curves: &[CurveSpec], star: usize, horizon: u64) -> bool {
    star < curves.len() && dominance_violation(curves, star, horizon).is_none()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("no curves supplied")]
    NoCurves,
    #[error("star index {star} out of range for {k} curves")]
    StarOutOfRange { star: usize, k: usize },
    #[error("selector config has k = {cfg_k} but {curves} curves were supplied")]
    ArmCountMismatch { cfg_k: usize, curves: usize },
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("monotone dominance violated: curve {} at t = {} ({:?})", .0.curve, .0.t, .0.kind)]
    DominanceViolated(DominanceViolation),
    #[error(transparent)]
    Selector(#[from] SelectorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub k: usize,
    pub star: usize,
    pub horizon: u64,
    pub seed: u64,
    pub non_doubling_held: bool,
    pub pull_bound_held: bool,
    /// Realized regret `sum_k (v_star(inf) - v_i(k))` over each arm's pulls.
    pub per_arm_regret: Vec<f64>,
    pub pulls: Vec<u64>,
    pub doublings: Vec<u64>,
    /// Regret coefficient of the star learner after its final pull.
    pub d_star: f64,
    pub regret_bound: f64,
    /// Any observation noise means the confidence event is not guaranteed
    /// and no pass/fail claim is made.
    pub noisy: bool,
    /// Rounds where some played arm's cumulative estimate left its
    /// confidence interval.
    pub ci_violations: u64,
    pub precondition_violations: Vec<String>,
}

impl TheoryReport {
    pub fn regret_bound_held(&self) -> bool {
        self.per_arm_regret.iter().all(|&r| r <= self.regret_bound)
    }

    /// Whether this report supports a pass/fail verdict at all.
    pub fn claims_apply(&self) -> bool {
        !self.noisy && self.precondition_violations.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.non_doubling_held && self.pull_bound_held && self.regret_bound_held()
    }
}

/// `6 d sqrt(n + 1) + 5 c sqrt((n + 1) ln(K ln T / delta))`, with `ln T`
/// clamped at `ln 3` like the confidence widths.
pub fn balanced_regret_bound(d_star: f64, n_star: u64, horizon: u64, cfg: &SelectorConfig) -> f64 {
    let n1 = (n_star + 1) as f64;
    let log_term = (cfg.k as f64 * (horizon.max(3) as f64).ln() / cfg.delta).ln();
    6.0 * d_star * n1.sqrt() + 5.0 * cfg.c * (n1 * log_term).sqrt()
}

/// Regret coefficient `max(d_min, sum_k reg(k) / sqrt(n))` of a curve after
/// `n` pulls, measured against `v_star`.
pub fn regret_coefficient(curve: &CurveSpec, n: u64, v_star: f64, d_min: f64) -> f64 {
    if n == 0 {
        return d_min;
    }
    let regret: f64 = (1..=n).map(|k| v_star - curve.mean(k)).sum();
    d_min.max(regret / (n as f64).sqrt())
}

/// Runs D³RB for `horizon` rounds on the curves and checks the non-doubling
/// and regret-balance properties at every step.
pub fn run_theory_check(
    curves: &[CurveSpec],
    star: usize,
    cfg: &SelectorConfig,
    horizon: u64,
    seed: u64,
) -> Result<TheoryReport, TheoryError> {
    let k = curves.len();
    if k == 0 {
        return Err(TheoryError::NoCurves);
    }
    if star >= k {
        return Err(TheoryError::StarOutOfRange { star, k });
    }
    if cfg.k != k {
        return Err(TheoryError::ArmCountMismatch {
            cfg_k: cfg.k,
            curves: k,
        });
    }
    for c in curves {
        c.validate()?;
    }
    cfg.validate_ranges()?;
    if let Some(v) = dominance_violation(curves, star, horizon) {
        return Err(TheoryError::DominanceViolated(v));
    }
    let mut precondition_violations = Vec::new();
    if cfg.d_min < cfg.c {
        precondition_violations.push(format!(
            "precondition d_min >= c violated (d_min = {}, c = {})",
            cfg.d_min, cfg.c
        ));
    }
    let noisy = curves.iter().any(|c| c.noise_amp > 0.0);

    let mut noise = rng::stream(seed, Stream::Noise);
    let mut stats = fresh_stats(cfg);
    let mut expected = vec![0.0; k];
    let mut doublings = vec![0u64; k];
    let mut non_doubling_held = true;
    let mut pull_bound_held = true;
    let mut ci_violations = 0;

    for _ in 0..horizon {
        let arm = d3rb_select(&stats)?.arm;
        let pull = stats[arm].n + 1;
        let obs = curve_pull(&curves[arm], pull, &mut noise);
        expected[arm] += curves[arm].mean(pull);
        if d3rb_update(&mut stats, arm, obs, cfg)? {
            doublings[arm] += 1;
        }
        non_doubling_held &= stats[star].d_hat == cfg.d_min;
        let n_star = stats[star].n;
        pull_bound_held &= stats.iter().all(|s| s.n <= n_star + 1);
        if noisy {
            let violated = stats.iter().zip(&expected).try_fold(false, |acc, (s, u)| {
                if s.n == 0 {
                    return Ok::<_, SelectorError>(acc);
                }
                let bound = confidence_width(s.n, cfg)? * s.n as f64;
                Ok(acc || (s.u_hat - u).abs() > bound)
            })?;
            ci_violations += u64::from(violated);
        }
    }

    let v_star = curves[star].asymptote();
    let per_arm_regret = curves
        .iter()
        .zip(&stats)
        .map(|(c, s)| (1..=s.n).map(|j| v_star - c.mean(j)).sum())
        .collect();
    let n_star = stats[star].n;
    let d_star = regret_coefficient(&curves[star], n_star, v_star, cfg.d_min);
    Ok(TheoryReport {
        k,
        star,
        horizon,
        seed,
        non_doubling_held,
        pull_bound_held,
        per_arm_regret,
        pulls: stats.iter().map(|s| s.n).collect(),
        doublings,
        d_star,
        regret_bound: balanced_regret_bound(d_star, n_star, horizon, cfg),
        noisy,
        ci_violations,
        precondition_violations,
    })
}

/// A random curve set in which one learner (returned index) dominates
/// under the monotone-dominance condition up to `horizon`.
///
/// The star is `0.9 - 0.5 / sqrt(k)`; the others are drawn from all four
/// curve families and kept only if the set still satisfies the condition.
pub fn dominated_suite(k: usize, horizon: u64, seed: u64) -> (Vec<CurveSpec>, usize) {
    let mut rng = rng::stream(seed, Stream::Generator);
    let star = rng.random_range(0..k.max(1));
    let star_curve = CurveSpec::saturating(0.9, 0.5);
    let mut curves = vec![star_curve.clone(); k];
    for i in (0..k).filter(|&i| i != star) {
        loop {
            let candidate = match rng.random_range(0..4) {
                0 => CurveSpec::constant(rng.random_range(0.05..0.4)),
                1 => {
                    let a = rng.random_range(0.5..0.85);
                    CurveSpec::saturating(a, rng.random_range(0.5..=a))
                }
                2 => CurveSpec::logistic(
                    rng.random_range(0.0..0.3),
                    rng.random_range(0.4..0.85),
                    rng.random_range(5.0..200.0),
                    rng.random_range(2.0..30.0),
                ),
                _ => CurveSpec::crossing(
                    rng.random_range(0.0..0.3),
                    rng.random_range(0.3..0.85),
                    rng.random_range(2.0..300.0),
                ),
            };
            let pair = [star_curve.clone(), candidate.clone()];
            if check_monotone_dominance(&pair, 0, horizon) {
                curves[i] = candidate;
                break;
            }
        }
    }
    (curves, star)
}

/// Outcome of running any selection strategy against synthetic learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub arms: Vec<usize>,
    pub observations: Vec<f64>,
    /// True mean value of the learner right after each round's pull.
    pub true_values: Vec<f64>,
    pub pulls: Vec<u64>,
}

impl SyntheticRun {
    /// Running maximum of the true values of every learner state produced.
    pub fn best_so_far(&self) -> Vec<f64> {
        crate::orchestrator::best_so_far(&self.true_values)
    }

    /// Fraction of rounds in `range` that went to `arm`.
    pub fn share(&self, arm: usize, range: std::ops::Range<usize>) -> f64 {
        let len = range.len();
        let hits = self.arms[range].iter().filter(|&&a| a == arm).count();
        hits as f64 / len as f64
    }
}

/// Drives `algo` for `horizon` rounds against the curves.
pub fn simulate_selection(
    curves: &[CurveSpec],
    algo: Algorithm,
    cfg: &SelectorConfig,
    horizon: u64,
    seed: u64,
) -> Result<SyntheticRun, TheoryError> {
    if curves.len() != cfg.k {
        return Err(TheoryError::ArmCountMismatch {
            cfg_k: cfg.k,
            curves: curves.len(),
        });
    }
    let mut selector = Selector::new(algo, cfg.clone())?;
    let mut select_rng = rng::stream(seed, Stream::Selector);
    let mut noise = rng::stream(seed, Stream::Noise);
    let mut run = SyntheticRun {
        arms: Vec::with_capacity(horizon as usize),
        observations: Vec::with_capacity(horizon as usize),
        true_values: Vec::with_capacity(horizon as usize),
        pulls: vec![0; curves.len()],
    };
    for _ in 0..horizon {
        let arm = selector.select(&mut select_rng)?.arm;
        run.pulls[arm] += 1;
        let k = run.pulls[arm];
        let obs = curve_pull(&curves[arm], k, &mut noise);
        selector.observe(arm, obs)?;
        run.arms.push(arm);
        run.observations.push(obs);
        run.true_values.push(curves[arm].mean(k));
    }
    Ok(run)
}
