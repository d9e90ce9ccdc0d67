//! Model-selection strategies that pick which base learner to advance next.
//!
//! Every strategy consumes scalar evaluations in `[0, 1]`. The pure functions
//! ([`d3rb_select`], [`misspec_test`], [`exp3_update`], ...) carry the actual
//! rules; [`Selector`] wraps them in a small state machine that also tracks
//! the global round counter and arms that have been retired mid-run.

mod baselines;
mod d3rb;
mod exp3;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{eg_select, etc_select, ucb_select, uniform_select};
pub use d3rb::{confidence_width, d3rb_select, d3rb_update, misspec_test};
pub use exp3::{exp3_select, exp3_update, Exp3State, EXP3_RENORM_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectorError {
    #[error("selector has no arms")]
    NoArms,
    #[error("every arm has been retired")]
    NoEligibleArms,
    #[error("arm {arm} out of range for {k} arms")]
    ArmOutOfRange { arm: usize, k: usize },
    #[error("confidence width undefined for an unplayed arm (n = 0)")]
    UndefinedWidth,
    #[error("invalid observation {value} for arm {arm}: must be finite and in [0, 1]")]
    InvalidObservation { arm: usize, value: f64 },
    #[error("invalid selector config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SelectorError>;

/// Hyperparameters shared by all selection strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub k: usize,
    /// Failure probability for the D³RB confidence widths.
    pub delta: f64,
    /// D³RB confidence multiplier.
    pub c: f64,
    pub d_min: f64,
    /// Exp3 learning rate.
    pub eta: f64,
    /// ε-greedy exploration probability.
    pub epsilon: f64,
    /// Explore-then-commit exploration length in rounds.
    pub t0: u64,
    /// UCB confidence multiplier.
    pub ucb_c: f64,
}

impl SelectorConfig {
    /// Defaults from the standard hyperparameter table: ε = 0.1, T₀ = 5·K,
    /// UCB c = 1, η = 0.1; D³RB uses c = d_min = 1 and δ = 0.1.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            delta: 0.1,
            c: 1.0,
            d_min: 1.0,
            eta: 0.1,
            epsilon: 0.1,
            t0: 5 * k as u64,
            ucb_c: 1.0,
        }
    }

    /// Range checks that every strategy relies on.
    pub fn validate_ranges(&self) -> Result<()> {
        let bad = |msg: String| Err(SelectorError::InvalidConfig(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(self.d_min > 0.0 && self.d_min.is_finite()) {
            return bad(format!("d_min must be positive, got {}", self.d_min));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.t0 < self.k as u64 {
            return bad(format!("t0 = {} must be at least k = {}", self.t0, self.k));
        }
        if !(self.ucb_c >= 0.0 && self.ucb_c.is_finite()) {
            return bad(format!("ucb_c must be non-negative, got {}", self.ucb_c));
        }
        Ok(())
    }

    /// Full validation, including the `d_min ≥ c` requirement of the
    /// non-doubling guarantee.
    pub fn validate(&self) -> Result<()> {
        self.validate_ranges()?;
        if self.d_min < self.c {
            return Err(SelectorError::InvalidConfig(format!(
                "d_min = {} must be at least c = {}",
                self.d_min, self.c
            )));
        }
        Ok(())
    }
}

/// Per-arm statistics: pull count, cumulative observed value, regret
/// coefficient estimate and balancing potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerStats {
    pub n: u64,
    pub u_hat: f64,
    pub d_hat: f64,
    pub phi: f64,
}

impl LearnerStats {
    pub fn fresh(d_min: f64) -> Self {
        Self {
            n: 0,
            u_hat: 0.0,
            d_hat: d_min,
            phi: d_min,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.u_hat / self.n as f64)
    }
}

pub fn fresh_stats(cfg: &SelectorConfig) -> Vec<LearnerStats> {
    vec![LearnerStats::fresh(cfg.d_min); cfg.k]
}

/// Snapshot of the quantities a strategy looked at when it chose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum Diagnostics {
    Potentials(Vec<f64>),
    Probabilities(Vec<f64>),
    Indices(Vec<f64>),
    Means(Vec<f64>),
    Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub arm: usize,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    D3rb,
    Exp3,
    Ucb,
    Etc,
    #[serde(rename = "eg")]
    EpsilonGreedy,
    Uniform,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::D3rb,
        Algorithm::Exp3,
        Algorithm::Ucb,
        Algorithm::Etc,
        Algorithm::EpsilonGreedy,
        Algorithm::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::D3rb => "d3rb",
            Algorithm::Exp3 => "exp3",
            Algorithm::Ucb => "ucb",
            Algorithm::Etc => "etc",
            Algorithm::EpsilonGreedy => "eg",
            Algorithm::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm `{s}` (valid: {})", names.join(", "))
            })
    }
}

/// What happened to the selector's state after an observation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateOutcome {
    /// D³RB only: the misspecification test fired and `d_hat` doubled.
    pub doubled: bool,
}

pub(crate) fn check_observation(arm: usize, value: f64) -> Result<()> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(SelectorError::InvalidObservation { arm, value })
    }
}

/// Argmax over `scores` restricted to `eligible`, ties to the lower index.
pub(crate) fn argmax_eligible(scores: &[f64], eligible: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !eligible[i] {
            continue;
        }
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// First eligible arm at or cyclically after `start`.
pub(crate) fn next_eligible(start: usize, eligible: &[bool]) -> Option<usize> {
    let k = eligible.len();
    (0..k).map(|o| (start + o) % k).find(|&i| eligible[i])
}

/// A selection strategy together with the state it needs between rounds.
#[derive(Debug, Clone)]
pub struct Selector {
    algo: Algorithm,
    cfg: SelectorConfig,
    stats: Vec<LearnerStats>,
    exp3: Exp3State,
    eligible: Vec<bool>,
    /// Rounds selected so far; the next select happens at round `t + 1`.
    t: u64,
    committed: Option<usize>,
}

impl Selector {
    pub fn new(algo: Algorithm, cfg: SelectorConfig) -> Result<Self> {
        cfg.validate_ranges()?;
        if algo == Algorithm::D3rb {
            cfg.validate()?;
        }
        Ok(Self {
            algo,
            stats: fresh_stats(&cfg),
            exp3: Exp3State::new(cfg.k),
            eligible: vec![true; cfg.k],
            t: 0,
            committed: None,
            cfg,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algo
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &[LearnerStats] {
        &self.stats
    }

    pub fn exp3_state(&self) -> &Exp3State {
        &self.exp3
    }

    pub fn round(&self) -> u64 {
        self.t
    }

    pub fn is_eligible(&self, arm: usize) -> bool {
        self.eligible.get(arm).copied().unwrap_or(false)
    }

    /// Excludes an arm from all future selections. Its statistics are kept.
    pub fn retire(&mut self, arm: usize) -> Result<()> {
        let k = self.cfg.k;
        let slot = self
            .eligible
            .get_mut(arm)
            .ok_or(SelectorError::ArmOutOfRange { arm, k })?;
        *slot = false;
        if self.committed == Some(arm) {
            self.committed = None;
        }
        Ok(())
    }

    pub fn select<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Decision> {
        if !self.eligible.iter().any(|&e| e) {
            return Err(SelectorError::NoEligibleArms);
        }
        let t = self.t + 1;
        let decision = match self.algo {
            Algorithm::D3rb => d3rb::select_among(&self.stats, &self.eligible)?,
            Algorithm::Exp3 => exp3::select_among(&self.exp3, &self.eligible, rng),
            Algorithm::Ucb => baselines::ucb_among(&self.stats, t, &self.cfg, &self.eligible)?,
            Algorithm::Etc => {
                let d = baselines::etc_among(&self.stats, t, &self.cfg, self.committed, &self.eligible);
                if t > self.cfg.t0 {
                    self.committed = Some(d.arm);
                }
                d
            }
            Algorithm::EpsilonGreedy => {
                baselines::eg_among(&self.stats, &self.cfg, &self.eligible, rng)
            }
            Algorithm::Uniform => baselines::uniform_among(t, &self.eligible),
        };
        self.t = t;
        Ok(decision)
    }

    /// Feeds the evaluation of the arm pulled this round.
    pub fn observe(&mut self, arm: usize, reward: f64) -> Result<UpdateOutcome> {
        let k = self.cfg.k;
        if arm >= k {
            return Err(SelectorError::ArmOutOfRange { arm, k });
        }
        check_observation(arm, reward)?;
        match self.algo {
            Algorithm::D3rb => {
                let doubled = d3rb_update(&mut self.stats, arm, reward, &self.cfg)?;
                Ok(UpdateOutcome { doubled })
            }
            Algorithm::Exp3 => {
                exp3_update(&mut self.exp3, arm, reward, &self.cfg)?;
                baselines::record_pull(&mut self.stats[arm], reward);
                Ok(UpdateOutcome::default())
            }
            _ => {
                baselines::record_pull(&mut self.stats[arm], reward);
                Ok(UpdateOutcome::default())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        let err = "greedy".parse::<Algorithm>().unwrap_err();
        assert!(err.contains("d3rb") && err.contains("uniform"));
    }

    #[test]
    fn default_config_matches_hyperparameter_table() {
        let cfg = SelectorConfig::new(8);
        assert_eq!(cfg.epsilon, 0.1);
        assert_eq!(cfg.t0, 40);
        assert_eq!(cfg.ucb_c, 1.0);
        assert_eq!(cfg.eta, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn d_min_below_c_rejected_for_d3rb_only() {
        let mut cfg = SelectorConfig::new(2);
        cfg.d_min = 0.5;
        assert!(cfg.validate_ranges().is_ok());
        assert!(Selector::new(Algorithm::D3rb, cfg.clone()).is_err());
        assert!(Selector::new(Algorithm::Ucb, cfg).is_ok());
    }

    #[test]
    fn bad_ranges_rejected() {
        let base = SelectorConfig::new(3);
        type Mutation = Box<dyn Fn(&mut SelectorConfig)>;
        let cases: Vec<Mutation> = vec![
            Box::new(|c| c.k = 0),
            Box::new(|c| c.delta = 1.0),
            Box::new(|c| c.eta = 0.0),
            Box::new(|c| c.epsilon = 1.5),
            Box::new(|c| c.t0 = 2),
            Box::new(|c| c.c = f64::NAN),
        ];
        for mutate in cases {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            assert!(cfg.validate_ranges().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn non_finite_observation_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for algo in Algorithm::ALL {
            let mut sel = Selector::new(algo, SelectorConfig::new(2)).unwrap();
            let d = sel.select(&mut rng).unwrap();
            for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, 1.5] {
                assert!(matches!(
                    sel.observe(d.arm, bad),
                    Err(SelectorError::InvalidObservation { .. })
                ));
            }
            assert_eq!(sel.stats()[d.arm].n, 0);
        }
    }

    #[test]
    fn retired_arms_are_never_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for algo in Algorithm::ALL {
            let mut sel = Selector::new(algo, SelectorConfig::new(3)).unwrap();
            sel.retire(1).unwrap();
            for _ in 0..200 {
                let d = sel.select(&mut rng).unwrap();
                assert_ne!(d.arm, 1, "{algo}");
                sel.observe(d.arm, 0.5).unwrap();
            }
            sel.retire(0).unwrap();
            sel.retire(2).unwrap();
            assert_eq!(sel.select(&mut rng), Err(SelectorError::NoEligibleArms));
        }
    }

    #[test]
    fn selection_is_deterministic_given_stream() {
        for algo in Algorithm::ALL {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let mut sel = Selector::new(algo, SelectorConfig::new(4)).unwrap();
                (0..100)
                    .map(|t| {
                        let d = sel.select(&mut rng).unwrap();
                        sel.observe(d.arm, ((t * 7 + d.arm) % 10) as f64 / 10.0).unwrap();
                        d.arm
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run(), "{algo}");
        }
    }
}
