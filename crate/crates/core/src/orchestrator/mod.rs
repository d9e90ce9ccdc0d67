//! The selection loop over shaping rewards, the naive sequential baseline,
//! and best-so-far / regret bookkeeping.

mod records;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::{GenerationError, RewardUid, Weights};
use crate::sandbox::{Policy, SandboxError};
use crate::selector::{Algorithm, SelectorConfig, SelectorError};
use crate::generation::RewardSpec;

pub use records::{read_records, write_records, RecordWriter};
pub use run::{initial_set, naive_baseline, run, run_orso, run_orso_with, RunOutput, Snapshot};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("normalized regret needs a positive reference value, got {0}")]
    ZeroReference(f64),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record: {0}")]
    Record(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// A bandit strategy driving the selection loop, or the naive baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Orso(Algorithm),
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Orso(a) => a.name(),
            Method::Naive => "naive",
        }
    }

    pub fn all() -> Vec<Method> {
        let mut v: Vec<_> = Algorithm::ALL.into_iter().map(Method::Orso).collect();
        v.push(Method::Naive);
        v
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "naive" {
            return Ok(Method::Naive);
        }
        s.parse().map(Method::Orso).map_err(|_| {
            let names: Vec<_> = Method::all().into_iter().map(Method::name).collect();
            format!("unknown algorithm `{s}` (valid: {})", names.join(", "))
        })
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub enabled: bool,
    /// Pulls every live arm needs before the regret trigger may fire.
    pub min_pulls: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_pulls: 5,
        }
    }
}

/// Selector hyperparameters; `k` comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorParams {
    pub delta: f64,
    pub c: f64,
    pub d_min: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub ucb_c: f64,
    /// Exploration rounds for explore-then-commit; `None` means 5K.
    pub t0: Option<u64>,
}

impl Default for SelectorParams {
    fn default() -> Self {
        let d = SelectorConfig::new(1);
        Self {
            delta: d.delta,
            c: d.c,
            d_min: d.d_min,
            eta: d.eta,
            epsilon: d.epsilon,
            ucb_c: d.ucb_c,
            t0: None,
        }
    }
}

impl SelectorParams {
    pub fn config(&self, k: usize) -> SelectorConfig {
        let mut cfg = SelectorConfig::new(k);
        cfg.delta = self.delta;
        cfg.c = self.c;
        cfg.d_min = self.d_min;
        cfg.eta = self.eta;
        cfg.epsilon = self.epsilon;
        cfg.ucb_c = self.ucb_c;
        if let Some(t0) = self.t0 {
            cfg.t0 = t0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget_b: u64,
    /// Episodes one full training run uses.
    pub n_iters: u64,
    /// Episodes per selection step; `None` means `n_iters / 100`.
    pub slice_n: Option<u64>,
    pub k: usize,
    pub algo: Method,
    pub seed: u64,
    pub resample: ResampleConfig,
    /// Reference return for normalized regret.
    pub j_ref: f64,
    /// Greedy rollouts per evaluation.
    pub n_eval: u64,
    /// Declared task-return range, mapped onto [0, 1] for the selector.
    pub reward_range: (f64, f64),
    pub thresholds: Vec<f64>,
    pub selector: SelectorParams,
    /// Stamp records with elapsed wall time. Off by default so replays are
    /// byte-identical.
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn new(algo: Method, k: usize, budget_b: u64, seed: u64) -> Self {
        Self {
            budget_b,
            n_iters: 2000,
            slice_n: None,
            k,
            algo,
            seed,
            resample: ResampleConfig::default(),
            j_ref: 1.0,
            n_eval: 64,
            reward_range: (0.0, 1.0),
            thresholds: vec![0.5, 0.9],
            selector: SelectorParams::default(),
            record_wall_time: false,
        }
    }

    pub fn slice(&self) -> u64 {
        self.slice_n.unwrap_or((self.n_iters / 100).max(1))
    }

    /// Selection steps the budget pays for.
    pub fn total_steps(&self) -> u64 {
        self.budget_b * self.n_iters / self.slice()
    }

    pub fn selector_config(&self) -> SelectorConfig {
        self.selector.config(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        if self.budget_b == 0 {
            return bad("budget_b must be at least 1".into());
        }
        if self.n_iters == 0 {
            return bad("n_iters must be at least 1".into());
        }
        if self.slice_n == Some(0) {
            return bad("slice_n must be at least 1".into());
        }
        if self.slice() > self.n_iters {
            return bad(format!("slice_n {} exceeds n_iters {}", self.slice(), self.n_iters));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.n_eval == 0 {
            return bad("n_eval must be at least 1".into());
        }
        let (lo, hi) = self.reward_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("reward_range must satisfy low < high, got ({lo}, {hi})"));
        }
        if !self.j_ref.is_finite() {
            return bad("j_ref must be finite".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("threshold {t} outside [0, 1]"));
        }
        if self.resample.enabled && self.k < 2 {
            return bad("resampling needs k >= 2".into());
        }
        if let Method::Orso(algo) = self.algo {
            let cfg = self.selector_config();
            let checked = if algo == Algorithm::D3rb {
                cfg.validate()
            } else {
                cfg.validate_ranges()
            };
            checked.map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Maps a task return onto [0, 1] for the selector.
    pub fn normalize(&self, j: f64) -> f64 {
        let (lo, hi) = self.reward_range;
        ((j - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// One selection step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: u32,
    pub step: u64,
    pub arm: usize,
    pub uid: RewardUid,
    pub j_hat: f64,
    pub best_so_far_j: f64,
    /// D³RB balancing state of the chosen arm before the update.
    pub d_hat: Option<f64>,
    pub phi: Option<f64>,
    /// Exp3 probability of the chosen arm.
    pub prob: Option<f64>,
    /// UCB index or empirical mean of the chosen arm.
    pub score: Option<f64>,
    pub dead: bool,
    pub episodes_cum: u64,
    pub env_steps_cum: u64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub theta: f64,
    pub step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: Method,
    pub seed: u64,
    pub k: usize,
    pub budget_b: u64,
    pub n_iters: u64,
    pub slice_n: u64,
    pub steps_taken: u64,
    pub episodes_consumed: u64,
    pub env_steps: u64,
    pub epochs: u32,
    pub best_uid: Option<RewardUid>,
    pub best_weights: Option<Weights>,
    pub best_j: f64,
    pub best_step: Option<u64>,
    pub j_ref: f64,
    pub final_regret: f64,
    /// `None` when the reference value is zero.
    pub final_norm_regret: Option<f64>,
    pub iterations_to_threshold: Vec<ThresholdHit>,
    pub candidate_uids: Vec<RewardUid>,
    pub dead_uids: Vec<RewardUid>,
    pub untrained_uids: Vec<RewardUid>,
    pub rejections: usize,
    pub records_file: Option<String>,
}

/// Running maximum.
pub fn best_so_far(js: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    js.iter()
        .map(|&j| {
            best = best.max(j);
            best
        })
        .collect()
}

/// `j_star - best_so_far(js)`.
pub fn regret_curve(js: &[f64], j_star: f64) -> Vec<f64> {
    best_so_far(js).into_iter().map(|b| j_star - b).collect()
}

/// Regret divided by the reference value; may be negative when the run
/// beats the reference.
pub fn normalized_regret_curve(js: &[f64], j_star: f64) -> Result<Vec<f64>> {
    if j_star == 0.0 || !j_star.is_finite() {
        return Err(OrchestratorError::ZeroReference(j_star));
    }
    Ok(regret_curve(js, j_star).into_iter().map(|r| r / j_star).collect())
}

/// First step whose best-so-far value reaches `theta`.
pub fn iterations_to_threshold(records: &[RunRecord], theta: f64) -> Option<u64> {
    records.iter().find(|r| r.best_so_far_j >= theta).map(|r| r.step)
}

/// Inputs to the resampling decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState<'a> {
    /// Pulls of each live arm in the current epoch.
    pub pulls: &'a [u64],
    pub slice_n: u64,
    pub n_iters: u64,
    pub epoch: u32,
    pub min_pulls: u64,
    pub epoch_best: Option<f64>,
    pub prior_best: Option<f64>,
}

/// Fires when some arm has received a full training run, or when, after
/// the first epoch, every arm has been tried enough and the epoch still
/// trails the best found before it.
pub fn resample_trigger(s: &TriggerState<'_>) -> bool {
    let max_pulls = s.pulls.iter().copied().max().unwrap_or(0);
    if max_pulls * s.slice_n >= s.n_iters {
        return true;
    }
    if s.epoch == 0 || s.pulls.is_empty() || s.pulls.iter().any(|&n| n < s.min_pulls) {
        return false;
    }
    match (s.epoch_best, s.prior_best) {
        (Some(cur), Some(prior)) => cur < prior,
        (None, Some(_)) => true,
        _ => false,
    }
}

pub(crate) fn best_of(spec: &RewardSpec, policy: &Policy, j: f64, epoch: u32, step: u64) -> Snapshot {
    Snapshot {
        epoch,
        step,
        spec: spec.clone(),
        j_hat: j,
        policy: policy.clone(),
    }
}
