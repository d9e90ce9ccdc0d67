//! The `theory` subcommand: regret-balancing checks on synthetic learners.

use orso::orchestrator::SelectorParams;
use orso::synthetic::{dominated_suite, run_theory_check, CurveSpec, TheoryError, TheoryReport};
use serde::Serialize;

use crate::config::{ConfigError, LoadedConfig};

#[derive(Debug, Serialize)]
pub struct TheoryOutcome {
    pub reports: Vec<TheoryReport>,
    pub noisy: bool,
    pub failures: usize,
    /// Zero-noise cases whose preconditions did not hold.
    pub unclaimed: usize,
}

pub enum TheoryFailure {
    Config(ConfigError),
    Runtime(String),
}

impl From<ConfigError> for TheoryFailure {
    fn from(e: ConfigError) -> Self {
        TheoryFailure::Config(e)
    }
}

fn cases(cfg: &LoadedConfig, noise: f64) -> Result<Vec<(Vec<CurveSpec>, usize, u64)>, ConfigError> {
    let t = &cfg.config.theory;
    if t.horizon == 0 {
        return Err(cfg.error("theory", "horizon", "horizon must be at least 1"));
    }
    if t.seeds == 0 {
        return Err(cfg.error("theory", "seeds", "seeds must be at least 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(cfg.error("theory", "noise", "noise must be finite and non-negative"));
    }
    let noisy = |curves: Vec<CurveSpec>| -> Vec<CurveSpec> {
        curves
            .into_iter()
            .map(|c| {
                let amp = c.noise_amp + noise;
                c.with_noise(amp)
            })
            .collect()
    };
    let mut out = Vec::new();
    match &t.curves {
        Some(curves) => {
            let star = t
                .star
                .ok_or_else(|| cfg.error("theory", "curves", "explicit curves need a `star` index"))?;
            if star >= curves.len() {
                return Err(cfg.error("theory", "star", format!("star {star} out of range for {} curves", curves.len())));
            }
            for c in curves {
                c.validate().map_err(|e| cfg.error("theory", "kind", e.to_string()))?;
            }
            for seed in 0..t.seeds {
                out.push((noisy(curves.clone()), star, seed));
            }
        }
        None => {
            if t.k.is_empty() || t.k.contains(&0) {
                return Err(cfg.error("theory", "k", "k must be a nonempty list of positive sizes"));
            }
            for &k in &t.k {
                for seed in 0..t.seeds {
                    let (curves, star) = dominated_suite(k, t.horizon, seed);
                    out.push((noisy(curves), star, seed));
                }
            }
        }
    }
    Ok(out)
}

pub fn run_theory(cfg: &LoadedConfig, noise: Option<f64>) -> Result<TheoryOutcome, TheoryFailure> {
    let t = &cfg.config.theory;
    let noise = noise.unwrap_or(t.noise);
    let params = t.selector.clone().unwrap_or_default();
    let mut reports = Vec::new();
    for (curves, star, seed) in cases(cfg, noise)? {
        let selector = SelectorParams::config(&params, curves.len());
        match run_theory_check(&curves, star, &selector, t.horizon, seed) {
            Ok(r) => reports.push(r),
            Err(e @ TheoryError::DominanceViolated(_)) => {
                return Err(TheoryFailure::Config(cfg.error("theory", "curves", e.to_string())))
            }
            Err(e @ (TheoryError::Selector(_) | TheoryError::InvalidCurve(_))) => {
                return Err(TheoryFailure::Config(cfg.error("theory", "selector", e.to_string())))
            }
            Err(e) => return Err(TheoryFailure::Runtime(e.to_string())),
        }
    }
    let failures = reports.iter().filter(|r| r.claims_apply() && !r.passed()).count();
    let unclaimed = reports
        .iter()
        .filter(|r| !r.noisy && !r.precondition_violations.is_empty())
        .count();
    Ok(TheoryOutcome {
        noisy: reports.iter().any(|r| r.noisy),
        reports,
        failures,
        unclaimed,
    })
}

/// One line per curve-set size.
pub fn report_lines(outcome: &TheoryOutcome) -> Vec<String> {
    let mut sizes: Vec<usize> = outcome.reports.iter().map(|r| r.k).collect();
    sizes.dedup();
    let mut lines = Vec::new();
    for k in sizes {
        let group: Vec<&TheoryReport> = outcome.reports.iter().filter(|r| r.k == k).collect();
        let n = group.len();
        if group.iter().any(|r| r.noisy) {
            let ci: u64 = group.iter().map(|r| r.ci_violations).sum();
            let held = group.iter().filter(|r| r.passed()).count();
            lines.push(format!(
                "k={k}: {held}/{n} runs satisfied the checks; {ci} rounds left the confidence event; no pass/fail claim under noise"
            ));
        } else {
            let passed = group.iter().filter(|r| r.claims_apply() && r.passed()).count();
            let unclaimed = group.iter().filter(|r| !r.claims_apply()).count();
            let mut line = format!("k={k}: {passed}/{n} passed");
            if unclaimed > 0 {
                line.push_str(&format!(" ({unclaimed} without a claim: preconditions not met)"));
            }
            lines.push(line);
        }
    }
    lines
}
