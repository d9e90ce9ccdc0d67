//! The reward generator: parametric sampling of shaping-reward weights,
//! rejection sampling against a random-policy probe, and half-evolved /
//! half-fresh resampling.
//!
//! A [`CandidateSet`] can only be produced by a [`Generator`], and every spec
//! in it has passed [`validity_check`]. Each admission decision is appended
//! to the generator's audit log.

mod external;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, RunRng, Stream};
use crate::sandbox::{
    env_step, shaped_reward, Action, Grid, SandboxError, FEATURE_COUNT, FEATURE_NAMES,
};

pub use external::{parse_response, AdapterError, ExternalAdapter, GenerationRequest};

pub type Weights = [f64; FEATURE_COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardUid(pub u64);

impl fmt::Display for RewardUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{:05}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Fresh,
    Evolved { parent: RewardUid },
    External,
    Fixture,
}

/// A linear shaping reward over the sandbox feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub uid: RewardUid,
    pub weights: Weights,
    pub provenance: Provenance,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultValue {
    Nan,
    PosInf,
    NegInf,
}

impl FaultValue {
    fn value(self) -> f64 {
        match self {
            FaultValue::Nan => f64::NAN,
            FaultValue::PosInf => f64::INFINITY,
            FaultValue::NegInf => f64::NEG_INFINITY,
        }
    }
}

/// Test hook: corrupt one weight of a fraction of freshly sampled specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub rate: f64,
    pub value: FaultValue,
}

/// Independent normal distribution per weight, plus the knobs for
/// evolution and validity checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub means: Weights,
    pub stds: Weights,
    pub evolve_sigma: f64,
    /// Largest admissible |shaped reward| on the validity probe.
    pub f_max: f64,
    pub probe_steps: usize,
    /// Consecutive rejections allowed per requested spec.
    pub attempts_per_spec: usize,
    pub fault: Option<FaultInjection>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            means: [0.0, 0.0, 0.0, 0.0, 0.5],
            stds: [0.5, 0.5, 0.05, 0.5, 0.5],
            evolve_sigma: 0.1,
            f_max: 10.0,
            probe_steps: 500,
            attempts_per_spec: 100,
            fault: None,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidSpec(m));
        if self.means.iter().any(|m| !m.is_finite()) {
            return bad("means must be finite".into());
        }
        if self.stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("standard deviations must be finite and non-negative".into());
        }
        if !(self.evolve_sigma >= 0.0 && self.evolve_sigma.is_finite()) {
            return bad("evolve_sigma must be finite and non-negative".into());
        }
        if self.f_max.is_nan() || self.f_max <= 0.0 {
            return bad(format!("f_max must be positive, got {}", self.f_max));
        }
        if self.probe_steps == 0 {
            return bad("probe_steps must be at least 1".into());
        }
        if self.attempts_per_spec == 0 {
            return bad("attempts_per_spec must be at least 1".into());
        }
        if let Some(f) = self.fault {
            if !(0.0..=1.0).contains(&f.rate) {
                return bad(format!("fault rate must lie in [0, 1], got {}", f.rate));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Ok,
    NonFinite,
    ExceedsBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub accepted: bool,
    pub reason: VerdictReason,
}

impl ValidityVerdict {
    fn from_reason(reason: VerdictReason) -> Self {
        Self {
            accepted: reason == VerdictReason::Ok,
            reason,
        }
    }
}

/// Rolls a uniform-random policy for `probe_steps` transitions and rejects
/// the reward if any shaped reward is non-finite or exceeds `f_max` in
/// magnitude. Passing the probe makes validity likely, not certain.
pub fn validity_check<R: Rng + ?Sized>(
    spec: &RewardSpec,
    grid: &Grid,
    probe_steps: usize,
    f_max: f64,
    rng: &mut R,
) -> ValidityVerdict {
    if spec.weights.iter().any(|w| !w.is_finite()) {
        return ValidityVerdict::from_reason(VerdictReason::NonFinite);
    }
    let mut cell = grid.spec().start;
    let mut steps = 0;
    for _ in 0..probe_steps {
        let action = Action::from_index(rng.random_range(0..Action::COUNT));
        let t = env_step(grid, cell, action, steps, rng);
        match shaped_reward(spec, grid, &t) {
            Err(_) => return ValidityVerdict::from_reason(VerdictReason::NonFinite),
            Ok(r) if r.abs() > f_max => {
                return ValidityVerdict::from_reason(VerdictReason::ExceedsBound)
            }
            Ok(_) => {}
        }
        steps += 1;
        cell = t.to;
        if t.done {
            cell = grid.spec().start;
            steps = 0;
        }
    }
    ValidityVerdict::from_reason(VerdictReason::Ok)
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("generator exhausted: {attempts} consecutive rejections while filling {k} slots")]
    Exhausted { k: usize, attempts: usize },
    #[error("fixture reward {index} rejected: {reason:?}")]
    FixtureRejected { index: usize, reason: VerdictReason },
    #[error("requested set size {0} is too small")]
    SetTooSmall(usize),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// One admission decision, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub uid: RewardUid,
    pub epoch: u32,
    pub provenance: Provenance,
    pub verdict: ValidityVerdict,
}

/// Rewards admitted for one epoch. Only a [`Generator`] can build one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    specs: Vec<RewardSpec>,
    epoch: u32,
    rejections: usize,
}

impl CandidateSet {
    pub fn specs(&self) -> &[RewardSpec] {
        &self.specs
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Rejections incurred while filling this set.
    pub fn rejections(&self) -> usize {
        self.rejections
    }

    /// Reorders the candidates; `order[i]` is the old index of new slot `i`.
    pub fn permute(&mut self, order: &[usize]) {
        assert_eq!(order.len(), self.specs.len(), "permutation length");
        let old = self.specs.clone();
        self.specs = order.iter().map(|&i| old[i].clone()).collect();
    }

    #[cfg(test)]
    pub(crate) fn corrupt_for_test(&mut self, index: usize, weights: Weights) {
        self.specs[index].weights = weights;
    }
}

/// Stateful reward generator owned by one run.
#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    rng: RunRng,
    next_uid: u64,
    epoch: u32,
    audit: Vec<AuditEntry>,
    adapter: Option<ExternalAdapter>,
    fallbacks: usize,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self, GenerationError> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: rng::stream(seed, Stream::Generator),
            next_uid: 0,
            epoch: 0,
            audit: Vec::new(),
            adapter: None,
            fallbacks: 0,
        })
    }

    pub fn with_adapter(mut self, adapter: ExternalAdapter) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    /// Times the external adapter failed and parametric sampling took over.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    fn allocate(&mut self, weights: Weights, provenance: Provenance) -> RewardSpec {
        let uid = RewardUid(self.next_uid);
        self.next_uid += 1;
        RewardSpec {
            uid,
            weights,
            provenance,
            epoch: self.epoch,
        }
    }

    /// One fresh draw from the weight distributions (not yet checked).
    pub fn sample_spec(&mut self) -> RewardSpec {
        let mut weights = [0.0; FEATURE_COUNT];
        for (j, w) in weights.iter_mut().enumerate() {
            *w = normal(self.spec.means[j], self.spec.stds[j]).sample(&mut self.rng);
        }
        if let Some(fault) = self.spec.fault {
            if self.rng.random::<f64>() < fault.rate {
                let j = self.rng.random_range(0..FEATURE_COUNT);
                weights[j] = fault.value.value();
            }
        }
        self.allocate(weights, Provenance::Fresh)
    }

    fn evolve(&mut self, parent: &RewardSpec) -> RewardSpec {
        let mut weights = parent.weights;
        let noise = normal(0.0, self.spec.evolve_sigma);
        for w in &mut weights {
            *w += noise.sample(&mut self.rng);
        }
        self.allocate(weights, Provenance::Evolved { parent: parent.uid })
    }

    /// Runs the validity probe and logs the decision.
    fn admit(&mut self, spec: &RewardSpec, grid: &Grid) -> ValidityVerdict {
        let verdict = validity_check(spec, grid, self.spec.probe_steps, self.spec.f_max, &mut self.rng);
        self.audit.push(AuditEntry {
            uid: spec.uid,
            epoch: spec.epoch,
            provenance: spec.provenance,
            verdict,
        });
        verdict
    }

    /// Draws from `draw` until `count` specs pass the probe.
    fn fill(
        &mut self,
        count: usize,
        grid: &Grid,
        out: &mut Vec<RewardSpec>,
        rejections: &mut usize,
        mut draw: impl FnMut(&mut Self) -> RewardSpec,
    ) -> Result<(), GenerationError> {
        let max_attempts = self.spec.attempts_per_spec * count.max(1);
        let target = out.len() + count;
        let mut consecutive = 0;
        while out.len() < target {
            let spec = draw(self);
            if self.admit(&spec, grid).accepted {
                out.push(spec);
                consecutive = 0;
            } else {
                *rejections += 1;
                consecutive += 1;
                if consecutive >= max_attempts {
                    return Err(GenerationError::Exhausted {
                        k: count,
                        attempts: consecutive,
                    });
                }
            }
        }
        Ok(())
    }

    /// `k` fresh specs that all passed the validity probe.
    pub fn sample_valid_set(&mut self, k: usize, grid: &Grid) -> Result<CandidateSet, GenerationError> {
        if k == 0 {
            return Err(GenerationError::SetTooSmall(k));
        }
        if self.adapter.is_some() {
            return self.external_set(k, grid, None);
        }
        let mut specs = Vec::with_capacity(k);
        let mut rejections = 0;
        self.fill(k, grid, &mut specs, &mut rejections, Self::sample_spec)?;
        Ok(CandidateSet {
            specs,
            epoch: self.epoch,
            rejections,
        })
    }

    /// Starts a new epoch: `ceil(k/2)` perturbations of `best` and
    /// `floor(k/2)` fresh draws, all probed.
    pub fn resample_set(
        &mut self,
        best: &RewardSpec,
        k: usize,
        grid: &Grid,
    ) -> Result<CandidateSet, GenerationError> {
        if k < 2 {
            return Err(GenerationError::SetTooSmall(k));
        }
        self.epoch += 1;
        if self.adapter.is_some() {
            return self.external_set(k, grid, Some(best));
        }
        let evolved = k.div_ceil(2);
        let mut specs = Vec::with_capacity(k);
        let mut rejections = 0;
        self.fill(evolved, grid, &mut specs, &mut rejections, |g| g.evolve(best))?;
        self.fill(k - evolved, grid, &mut specs, &mut rejections, Self::sample_spec)?;
        Ok(CandidateSet {
            specs,
            epoch: self.epoch,
            rejections,
        })
    }

    /// Admits a fixed list of weight vectors; any rejection is an error.
    pub fn admit_fixture(&mut self, fixture: &[Weights], grid: &Grid) -> Result<CandidateSet, GenerationError> {
        if fixture.is_empty() {
            return Err(GenerationError::SetTooSmall(0));
        }
        let mut specs = Vec::with_capacity(fixture.len());
        for (index, w) in fixture.iter().enumerate() {
            let spec = self.allocate(*w, Provenance::Fixture);
            let verdict = self.admit(&spec, grid);
            if !verdict.accepted {
                return Err(GenerationError::FixtureRejected {
                    index,
                    reason: verdict.reason,
                });
            }
            specs.push(spec);
        }
        Ok(CandidateSet {
            specs,
            epoch: self.epoch,
            rejections: 0,
        })
    }

    /// Asks the external adapter for `k` candidates; rejected or missing
    /// ones are filled parametrically, and adapter failures fall back to
    /// parametric sampling entirely.
    fn external_set(
        &mut self,
        k: usize,
        grid: &Grid,
        best: Option<&RewardSpec>,
    ) -> Result<CandidateSet, GenerationError> {
        let request = GenerationRequest {
            k,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            best_weights: best.map(|b| b.weights),
        };
        let adapter = self.adapter.as_mut().expect("adapter present");
        let proposals = match external::external_generate(&request, adapter) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("external generator failed ({e}); falling back to parametric sampling");
                self.fallbacks += 1;
                if !adapter.is_usable() {
                    self.adapter = None;
                }
                Vec::new()
            }
        };
        let mut specs = Vec::with_capacity(k);
        let mut rejections = 0;
        for w in proposals.into_iter().take(k) {
            let spec = self.allocate(w, Provenance::External);
            if self.admit(&spec, grid).accepted {
                specs.push(spec);
            } else {
                rejections += 1;
            }
        }
        let missing = k - specs.len();
        if let (Some(best), true) = (best, missing > 0) {
            let evolved = k.div_ceil(2).saturating_sub(specs.len()).min(missing);
            self.fill(evolved, grid, &mut specs, &mut rejections, |g| g.evolve(best))?;
        }
        let missing = k - specs.len();
        self.fill(missing, grid, &mut specs, &mut rejections, Self::sample_spec)?;
        Ok(CandidateSet {
            specs,
            epoch: self.epoch,
            rejections,
        })
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated standard deviation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::GridSpec;

    fn grid() -> Grid {
        Grid::new(GridSpec::open(5, 0.0, 50)).unwrap()
    }

    fn fixed(spec: &RewardSpec) -> RewardSpec {
        spec.clone()
    }

    #[test]
    fn degenerate_normals_return_means() {
        let g = GeneratorSpec {
            means: [0.1, -0.2, 0.3, 0.4, 1.0],
            stds: [0.0; FEATURE_COUNT],
            ..GeneratorSpec::default()
        };
        let mut gen = Generator::new(g.clone(), 1).unwrap();
        for _ in 0..5 {
            let s = gen.sample_spec();
            assert_eq!(s.weights, g.means);
            assert_eq!(s.provenance, Provenance::Fresh);
        }
    }

    #[test]
    fn sample_means_match_distribution() {
        let g = GeneratorSpec {
            means: [0.0; FEATURE_COUNT],
            stds: [1.0; FEATURE_COUNT],
            ..GeneratorSpec::default()
        };
        let mut gen = Generator::new(g, 2).unwrap();
        let n = 10_000;
        let mut sums = [0.0; FEATURE_COUNT];
        for _ in 0..n {
            for (s, w) in sums.iter_mut().zip(gen.sample_spec().weights) {
                *s += w;
            }
        }
        let sigma = 1.0 / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() <= 3.0 * sigma, "{s}");
        }
    }

    #[test]
    fn uids_are_distinct() {
        let mut gen = Generator::new(GeneratorSpec::default(), 3).unwrap();
        let a = gen.sample_spec();
        let b = gen.sample_spec();
        assert_ne!(a.uid, b.uid);
        assert_eq!(a.uid.to_string(), "f00000");
    }

    #[test]
    fn verdicts() {
        let g = grid();
        let mut rng = rng::stream(0, Stream::Generator);
        let identity = RewardSpec {
            uid: RewardUid(0),
            weights: [0.0, 0.0, 0.0, 0.0, 1.0],
            provenance: Provenance::Fresh,
            epoch: 0,
        };
        let v = validity_check(&identity, &g, 500, 10.0, &mut rng);
        assert_eq!(v, ValidityVerdict { accepted: true, reason: VerdictReason::Ok });

        let mut nan = fixed(&identity);
        nan.weights[1] = f64::NAN;
        let v = validity_check(&nan, &g, 500, 10.0, &mut rng);
        assert_eq!(v.reason, VerdictReason::NonFinite);
        assert!(!v.accepted);

        // The step cost is -1 on every transition, so |reward| = 2 f_max.
        let mut big = fixed(&identity);
        big.weights = [0.0, 0.0, 20.0, 0.0, 0.0];
        assert_eq!(validity_check(&big, &g, 500, 10.0, &mut rng).reason, VerdictReason::ExceedsBound);
        big.weights[2] = 10.0;
        assert!(validity_check(&big, &g, 500, 10.0, &mut rng).accepted);
    }

    #[test]
    fn benign_generator_fills_without_rejections() {
        let mut gen = Generator::new(GeneratorSpec::default(), 4).unwrap();
        let set = gen.sample_valid_set(8, &grid()).unwrap();
        assert_eq!(set.len(), 8);
        assert_eq!(set.rejections(), 0);
        assert!(gen.audit_log().iter().all(|e| e.verdict.accepted));
    }

    #[test]
    fn half_nan_generator_rejects_about_k() {
        let spec = GeneratorSpec {
            fault: Some(FaultInjection {
                rate: 0.5,
                value: FaultValue::Nan,
            }),
            ..GeneratorSpec::default()
        };
        let k = 16;
        let runs = 200;
        let mut total = 0usize;
        for seed in 0..runs {
            let mut gen = Generator::new(spec.clone(), seed).unwrap();
            let set = gen.sample_valid_set(k, &grid()).unwrap();
            assert_eq!(set.len(), k);
            assert!(set.specs().iter().all(|s| s.weights.iter().all(|w| w.is_finite())));
            total += set.rejections();
        }
        // Failures before each success are geometric with p = 1/2:
        // mean 1, variance 2 per slot.
        let mean = total as f64 / runs as f64;
        let sigma = (2.0 * k as f64 / runs as f64).sqrt();
        assert!((mean - k as f64).abs() <= 3.0 * sigma, "{mean}");
    }

    #[test]
    fn always_invalid_generator_is_exhausted() {
        let spec = GeneratorSpec {
            fault: Some(FaultInjection {
                rate: 1.0,
                value: FaultValue::PosInf,
            }),
            ..GeneratorSpec::default()
        };
        let mut gen = Generator::new(spec, 5).unwrap();
        let err = gen.sample_valid_set(3, &grid()).unwrap_err();
        assert!(matches!(err, GenerationError::Exhausted { attempts: 300, .. }));
    }

    #[test]
    fn resample_splits_evolved_and_fresh() {
        let mut gen = Generator::new(GeneratorSpec::default(), 6).unwrap();
        let first = gen.sample_valid_set(8, &grid()).unwrap();
        let best = first.specs()[2].clone();
        let next = gen.resample_set(&best, 8, &grid()).unwrap();
        assert_eq!(next.epoch(), 1);
        let evolved = next
            .specs()
            .iter()
            .filter(|s| s.provenance == Provenance::Evolved { parent: best.uid })
            .count();
        assert_eq!(evolved, 4);
        assert_eq!(next.specs().iter().filter(|s| s.provenance == Provenance::Fresh).count(), 4);
        assert!(next.specs().iter().all(|s| s.epoch == 1));

        let odd = gen.resample_set(&best, 5, &grid()).unwrap();
        assert_eq!(odd.specs().iter().filter(|s| matches!(s.provenance, Provenance::Evolved { .. })).count(), 3);
        assert!(matches!(gen.resample_set(&best, 1, &grid()), Err(GenerationError::SetTooSmall(1))));
    }

    #[test]
    fn zero_sigma_evolution_copies_parent() {
        let spec = GeneratorSpec {
            evolve_sigma: 0.0,
            ..GeneratorSpec::default()
        };
        let mut gen = Generator::new(spec, 7).unwrap();
        let best = gen.sample_valid_set(2, &grid()).unwrap().specs()[0].clone();
        let next = gen.resample_set(&best, 4, &grid()).unwrap();
        for s in next.specs().iter().filter(|s| matches!(s.provenance, Provenance::Evolved { .. })) {
            assert_eq!(s.weights, best.weights);
        }
    }

    #[test]
    fn evolved_means_center_on_parent() {
        let spec = GeneratorSpec {
            evolve_sigma: 0.2,
            ..GeneratorSpec::default()
        };
        let mut gen = Generator::new(spec, 8).unwrap();
        let g = grid();
        let best = gen.sample_valid_set(1, &g).unwrap().specs()[0].clone();
        let mut sums = [0.0; FEATURE_COUNT];
        let mut n = 0usize;
        for _ in 0..1000 {
            for s in gen.resample_set(&best, 8, &g).unwrap().specs() {
                if let Provenance::Evolved { parent } = s.provenance {
                    assert_eq!(parent, best.uid);
                    assert!(s.epoch > 0);
                    n += 1;
                    for (acc, w) in sums.iter_mut().zip(s.weights) {
                        *acc += w;
                    }
                }
            }
        }
        assert_eq!(n, 4000);
        let sigma = 0.2 / (n as f64).sqrt();
        for (acc, w) in sums.iter().zip(best.weights) {
            assert!((acc / n as f64 - w).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn fixed_seed_reproduces_sets() {
        let run = || {
            let mut gen = Generator::new(GeneratorSpec::default(), 9).unwrap();
            let a = gen.sample_valid_set(4, &grid()).unwrap();
            let b = gen.resample_set(&a.specs()[0], 4, &grid()).unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fixture_rejection_is_an_error() {
        let mut gen = Generator::new(GeneratorSpec::default(), 10).unwrap();
        let ok = gen.admit_fixture(&[[0.0, 0.0, 0.0, 0.0, 1.0]], &grid()).unwrap();
        assert_eq!(ok.specs()[0].provenance, Provenance::Fixture);
        let err = gen
            .admit_fixture(&[[0.0, 0.0, 0.0, 0.0, 1.0], [f64::NAN, 0.0, 0.0, 0.0, 0.0]], &grid())
            .unwrap_err();
        assert!(matches!(err, GenerationError::FixtureRejected { index: 1, .. }));
    }
}
