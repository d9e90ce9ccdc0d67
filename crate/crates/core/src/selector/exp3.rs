//! Exp3 with uniform mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_observation, Decision, Diagnostics, Result, SelectorConfig, SelectorError};

/// Weights are divided by their maximum once it exceeds this value.
pub const EXP3_RENORM_THRESHOLD: f64 = 1e100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3State {
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Exp3State {
    pub fn new(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
            probs: vec![1.0 / k as f64; k],
        }
    }

    /// `p_i = (1 - eta) * w_i / sum(w) + eta / K`.
    pub fn recompute_probs(&mut self, eta: f64) {
        let k = self.weights.len() as f64;
        let total: f64 = self.weights.iter().sum();
        for (p, w) in self.probs.iter_mut().zip(&self.weights) {
            *p = (1.0 - eta) * w / total + eta / k;
        }
    }

    /// Divides every weight by the largest one. Leaves `probs` untouched.
    pub fn renormalize(&mut self) {
        let max = self.weights.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
        for w in &mut self.weights {
            *w /= max;
        }
    }
}

/// Samples an arm from `state.probs` using one uniform draw.
pub fn exp3_select<R: Rng + ?Sized>(state: &Exp3State, rng: &mut R) -> Decision {
    select_among(state, &vec![true; state.probs.len()], rng)
}

pub(crate) fn select_among<R: Rng + ?Sized>(
    state: &Exp3State,
    eligible: &[bool],
    rng: &mut R,
) -> Decision {
    let mass: f64 = state
        .probs
        .iter()
        .zip(eligible)
        .filter(|(_, &e)| e)
        .map(|(p, _)| p)
        .sum();
    let target = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    let mut last = None;
    let mut arm = None;
    for (i, p) in state.probs.iter().enumerate() {
        if !eligible[i] {
            continue;
        }
        last = Some(i);
        acc += p;
        if target < acc {
            arm = Some(i);
            break;
        }
    }
    Decision {
        // Rounding can leave `target` just past the final partial sum.
        arm: arm.or(last).unwrap_or(0),
        diagnostics: Diagnostics::Probabilities(state.probs.clone()),
    }
}

/// Importance-weighted update for the arm `it` that was just played.
pub fn exp3_update(state: &mut Exp3State, it: usize, reward: f64, cfg: &SelectorConfig) -> Result<()> {
    let k = state.weights.len();
    if it >= k {
        return Err(SelectorError::ArmOutOfRange { arm: it, k });
    }
    check_observation(it, reward)?;
    let estimate = reward / state.probs[it];
    state.weights[it] *= (cfg.eta * estimate / k as f64).exp();
    if state.weights[it] > EXP3_RENORM_THRESHOLD {
        state.renormalize();
    }
    state.recompute_probs(cfg.eta);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, eta: f64) -> SelectorConfig {
        SelectorConfig {
            eta,
            ..SelectorConfig::new(k)
        }
    }

    #[test]
    fn fresh_state_is_uniform() {
        assert_eq!(Exp3State::new(4).probs, vec![0.25; 4]);
    }

    #[test]
    fn single_arm_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Exp3State::new(1);
        for _ in 0..20 {
            assert_eq!(exp3_select(&s, &mut rng).arm, 0);
        }
    }

    #[test]
    fn replay_gives_same_arm() {
        let s = Exp3State {
            weights: vec![9.0, 1.0],
            probs: vec![0.9, 0.1],
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| exp3_select(&s, &mut rng).arm).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        // The arm is the one the recorded uniform draw dictates.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: f64 = rng.random();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(exp3_select(&s, &mut rng).arm, usize::from(u >= 0.9));
    }

    #[test]
    fn update_example() {
        let mut s = Exp3State::new(2);
        exp3_update(&mut s, 0, 1.0, &cfg(2, 0.1)).unwrap();
        assert!((s.weights[0] - 0.1f64.exp()).abs() < 1e-12);
        assert_eq!(s.weights[1], 1.0);
        assert!((s.probs[0] - 0.522_48).abs() < 1e-5, "{}", s.probs[0]);
    }

    #[test]
    fn zero_reward_changes_nothing() {
        let mut s = Exp3State::new(3);
        let before = s.clone();
        exp3_update(&mut s, 1, 0.0, &cfg(3, 0.1)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn renormalization_keeps_probs() {
        let mut s = Exp3State {
            weights: vec![3.0, 7.5, 1e90],
            probs: vec![0.0; 3],
        };
        s.recompute_probs(0.1);
        let before = s.probs.clone();
        s.renormalize();
        let mut again = s.clone();
        again.recompute_probs(0.1);
        for (a, b) in before.iter().zip(&again.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_stay_finite_over_long_runs() {
        let c = cfg(2, 1.0);
        let mut s = Exp3State::new(2);
        for _ in 0..5000 {
            exp3_update(&mut s, 0, 1.0, &c).unwrap();
        }
        // The losing weight may underflow to zero; the mixture keeps it playable.
        assert!(s.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.probs[1] >= 0.5 - 1e-12);
    }

    proptest! {
        #[test]
        fn distribution_invariants(
            k in 1usize..10,
            eta in 0.01f64..=1.0,
            plays in prop::collection::vec((0usize..10, 0.0f64..=1.0), 1..400),
        ) {
            let c = cfg(k, eta);
            let mut s = Exp3State::new(k);
            for (arm, r) in plays {
                exp3_update(&mut s, arm % k, r, &c).unwrap();
                let total: f64 = s.probs.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for p in &s.probs {
                    prop_assert!(*p >= eta / k as f64);
                }
            }
        }

        #[test]
        fn weight_scale_invariance(
            weights in prop::collection::vec(1e-3f64..1e3, 1..10),
            scale in 1e-6f64..1e6,
            eta in 0.01f64..=1.0,
        ) {
            let k = weights.len();
            let mut a = Exp3State { weights: weights.clone(), probs: vec![0.0; k] };
            let mut b = Exp3State {
                weights: weights.iter().map(|w| w * scale).collect(),
                probs: vec![0.0; k],
            };
            a.recompute_probs(eta);
            b.recompute_probs(eta);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
