//! Online selection of shaping rewards.
//!
//! A set of candidate shaping rewards is treated as the arms of a model
//! selection problem: each arm is a (reward, policy) pair that advances by one
//! training slice when chosen, and is scored by evaluating its policy on the
//! task reward. The crate bundles
//!
//! - [`selector`]: D³RB and the Exp3 / UCB / ETC / ε-greedy / round-robin
//!   baselines,
//! - [`synthetic`]: learners with prescribed learning curves for checking the
//!   regret-balancing guarantees exactly,
//! - [`sandbox`]: a gridworld with a tabular Q-learning trainer,
//! - [`generation`]: parametric reward sampling with validity filtering and
//!   half-evolved / half-fresh resampling,
//! - [`orchestrator`]: the selection loop, the naive baseline and regret
//!   bookkeeping.

pub mod generation;
pub mod orchestrator;
pub mod rng;
pub mod sandbox;
pub mod selector;
pub mod synthetic;

pub use generation::{GeneratorSpec, Provenance, RewardSpec, RewardUid};
pub use orchestrator::{RunConfig, RunRecord, RunSummary};
pub use sandbox::{GridSpec, Policy};
pub use selector::{Algorithm, Selector, SelectorConfig};
