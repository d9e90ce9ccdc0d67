//! Desk-scale gridworld and tabular Q-learning, the base learners behind
//! each candidate shaping reward.

mod grid;
mod trainer;

use thiserror::Error;

use crate::generation::RewardUid;

pub use grid::{
    env_step, features, shaped_reward, shaped_reward_calls, Action, Cell, Grid, GridSpec,
    Transition, FEATURE_COUNT, FEATURE_NAMES,
};
pub use trainer::{evaluate, optimal_policy, train_slice, EvalResult, Policy, SliceStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SandboxError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("reward {uid} produced a non-finite value ({value})")]
    InvalidReward { uid: RewardUid, value: f64 },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("policy table has {got} cells but the grid has {expected}")]
    PolicyShape { got: usize, expected: usize },
}
