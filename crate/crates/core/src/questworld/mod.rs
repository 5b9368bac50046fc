//! MiniQuest: a deterministic sparse-reward text world.
//!
//! Worlds have 3 to 8 locations, up to 6 portable objects, up to 4
//! receptacles, a sink and a lamp. The only feedback is a binary success flag
//! once the task's goal predicate holds. Inadmissible actions are no-ops that
//! still consume one of the episode's `max_steps` steps.

mod env;
pub mod expert;
mod lexicon;
pub mod prompt;
mod task;
mod world;

use thiserror::Error;

pub use env::{compose_response, split_response, Observation, QuestEnv, StepOutcome};
pub use expert::{expert_rollout, ExpertStep};
pub use lexicon::{
    Lexicon, Token, TokenSeq, ACT, BOS, EOS, MAX_LOCATIONS, MAX_OBJECTS, MAX_RECEPTACLES, PAD,
};
pub use task::{CategoryWeights, Goal, TaskCategory, TaskSampler, TaskSpec};
pub use world::{Action, Layout, Placement, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid layout field `{field}`: {reason}")]
    Layout { field: &'static str, reason: String },
    #[error("invalid category weights: {0}")]
    Weights(String),
    #[error("unsatisfiable task: {0}")]
    Unsatisfiable(String),
    #[error("step called after the episode finished")]
    EpisodeDone,
}
