//! Thought-centric preference optimization at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`questworld`]: a deterministic sparse-reward text world with a scripted
//!   BFS expert and a fixed token protocol (`thought* ACT action EOS`).
//! - [`micropolicy`]: a fixed-window token MLP with hand-written reverse-mode
//!   gradients, sampling, Adam and frozen reference snapshots.
//! - [`preference`]: the step-wise preference loss family (joint DPO,
//!   action-probability weighting, action-policy consistency) and diagnostics.
//! - [`trajectory`]: preference scores, per-step credit assignment, the
//!   replay buffer and contrastive pair construction.
//! - [`trainer`]: behaviour cloning, the online rollout/pair/update loop,
//!   baselines, evaluation and the ablation harness.
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is on and produces bitwise-identical results either way.

pub mod exec;
pub mod micropolicy;
pub mod preference;
pub mod questworld;
pub mod seed;
pub mod trainer;
pub mod trajectory;

pub use exec::Exec;
pub use questworld::{Lexicon, Token, TokenSeq};
