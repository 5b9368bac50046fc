//! Behaviour cloning, the online preference loop, baselines, evaluation and
//! the ablation harness.

mod config;
mod eval;
mod online;
mod report;
mod rollout;
mod sft;

use thiserror::Error;

pub use config::{Method, PolicyConfig, SftConfig, TrainConfig, WorldConfig};
pub use eval::{action_prob_profile, evaluate, evaluate_policy, median, weighted_success, EvalResult};
pub use online::{
    read_metrics_csv, run_online, write_metrics_csv, LossDiagnostics, MetricsPoint, MetricsRow, RunResult, METRICS_HEADER,
};
pub use report::{
    aggregate_curves, kappa_table, run_kappa_sweep, sample_efficiency, steps_to_threshold, variance, write_curves_csv,
    write_efficiency_csv, write_kappa_csv, CurvePoint, EfficiencyCell, EfficiencyTable, KappaTable, DEFAULT_KAPPAS,
    TABLE_ROWS,
};
pub use rollout::{
    collect_episode, play_episode, training_start, Actor, Decision, EpisodeSummary, ExpertActor, PolicyActor, RandomActor,
    TrainingEpisode,
};
pub use sft::{expert_dataset, initial_params, run_sft, train_sequences, SftResult};

use crate::micropolicy::{PolicyError, PolicyParams};
use crate::questworld::WorldError;
use crate::trajectory::TrajectoryError;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config: {0}")]
    Config(String),
    #[error("{phase} diverged: {detail}")]
    Diverged { phase: &'static str, detail: String },
    /// A non-finite loss or parameter during online training; carries the
    /// parameters from before the failing update.
    #[error("non-finite value at env step {step}: {detail}")]
    NonFinite { step: u64, detail: String, last_good: Box<PolicyParams> },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Behaviour cloning followed by the configured online method for one seed.
pub fn run_pipeline(cfg: &TrainConfig, seed: u64, exec: crate::Exec) -> Result<(SftResult, RunResult), TrainerError> {
    let sft = run_sft(cfg, exec)?;
    let run = run_online(cfg, seed, &sft.params, &sft.reference, exec)?;
    Ok((sft, run))
}
