use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use super::TrainerError;
use crate::exec::Exec;
use crate::micropolicy::{
    freeze_reference, grad_scalar_with, optimizer_step, AdamState, Batch, LossConfig, LossSpec, PolicyParams,
    ReferencePolicy, SeqExample,
};
use crate::questworld::expert_rollout;
use crate::seed;

/// `(prompt, thought ACT action EOS)` pairs from scripted expert episodes.
pub fn expert_dataset(cfg: &TrainConfig) -> Result<Vec<SeqExample>, TrainerError> {
    let sampler = cfg.sampler();
    let mut out = Vec::new();
    for i in 0..cfg.sft.episodes as u64 {
        let mut rng = seed::derived_rng(cfg.sft.seed, seed::stream::EXPERT, i);
        let task = sampler.sample(&mut rng);
        for step in expert_rollout(&task, rng.random())? {
            out.push(SeqExample { response: step.response(), prompt: step.observation.prompt });
        }
    }
    Ok(out)
}

/// Untrained parameters for a config.
pub fn initial_params(cfg: &TrainConfig) -> Result<PolicyParams, TrainerError> {
    Ok(PolicyParams::init(cfg.policy.init_seed, cfg.policy.dims())?)
}

/// Cross-entropy training over `examples`; returns the mean per-sequence
/// loss of each epoch. Examples are reshuffled every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_sequences(
    params: &mut PolicyParams,
    examples: &[SeqExample],
    epochs: usize,
    learning_rate: f64,
    batch: usize,
    shuffle_seed: u64,
    exec: Exec,
) -> Result<Vec<f64>, TrainerError> {
    let cfg = LossConfig::new(LossSpec::SftCe);
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut seed::derived_rng(shuffle_seed, seed::stream::SFT, epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(batch.max(1)) {
            let chunk: Vec<SeqExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let out = grad_scalar_with(exec, params, &cfg, Batch::Seq(&chunk)).map_err(|e| TrainerError::Diverged {
                phase: "sft",
                detail: format!("epoch {epoch}: {e}"),
            })?;
            total += out.loss;
            optimizer_step(params, &out.grad, &mut adam, learning_rate)?;
        }
        let mean = total / examples.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(TrainerError::Diverged { phase: "sft", detail: format!("epoch {epoch}: loss {mean}") });
        }
        history.push(mean);
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct SftResult {
    pub params: PolicyParams,
    pub reference: ReferencePolicy,
    pub epoch_losses: Vec<f64>,
    pub examples: usize,
}

/// Behaviour cloning on the scripted expert; the result also becomes the
/// frozen reference.
pub fn run_sft(cfg: &TrainConfig, exec: Exec) -> Result<SftResult, TrainerError> {
    if cfg.sft.episodes == 0 {
        return Err(TrainerError::Config("sft.episodes: expert set must not be empty".into()));
    }
    let data = expert_dataset(cfg)?;
    let mut params = initial_params(cfg)?;
    let epoch_losses = train_sequences(&mut params, &data, cfg.sft.epochs, cfg.sft.learning_rate, cfg.sft.batch, cfg.sft.seed, exec)?;
    let reference = freeze_reference(&params);
    Ok(SftResult { params, reference, epoch_losses, examples: data.len() })
}
