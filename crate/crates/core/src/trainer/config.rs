use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::micropolicy::{LossConfig, LossSpec, PolicyDims};
use crate::questworld::{CategoryWeights, Layout, Lexicon, TaskCategory, TaskSampler};
use crate::trajectory::DEFAULT_PER_KEY_CAP;

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Weighted thought loss plus κ times the action consistency penalty.
    Tcpo,
    /// Joint thought+action step-wise DPO.
    DpoNaive,
    /// Weighted thought loss without the penalty.
    ApwOnly,
    /// Joint loss plus the penalty.
    ApcOnly,
    /// Policy gradient with a moving-average baseline.
    Reinforce,
    /// No online updates after behaviour cloning.
    SftOnly,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Tcpo, Method::DpoNaive, Method::ApwOnly, Method::ApcOnly, Method::Reinforce, Method::SftOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tcpo => "tcpo",
            Method::DpoNaive => "dpo_naive",
            Method::ApwOnly => "apw_only",
            Method::ApcOnly => "apc_only",
            Method::Reinforce => "reinforce",
            Method::SftOnly => "sft_only",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Loss differentiated during online updates, if any.
    pub fn loss_spec(self, kappa: f64) -> Option<LossSpec> {
        match self {
            Method::Tcpo => Some(LossSpec::TcpoFull { kappa }),
            Method::DpoNaive => Some(LossSpec::DpoNaive),
            Method::ApwOnly => Some(LossSpec::TcpoApw),
            Method::ApcOnly => Some(LossSpec::DpoApc { kappa }),
            Method::Reinforce => Some(LossSpec::Reinforce),
            Method::SftOnly => None,
        }
    }

    pub fn uses_pairs(self) -> bool {
        !matches!(self, Method::Reinforce | Method::SftOnly)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Network shape; the vocabulary size always comes from the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed: usize,
    pub hidden: usize,
    pub context: usize,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { embed: 16, hidden: 48, context: 20, init_seed: 0 }
    }
}

impl PolicyConfig {
    pub fn dims(&self) -> PolicyDims {
        PolicyDims::new(Lexicon::standard().len(), self.embed, self.hidden, self.context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub layout: Layout,
    pub weights: CategoryWeights,
    /// Training episodes start from this many fixed (task, layout) draws per
    /// seed so that contexts recur and can be paired. `0` draws every
    /// episode fresh.
    pub seed_pool: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { layout: Layout::default(), weights: CategoryWeights::uniform(), seed_pool: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub episodes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { episodes: 200, epochs: 1, learning_rate: 1e-2, batch: 4, seed: 0 }
    }
}

fn d_temperature() -> f64 {
    0.2
}
fn d_gamma() -> f64 {
    0.99
}
fn d_kappa() -> f64 {
    0.1
}
fn d_beta() -> f64 {
    0.1
}
fn d_grad_accum() -> usize {
    256
}
fn d_start() -> u64 {
    1000
}
fn d_max_env_steps() -> u64 {
    5000
}
fn d_episodes_per_update() -> usize {
    1
}
fn d_eval_every() -> u64 {
    1000
}
fn d_eval_episodes() -> usize {
    200
}
fn d_eval_seeds() -> Vec<u64> {
    vec![0]
}
fn d_max_thought() -> usize {
    16
}
fn d_true() -> bool {
    true
}
fn d_per_key_cap() -> usize {
    DEFAULT_PER_KEY_CAP
}
fn d_reinforce_window() -> usize {
    100
}
fn d_profile_prompts() -> usize {
    200
}

/// Run configuration. `learning_rate`, `seeds` and `method` are required;
/// everything else has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub method: Method,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Pair gradients summed per optimizer step.
    #[serde(default = "d_grad_accum")]
    pub grad_accum: usize,
    /// Collected steps before the first update.
    #[serde(default = "d_start")]
    pub start_training_samples: u64,
    #[serde(default = "d_max_env_steps")]
    pub max_env_steps: u64,
    /// Episodes collected (in parallel) between optimizer steps.
    #[serde(default = "d_episodes_per_update")]
    pub episodes_per_update: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    /// Greedy evaluation episodes per active category.
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    /// Evaluation episodes are split evenly across these seeds; the metrics
    /// report the mean and variance of per-seed weighted success.
    #[serde(default = "d_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default = "d_max_thought")]
    pub max_thought_tokens: usize,
    /// Treat `p(a|thought)` as a constant in the preference losses.
    #[serde(default = "d_true")]
    pub stop_gradient: bool,
    #[serde(default = "d_per_key_cap")]
    pub buffer_per_key_cap: usize,
    #[serde(default)]
    pub buffer_capacity: Option<usize>,
    /// Window of the REINFORCE moving-average baseline, in steps.
    #[serde(default = "d_reinforce_window")]
    pub reinforce_window: usize,
    /// Prompts used for the end-of-run action-probability profile.
    #[serde(default = "d_profile_prompts")]
    pub profile_prompts: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub sft: SftConfig,
}

impl TrainConfig {
    /// Defaults for every optional field.
    pub fn new(method: Method, learning_rate: f64, seeds: Vec<u64>) -> Self {
        let json = serde_json::json!({ "method": method, "learning_rate": learning_rate, "seeds": seeds });
        serde_json::from_value(json).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainerError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let err = |field: &str, why: &str| Err(TrainerError::Config(format!("{field}: {why}")));
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.learning_rate) {
            return err("learning_rate", "must be positive");
        }
        if self.seeds.is_empty() {
            return err("seeds", "must not be empty");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return err("temperature", "must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("gamma", "must lie in (0, 1]");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return err("kappa", "must be non-negative");
        }
        if !positive(self.beta) {
            return err("beta", "must be positive");
        }
        for (field, v) in [
            ("grad_accum", self.grad_accum),
            ("episodes_per_update", self.episodes_per_update),
            ("eval_episodes", self.eval_episodes),
            ("max_thought_tokens", self.max_thought_tokens),
            ("buffer_per_key_cap", self.buffer_per_key_cap),
            ("reinforce_window", self.reinforce_window),
            ("sft.batch", self.sft.batch),
        ] {
            if v == 0 {
                return err(field, "must be at least 1");
            }
        }
        if self.eval_every == 0 {
            return err("eval_every", "must be at least 1");
        }
        if self.eval_seeds.is_empty() {
            return err("eval_seeds", "must not be empty");
        }
        if self.sft.episodes > 0 && !positive(self.sft.learning_rate) {
            return err("sft.learning_rate", "must be positive");
        }
        self.policy.dims().validate().map_err(|e| TrainerError::Config(format!("policy: {e}")))?;
        TaskSampler::new(self.world.layout, self.world.weights).map_err(|e| TrainerError::Config(format!("world: {e}")))?;
        Ok(())
    }

    pub fn loss_config(&self) -> Option<LossConfig> {
        self.method
            .loss_spec(self.kappa)
            .map(|spec| LossConfig { spec, beta: self.beta, stop_gradient: self.stop_gradient })
    }

    pub fn sampler(&self) -> TaskSampler {
        TaskSampler::new(self.world.layout, self.world.weights).expect("validated config")
    }

    pub fn active_categories(&self) -> Vec<TaskCategory> {
        self.world.weights.active()
    }
}
