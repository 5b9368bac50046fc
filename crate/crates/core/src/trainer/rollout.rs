use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainerError;
use crate::micropolicy::{sample_response, PolicyParams, ReferencePolicy};
use crate::questworld::{compose_response, expert, Lexicon, QuestEnv, TaskSampler, TaskSpec, TokenSeq};
use crate::seed;
use crate::trajectory::{context_key, step_scores, CachedScores, StepRecord};

/// One decision: the full response and, for model policies, `p(a|thought)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub response: TokenSeq,
    pub action_prob: Option<f64>,
}

/// Anything that can play an episode.
pub trait Actor: Sync {
    fn act(&self, env: &QuestEnv, rng: &mut ChaCha8Rng) -> Result<Decision, TrainerError>;
}

/// Samples from the token policy; temperature 0 decodes greedily.
pub struct PolicyActor<'a> {
    pub params: &'a PolicyParams,
    pub temperature: f64,
    pub max_thought_tokens: usize,
}

impl Actor for PolicyActor<'_> {
    fn act(&self, env: &QuestEnv, rng: &mut ChaCha8Rng) -> Result<Decision, TrainerError> {
        let obs = env.observation();
        let r = sample_response(self.params, &obs.prompt, self.temperature, self.max_thought_tokens, &obs.admissible, rng)?;
        let p = r.score().action_prob();
        Ok(Decision { response: r.tokens, action_prob: Some(p) })
    }
}

/// Picks uniformly among the admissible commands, with an empty thought.
pub struct RandomActor;

impl Actor for RandomActor {
    fn act(&self, env: &QuestEnv, rng: &mut ChaCha8Rng) -> Result<Decision, TrainerError> {
        let obs = env.observation();
        let action = obs.admissible.choose(rng).cloned().unwrap_or_default();
        Ok(Decision { response: compose_response(&[], &action), action_prob: None })
    }
}

/// Follows the BFS planner with its templated thoughts.
pub struct ExpertActor;

impl Actor for ExpertActor {
    fn act(&self, env: &QuestEnv, _rng: &mut ChaCha8Rng) -> Result<Decision, TrainerError> {
        let lex = Lexicon::standard();
        let plan = expert::plan(env.state(), env.task().goal()).unwrap_or_default();
        let action = plan.first().map(|a| a.tokens(lex)).unwrap_or_default();
        let thought = expert::thought(env.state(), &plan);
        Ok(Decision { response: compose_response(&thought, &action), action_prob: None })
    }
}

/// Outcome of one played episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub success: bool,
    pub steps: usize,
    pub invalid: usize,
    /// `p(a|thought)` of each decision, when the actor reports it.
    pub action_probs: Vec<f64>,
}

pub fn play_episode(actor: &dyn Actor, task: &TaskSpec, layout_seed: u64, rng: &mut ChaCha8Rng) -> Result<EpisodeSummary, TrainerError> {
    let mut env = QuestEnv::reset(task, layout_seed);
    let mut summary = EpisodeSummary { success: env.success(), steps: 0, invalid: 0, action_probs: Vec::new() };
    while !env.done() {
        let d = actor.act(&env, rng)?;
        let (_, action) = crate::questworld::split_response(&d.response).unwrap_or((&[], &[]));
        let out = env.step(action)?;
        summary.steps += 1;
        summary.invalid += out.invalid as usize;
        summary.action_probs.extend(d.action_prob);
        summary.success = out.success;
    }
    Ok(summary)
}

/// Task and initial-layout seed of training episode `index`.
///
/// With a non-empty pool, episodes cycle through `pool` fixed draws chosen
/// pseudo-randomly per episode, so identical contexts recur.
pub fn training_start(sampler: &TaskSampler, run_seed: u64, pool: usize, index: u64) -> (TaskSpec, u64) {
    let slot = if pool == 0 { index } else { seed::derive(run_seed, seed::stream::EPISODE, index) % pool as u64 };
    let mut rng = seed::derived_rng(run_seed, seed::stream::POOL, slot);
    let task = sampler.sample(&mut rng);
    (task, rng.random())
}

/// A training episode with per-step records.
#[derive(Debug, Clone)]
pub struct TrainingEpisode {
    pub records: Vec<StepRecord>,
    pub success: bool,
}

impl TrainingEpisode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rolls out `params` at `temperature`, scoring each step and caching the
/// behaviour and (if given) reference sequence scores.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    params: &PolicyParams,
    reference: Option<&ReferencePolicy>,
    task: &TaskSpec,
    layout_seed: u64,
    episode_id: u64,
    temperature: f64,
    max_thought_tokens: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingEpisode, TrainerError> {
    let template = task.template_id();
    let mut env = QuestEnv::reset(task, layout_seed);
    let mut records = Vec::new();
    let mut invalid = Vec::new();
    while !env.done() {
        let obs = env.observation();
        let key = context_key(&template, &env.state().fingerprint());
        let r = sample_response(params, &obs.prompt, temperature, max_thought_tokens, &obs.admissible, rng)?;
        let cached = match reference {
            Some(reference) => Some(CachedScores { behavior: r.score(), reference: reference.score(&obs.prompt, &r.tokens)? }),
            None => None,
        };
        let out = env.step(r.action())?;
        invalid.push(out.invalid);
        records.push(StepRecord {
            episode_id,
            step: records.len() as u32,
            category: task.category(),
            context_key: key,
            prompt: obs.prompt,
            response: r.tokens,
            admissible: !out.invalid,
            success: false,
            score: 0.0,
            cached,
        });
    }
    let success = env.success();
    let scores = step_scores(success, &invalid, gamma)?;
    for (rec, s) in records.iter_mut().zip(scores) {
        rec.success = success;
        rec.score = s;
    }
    Ok(TrainingEpisode { records, success })
}
