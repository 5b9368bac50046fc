use rand::Rng;

use super::rollout::{play_episode, Actor, PolicyActor};
use super::TrainerError;
use crate::exec::Exec;
use crate::micropolicy::{sample_response, PolicyParams};
use crate::questworld::{expert_rollout, TaskCategory, TaskSampler};
use crate::seed;

/// Greedy evaluation over held-out tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Indexed by [`TaskCategory::index`]; `None` for inactive categories.
    pub per_category: [Option<f64>; 4],
    /// `Σ_c weight_c · success_c` over active categories.
    pub weighted: f64,
    /// Mean over evaluation seeds of each seed's weighted success.
    pub seed_mean: f64,
    /// Population variance of the per-seed weighted successes.
    pub seed_variance: f64,
    pub median_action_prob: Option<f64>,
    pub invalid_rate: f64,
    pub episodes: usize,
}

/// Recomputes the weighted average from per-category rates.
pub fn weighted_success(sampler: &TaskSampler, per_category: &[Option<f64>; 4]) -> f64 {
    TaskCategory::ALL
        .iter()
        .filter_map(|&c| per_category[c.index()].map(|s| sampler.weights().get(c) * s))
        .sum()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Plays `episodes` episodes per active category, split round-robin across
/// `eval_seeds`. Tasks and layouts come from the evaluation seed stream and
/// never overlap the training pool's stream.
pub fn evaluate(actor: &dyn Actor, sampler: &TaskSampler, episodes: usize, eval_seeds: &[u64], exec: Exec) -> Result<EvalResult, TrainerError> {
    assert!(episodes >= 1 && !eval_seeds.is_empty());
    let active = sampler.weights().active();
    let jobs: Vec<(TaskCategory, usize, usize)> = active
        .iter()
        .flat_map(|&c| (0..episodes).map(move |j| (c, j % eval_seeds.len(), j)))
        .collect();
    let results = exec.map(&jobs, |&(c, s, j)| {
        let mut rng = seed::derived_rng(eval_seeds[s], seed::stream::EVAL, (c.index() as u64) << 32 | j as u64);
        let task = sampler.sample_for(c, &mut rng);
        let layout_seed = rng.random();
        play_episode(actor, &task, layout_seed, &mut rng)
    });
    let k = eval_seeds.len();
    let mut wins = vec![[0usize; 4]; k];
    let mut counts = vec![[0usize; 4]; k];
    let (mut steps, mut invalid) = (0usize, 0usize);
    let mut probs = Vec::new();
    for (&(c, s, _), r) in jobs.iter().zip(results) {
        let r = r?;
        counts[s][c.index()] += 1;
        wins[s][c.index()] += r.success as usize;
        steps += r.steps;
        invalid += r.invalid;
        probs.extend(r.action_probs);
    }
    let mut per_category = [None; 4];
    for &c in &active {
        let w: usize = wins.iter().map(|w| w[c.index()]).sum();
        per_category[c.index()] = Some(w as f64 / episodes as f64);
    }
    // seeds that received at least one episode of every active category
    let per_seed: Vec<f64> = (0..k)
        .filter(|&s| active.iter().all(|c| counts[s][c.index()] > 0))
        .map(|s| {
            active
                .iter()
                .map(|&c| sampler.weights().get(c) * wins[s][c.index()] as f64 / counts[s][c.index()] as f64)
                .sum()
        })
        .collect();
    let seed_mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let seed_variance = super::report::variance(&per_seed);
    Ok(EvalResult {
        weighted: weighted_success(sampler, &per_category),
        per_category,
        seed_mean,
        seed_variance,
        median_action_prob: median(&mut probs),
        invalid_rate: if steps == 0 { 0.0 } else { invalid as f64 / steps as f64 },
        episodes: jobs.len(),
    })
}

/// Greedy policy evaluation.
pub fn evaluate_policy(
    params: &PolicyParams,
    max_thought_tokens: usize,
    sampler: &TaskSampler,
    episodes: usize,
    eval_seeds: &[u64],
    exec: Exec,
) -> Result<EvalResult, TrainerError> {
    let actor = PolicyActor { params, temperature: 0.0, max_thought_tokens };
    evaluate(&actor, sampler, episodes, eval_seeds, exec)
}

/// `p(a|thought)` of responses sampled at `temperature` on a fixed prompt
/// set: the first-step prompts of expert rollouts over `n` profile tasks.
pub fn action_prob_profile(
    params: &PolicyParams,
    sampler: &TaskSampler,
    n: usize,
    temperature: f64,
    max_thought_tokens: usize,
    profile_seed: u64,
    exec: Exec,
) -> Result<Vec<f64>, TrainerError> {
    let out = exec.map_range(n, |i| -> Result<f64, TrainerError> {
        let mut rng = seed::derived_rng(profile_seed, seed::stream::PROFILE, i as u64);
        let task = sampler.sample(&mut rng);
        let steps = expert_rollout(&task, rng.random())?;
        let prompt = &steps[rng.random_range(0..steps.len())].observation.prompt;
        let r = sample_response(params, prompt, temperature, max_thought_tokens, &[], &mut rng)?;
        Ok(r.score().action_prob())
    });
    out.into_iter().collect()
}
