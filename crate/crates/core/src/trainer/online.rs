use std::collections::VecDeque;
use std::io::{Read, Write};

use super::config::{Method, TrainConfig};
use super::eval::{action_prob_profile, evaluate_policy, EvalResult};
use super::rollout::{collect_episode, training_start};
use super::TrainerError;
use crate::exec::Exec;
use crate::micropolicy::{
    grad_scalar_with, optimizer_step, AdamState, Batch, GradOutput, LossConfig, PairBranch, PairExample, PolicyError,
    PolicyParams, ReferencePolicy, ReinforceExample,
};
use crate::questworld::TaskCategory;
use crate::seed;
use crate::trajectory::{PreferencePair, ReplayBuffer, StepRecord, TrajectoryError};

/// Batch means of the preference-loss diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossDiagnostics {
    /// Mean loss per pair (or per step for REINFORCE).
    pub loss: f64,
    pub apw: Option<f64>,
    pub apc: Option<f64>,
    pub lambda: Option<f64>,
    pub delta_win: Option<f64>,
    pub delta_lose: Option<f64>,
    pub grad_norm: f64,
}

impl LossDiagnostics {
    fn from_output(out: &GradOutput, items: usize) -> Self {
        let n = items.max(1) as f64;
        let mut d = LossDiagnostics { loss: out.loss / n, grad_norm: out.grad_norm(), ..Default::default() };
        if !out.reports.is_empty() {
            let m = out.reports.len() as f64;
            let mean = |f: fn(&crate::preference::LossReport) -> f64| Some(out.reports.iter().map(f).sum::<f64>() / m);
            d.apw = mean(|r| r.apw_term);
            d.apc = mean(|r| r.apc_penalty);
            d.lambda = mean(|r| r.lambda);
            d.delta_win = mean(|r| r.delta_win);
            d.delta_lose = mean(|r| r.delta_lose);
        }
        d
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Environment steps consumed so far.
    pub step: u64,
    /// Nominal evaluation point (a multiple of `eval_every`, or the step
    /// budget for the closing row); aligns rows across seeds.
    pub checkpoint: u64,
    pub updates: u64,
    /// Most recent update, if any.
    pub diagnostics: Option<LossDiagnostics>,
    pub eval: EvalResult,
}

pub const METRICS_HEADER: [&str; 19] = [
    "step",
    "checkpoint",
    "updates",
    "loss",
    "apw",
    "apc",
    "lambda",
    "delta_win",
    "delta_lose",
    "grad_norm",
    "success_weighted",
    "success_mean",
    "success_var",
    "success_pick",
    "success_pick2",
    "success_clean",
    "success_examine",
    "median_action_prob",
    "invalid_rate",
];

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let d = r.diagnostics;
        let e = &r.eval;
        let mut rec = vec![
            r.step.to_string(),
            r.checkpoint.to_string(),
            r.updates.to_string(),
            cell(d.map(|d| d.loss)),
            cell(d.and_then(|d| d.apw)),
            cell(d.and_then(|d| d.apc)),
            cell(d.and_then(|d| d.lambda)),
            cell(d.and_then(|d| d.delta_win)),
            cell(d.and_then(|d| d.delta_lose)),
            cell(d.map(|d| d.grad_norm)),
            e.weighted.to_string(),
            e.seed_mean.to_string(),
            e.seed_variance.to_string(),
        ];
        rec.extend(TaskCategory::ALL.iter().map(|c| cell(e.per_category[c.index()])));
        rec.push(cell(e.median_action_prob));
        rec.push(e.invalid_rate.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The subset of a metrics file the reports need.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsPoint {
    pub step: u64,
    pub checkpoint: u64,
    pub success_weighted: f64,
    pub per_category: [Option<f64>; 4],
    pub median_action_prob: Option<f64>,
}

impl From<&MetricsRow> for MetricsPoint {
    fn from(r: &MetricsRow) -> Self {
        Self {
            step: r.step,
            checkpoint: r.checkpoint,
            success_weighted: r.eval.weighted,
            per_category: r.eval.per_category,
            median_action_prob: r.eval.median_action_prob,
        }
    }
}

/// Reads a metrics file written by [`write_metrics_csv`]; any other header
/// is rejected.
pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsPoint>, TrainerError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(TrainerError::Schema(format!("unexpected metrics header: {}", header.join(","))));
    }
    let num = |s: &str, what: &str| -> Result<f64, TrainerError> {
        s.parse::<f64>().map_err(|_| TrainerError::Schema(format!("bad {what} value `{s}`")))
    };
    let opt = |s: &str, what: &str| -> Result<Option<f64>, TrainerError> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, what).map(Some)
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let int = |i: usize| rec[i].parse::<u64>().map_err(|_| TrainerError::Schema(format!("bad {} `{}`", METRICS_HEADER[i], &rec[i])));
        let mut per_category = [None; 4];
        for (k, slot) in per_category.iter_mut().enumerate() {
            *slot = opt(&rec[13 + k], METRICS_HEADER[13 + k])?;
        }
        out.push(MetricsPoint {
            step: int(0)?,
            checkpoint: int(1)?,
            success_weighted: num(&rec[10], "success_weighted")?,
            per_category,
            median_action_prob: opt(&rec[17], "median_action_prob")?,
        });
    }
    Ok(out)
}

/// Everything a finished online run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub params: PolicyParams,
    /// Every collected step, in collection order, without cached scores.
    pub log: Vec<StepRecord>,
    /// Sampled `p(a|thought)` on the fixed profile prompts after training.
    pub profile: Vec<f64>,
    pub env_steps: u64,
    pub updates: u64,
    pub reference_intact: bool,
}

impl RunResult {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("runs always emit the step-0 row")
    }

    pub fn profile_median(&self) -> Option<f64> {
        super::eval::median(&mut self.profile.clone())
    }
}

fn pair_example(p: &PreferencePair) -> PairExample {
    let branch = |r: &StepRecord| PairBranch {
        prompt: r.prompt.clone(),
        response: r.response.clone(),
        ref_joint_logp: r.cached.as_ref().expect("buffer records carry cached scores").reference.total(),
    };
    PairExample {
        win: branch(p.win),
        lose: branch(p.lose),
        win_ref_action_probs: p.win.cached.as_ref().expect("cached").reference.action_token_probs(),
    }
}

fn diverged(step: u64, detail: String, last_good: &PolicyParams) -> TrainerError {
    TrainerError::NonFinite { step, detail, last_good: Box::new(last_good.clone()) }
}

/// Applies one accumulated gradient; returns its diagnostics, or `None` when
/// the gradient is exactly zero and the step is skipped.
fn apply_update(
    exec: Exec,
    params: &mut PolicyParams,
    adam: &mut AdamState,
    loss_cfg: &LossConfig,
    batch: Batch,
    lr: f64,
    step: u64,
) -> Result<Option<LossDiagnostics>, TrainerError> {
    let out = match grad_scalar_with(exec, params, loss_cfg, batch) {
        Ok(out) => out,
        Err(e @ (PolicyError::NonFinite { .. } | PolicyError::Preference(_))) => return Err(diverged(step, e.to_string(), params)),
        Err(e) => return Err(e.into()),
    };
    let diag = LossDiagnostics::from_output(&out, batch.len());
    if !diag.loss.is_finite() {
        return Err(diverged(step, format!("loss {}", diag.loss), params));
    }
    if out.grad.iter().all(|&g| g == 0.0) {
        return Ok(Some(diag));
    }
    let before = params.clone();
    optimizer_step(params, &out.grad, adam, lr)?;
    if params.as_slice().iter().any(|x| !x.is_finite()) {
        *params = before.clone();
        return Err(diverged(step, "parameters overflowed".into(), &before));
    }
    Ok(Some(diag))
}

/// The online rollout / pair / update loop for one seed.
///
/// Episodes are collected in waves of `episodes_per_update` against a
/// parameter snapshot (in parallel under [`Exec::Parallel`]) and appended in
/// order. Once `start_training_samples` steps have been collected, every
/// wave is followed by one optimizer step on `grad_accum` pairs drawn from
/// the buffer (REINFORCE instead uses the wave's own steps). The policy is
/// evaluated at step 0, whenever another `eval_every` steps have elapsed,
/// and once at the end.
pub fn run_online(cfg: &TrainConfig, run_seed: u64, init: &PolicyParams, reference: &ReferencePolicy, exec: Exec) -> Result<RunResult, TrainerError> {
    cfg.validate()?;
    let sampler = cfg.sampler();
    let loss_cfg = cfg.loss_config();
    let uses_pairs = cfg.method.uses_pairs();
    let mut params = init.clone();
    let mut adam = AdamState::new(params.len());
    let mut buffer = ReplayBuffer::new(cfg.buffer_per_key_cap, cfg.buffer_capacity);
    let mut baseline: VecDeque<f64> = VecDeque::with_capacity(cfg.reinforce_window);
    let mut log = Vec::new();
    let (mut env_steps, mut episode_index, mut updates) = (0u64, 0u64, 0u64);
    let mut diagnostics = None;

    let eval_row = |params: &PolicyParams, step: u64, checkpoint: u64, updates: u64, diagnostics| -> Result<MetricsRow, TrainerError> {
        let eval = evaluate_policy(params, cfg.max_thought_tokens, &sampler, cfg.eval_episodes, &cfg.eval_seeds, exec)?;
        Ok(MetricsRow { step, checkpoint, updates, diagnostics, eval })
    };
    let mut rows = vec![eval_row(&params, 0, 0, 0, None)?];
    let mut next_eval = cfg.eval_every;

    while env_steps < cfg.max_env_steps {
        let wave: Vec<u64> = (episode_index..episode_index + cfg.episodes_per_update as u64).collect();
        episode_index += wave.len() as u64;
        let snapshot = &params;
        let episodes = exec.map(&wave, |&i| {
            let (task, layout_seed) = training_start(&sampler, run_seed, cfg.world.seed_pool, i);
            let mut rng = seed::derived_rng(run_seed, seed::stream::ROLLOUT, i);
            let reference = if uses_pairs { Some(reference) } else { None };
            collect_episode(snapshot, reference, &task, layout_seed, i, cfg.temperature, cfg.max_thought_tokens, cfg.gamma, &mut rng)
        });

        let mut budget_hit = false;
        let mut fresh: Vec<StepRecord> = Vec::new();
        for ep in episodes {
            let ep = ep?;
            if env_steps + ep.len() as u64 > cfg.max_env_steps {
                budget_hit = true;
                break;
            }
            env_steps += ep.len() as u64;
            for rec in ep.records {
                log.push(StepRecord { cached: None, ..rec.clone() });
                if uses_pairs {
                    match buffer.insert(rec) {
                        Ok(()) | Err(TrajectoryError::Full(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                } else {
                    fresh.push(rec);
                }
            }
        }

        if env_steps >= cfg.start_training_samples {
            if let Some(loss_cfg) = &loss_cfg {
                let mut rng = seed::derived_rng(run_seed, seed::stream::UPDATE, updates);
                let applied = if uses_pairs {
                    match buffer.sample_batch(&mut rng, cfg.grad_accum, cfg.start_training_samples) {
                        Ok(pairs) => {
                            let examples: Vec<PairExample> = pairs.iter().map(pair_example).collect();
                            apply_update(exec, &mut params, &mut adam, loss_cfg, Batch::Pairs(&examples), cfg.learning_rate, env_steps)?
                        }
                        Err(TrajectoryError::NotReady { .. } | TrajectoryError::NoPairs) => None,
                        Err(e) => return Err(e.into()),
                    }
                } else if !fresh.is_empty() {
                    let b = if baseline.is_empty() { 0.0 } else { baseline.iter().sum::<f64>() / baseline.len() as f64 };
                    let examples: Vec<ReinforceExample> = fresh
                        .iter()
                        .map(|r| ReinforceExample { prompt: r.prompt.clone(), response: r.response.clone(), advantage: r.score - b })
                        .collect();
                    apply_update(exec, &mut params, &mut adam, loss_cfg, Batch::Reinforce(&examples), cfg.learning_rate, env_steps)?
                } else {
                    None
                };
                if let Some(d) = applied {
                    updates += 1;
                    diagnostics = Some(d);
                }
            }
        }
        for r in &fresh {
            if baseline.len() == cfg.reinforce_window {
                baseline.pop_front();
            }
            baseline.push_back(r.score);
        }

        if env_steps >= next_eval {
            let checkpoint = next_eval;
            while next_eval <= env_steps {
                next_eval += cfg.eval_every;
            }
            rows.push(eval_row(&params, env_steps, checkpoint, updates, diagnostics)?);
        }
        if budget_hit {
            break;
        }
    }
    if rows.last().is_some_and(|r| r.step != env_steps) {
        rows.push(eval_row(&params, env_steps, cfg.max_env_steps, updates, diagnostics)?);
    }
    let profile = action_prob_profile(&params, &sampler, cfg.profile_prompts, cfg.temperature, cfg.max_thought_tokens, 0, exec)?;
    Ok(RunResult {
        method: cfg.method,
        seed: run_seed,
        rows,
        params,
        log,
        profile,
        env_steps,
        updates,
        reference_intact: reference.is_intact(),
    })
}
