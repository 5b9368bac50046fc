//! Exact reverse-mode gradients of the training losses.
//!
//! Every loss is a function of per-position log-probabilities
//! `logp_i = log π(y_i | y_<i)`. A loss first reports `∂L/∂logp_i` for each
//! scored position, then each position is pushed back through the network
//! with `∂logp_i/∂logits = onehot(y_i) - softmax(logits)`.

use serde::{Deserialize, Serialize};

use super::{act_index, score_positions, PolicyError, PolicyParams, PositionCache};
use crate::exec::Exec;
use crate::preference::{pair_loss, BranchStats, LossReport, PairObjective, PairStats};
use crate::questworld::TokenSeq;

/// Which scalar loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossSpec {
    /// Behaviour-cloning cross-entropy over the whole response.
    SftCe,
    /// Joint thought+action step-wise DPO.
    DpoNaive,
    /// Action-probability-weighted thought loss.
    TcpoApw,
    /// Weighted loss plus the action consistency penalty.
    TcpoFull { kappa: f64 },
    /// Joint loss plus the action consistency penalty.
    DpoApc { kappa: f64 },
    /// `-advantage · log π(response)`.
    Reinforce,
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::SftCe => "sft_ce",
            LossSpec::DpoNaive => "dpo_naive",
            LossSpec::TcpoApw => "tcpo_apw",
            LossSpec::TcpoFull { .. } => "tcpo_full",
            LossSpec::DpoApc { .. } => "dpo_apc",
            LossSpec::Reinforce => "reinforce",
        }
    }

    fn pair_form(&self) -> Option<(PairObjective, f64)> {
        match *self {
            LossSpec::DpoNaive => Some((PairObjective::Joint, 0.0)),
            LossSpec::TcpoApw => Some((PairObjective::Weighted, 0.0)),
            LossSpec::TcpoFull { kappa } => Some((PairObjective::Weighted, kappa)),
            LossSpec::DpoApc { kappa } => Some((PairObjective::Joint, kappa)),
            LossSpec::SftCe | LossSpec::Reinforce => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub spec: LossSpec,
    pub beta: f64,
    /// Treat `p(a|thought)` as a constant in the preference term.
    pub stop_gradient: bool,
}

impl LossConfig {
    pub fn new(spec: LossSpec) -> Self {
        Self { spec, beta: 0.1, stop_gradient: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqExample {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
}

/// One side of a preference pair; current-model terms are recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBranch {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    /// Cached `log π_ref(action, thought | prompt)`.
    pub ref_joint_logp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub win: PairBranch,
    pub lose: PairBranch,
    /// Reference per-token probabilities of the winning action.
    pub win_ref_action_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceExample {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Seq(&'a [SeqExample]),
    Pairs(&'a [PairExample]),
    Reinforce(&'a [ReinforceExample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Seq(b) => b.len(),
            Batch::Pairs(b) => b.len(),
            Batch::Reinforce(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summed loss and gradient over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// One report per pair, in batch order (pair losses only).
    pub reports: Vec<LossReport>,
}

impl GradOutput {
    fn zeros(n: usize) -> Self {
        Self { loss: 0.0, grad: vec![0.0; n], reports: Vec::new() }
    }

    fn absorb(&mut self, other: GradOutput) {
        self.loss += other.loss;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.reports.extend(other.reports);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn backprop(params: &PolicyParams, caches: &[PositionCache], coeffs: &[f64], grad: &mut [f64]) {
    let mut dlogits = vec![0.0; params.dims().vocab];
    for (cache, &c) in caches.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (d, p) in dlogits.iter_mut().zip(&cache.probs) {
            *d = -c * p;
        }
        dlogits[cache.target as usize] += c;
        params.backward(&cache.window, &cache.hidden, &dlogits, grad);
    }
}

fn non_finite(term: &str, detail: String) -> PolicyError {
    PolicyError::NonFinite { term: term.to_string(), detail }
}

/// Loss and gradient of uniform-coefficient sequence terms `coeff · Σ logp`.
fn sequence_term(params: &PolicyParams, prompt: &[u16], response: &[u16], coeff: f64, out: &mut GradOutput) -> Result<(), PolicyError> {
    let (logps, caches) = score_positions(params, prompt, response, true);
    let total: f64 = logps.iter().sum();
    if !total.is_finite() {
        return Err(non_finite("sequence log-probability", format!("{total}")));
    }
    out.loss += coeff * total;
    backprop(params, &caches, &vec![coeff; caches.len()], &mut out.grad);
    Ok(())
}

struct ScoredBranch {
    caches: Vec<PositionCache>,
    act: usize,
    stats: BranchStats,
    action_token_probs: Vec<f64>,
}

fn score_branch(params: &PolicyParams, b: &PairBranch) -> Result<ScoredBranch, PolicyError> {
    let act = act_index(&b.response)?;
    let (logps, caches) = score_positions(params, &b.prompt, &b.response, true);
    let thought_logp: f64 = logps[..=act].iter().sum();
    let action_logp: f64 = logps[act + 1..].iter().sum();
    let action_token_probs = logps[act + 1..].iter().map(|l| l.exp()).collect();
    let stats = BranchStats { thought_logp, ref_joint_logp: b.ref_joint_logp, action_prob: action_logp.exp() };
    Ok(ScoredBranch { caches, act, stats, action_token_probs })
}

/// Per-position `∂L/∂logp` for one branch.
fn branch_coeffs(b: &ScoredBranch, d_thought: f64, d_action_prob: f64, apc: &[f64], flow: bool) -> Vec<f64> {
    let mut c = vec![d_thought; b.caches.len()];
    for (k, ck) in c[b.act + 1..].iter_mut().enumerate() {
        *ck = if flow { d_action_prob * b.stats.action_prob } else { 0.0 };
        // consistency penalty always differentiates through the action tokens
        if let Some(&dq) = apc.get(k) {
            *ck += dq * b.action_token_probs[k];
        }
    }
    c
}

fn pair_term(params: &PolicyParams, cfg: &LossConfig, ex: &PairExample, out: &mut GradOutput) -> Result<(), PolicyError> {
    let (objective, kappa) = cfg.spec.pair_form().expect("pair loss");
    let win = score_branch(params, &ex.win)?;
    let lose = score_branch(params, &ex.lose)?;
    let stats = PairStats {
        win: win.stats,
        lose: lose.stats,
        win_action_probs: win.action_token_probs.clone(),
        win_ref_action_probs: ex.win_ref_action_probs.clone(),
    };
    let (report, partials) = pair_loss(&stats, cfg.beta, objective, kappa)?;
    if !report.loss.is_finite() {
        return Err(non_finite("pair loss", format!("{report:?}")));
    }
    let flow = !cfg.stop_gradient;
    let cw = branch_coeffs(&win, partials.thought_win, partials.action_prob_win, &partials.win_action_probs, flow);
    let cl = branch_coeffs(&lose, partials.thought_lose, partials.action_prob_lose, &[], flow);
    backprop(params, &win.caches, &cw, &mut out.grad);
    backprop(params, &lose.caches, &cl, &mut out.grad);
    out.loss += report.loss;
    out.reports.push(report);
    Ok(())
}

fn check_spec(cfg: &LossConfig, batch: &Batch) -> Result<(), PolicyError> {
    let ok = matches!(
        (cfg.spec, batch),
        (LossSpec::SftCe, Batch::Seq(_)) | (LossSpec::Reinforce, Batch::Reinforce(_))
    ) || (cfg.spec.pair_form().is_some() && matches!(batch, Batch::Pairs(_)));
    if !ok {
        return Err(PolicyError::Batch(format!("{} cannot consume this batch kind", cfg.spec.name())));
    }
    if cfg.spec.pair_form().is_some() && !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(PolicyError::Batch(format!("beta must be positive, got {}", cfg.beta)));
    }
    Ok(())
}

/// Examples per accumulation chunk. Fixed so that the summation order, and
/// therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Summed loss and exact gradient over `batch`.
pub fn grad_scalar(params: &PolicyParams, cfg: &LossConfig, batch: Batch) -> Result<GradOutput, PolicyError> {
    grad_scalar_with(Exec::Sequential, params, cfg, batch)
}

/// [`grad_scalar`] with per-chunk work distributed by `exec`.
pub fn grad_scalar_with(exec: Exec, params: &PolicyParams, cfg: &LossConfig, batch: Batch) -> Result<GradOutput, PolicyError> {
    check_spec(cfg, &batch)?;
    let n = params.len();
    fn run<T: Sync>(
        exec: Exec,
        items: &[T],
        n: usize,
        f: impl Fn(&T, &mut GradOutput) -> Result<(), PolicyError> + Sync + Send,
    ) -> Result<GradOutput, PolicyError> {
        let out = exec.chunked_reduce(
            items,
            GRAD_CHUNK,
            |chunk| {
                let mut acc = GradOutput::zeros(n);
                for item in chunk {
                    f(item, &mut acc)?;
                }
                Ok(acc)
            },
            |a: Result<GradOutput, PolicyError>, b| {
                let mut a = a?;
                a.absorb(b?);
                Ok(a)
            },
        );
        out.unwrap_or_else(|| Ok(GradOutput::zeros(n)))
    }
    let out = match batch {
        Batch::Seq(items) => run(exec, items, n, |ex, acc| sequence_term(params, &ex.prompt, &ex.response, -1.0, acc))?,
        Batch::Reinforce(items) => run(exec, items, n, |ex, acc| {
            if !ex.advantage.is_finite() {
                return Err(non_finite("advantage", format!("{}", ex.advantage)));
            }
            act_index(&ex.response)?;
            sequence_term(params, &ex.prompt, &ex.response, -ex.advantage, acc)
        })?,
        Batch::Pairs(items) => run(exec, items, n, |ex, acc| pair_term(params, cfg, ex, acc))?,
    };
    if let Some(i) = out.grad.iter().position(|g| !g.is_finite()) {
        return Err(non_finite("gradient", format!("index {i}")));
    }
    Ok(out)
}
