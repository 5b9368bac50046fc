//! Finite-difference oracle shared by the gradient tests and the acceptance
//! run. Losses are re-evaluated from public scoring and loss functions only;
//! nothing here touches the analytic backward pass.
#![allow(dead_code)]

use rand::Rng;
use tcpo_core::micropolicy::{
    grad_scalar, score_response, Batch, LossConfig, LossSpec, PairBranch, PairExample, PolicyDims, PolicyParams,
    ReinforceExample, SeqExample,
};
use tcpo_core::preference::{apw_loss, dpo_naive_loss, tcpo_loss, BranchStats, PairStats};
use tcpo_core::questworld::{ACT, BOS, EOS};
use tcpo_core::{seed, Token, TokenSeq};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Components smaller than `FD_FLOOR * max(1, |loss|)` in both estimates are
/// compared against that floor instead. Central-difference roundoff grows
/// like `eps * |loss| / step`, so tinier components are not resolvable to
/// four digits.
pub const FD_FLOOR: f64 = 1e-6;

pub fn oracle_dims() -> PolicyDims {
    PolicyDims::new(20, 8, 8, 6)
}

pub enum Instance {
    Seq(Vec<SeqExample>),
    Pairs(Vec<PairExample>),
    Reinforce(Vec<ReinforceExample>),
}

impl Instance {
    pub fn batch(&self) -> Batch<'_> {
        match self {
            Instance::Seq(b) => Batch::Seq(b),
            Instance::Pairs(b) => Batch::Pairs(b),
            Instance::Reinforce(b) => Batch::Reinforce(b),
        }
    }
}

fn tokens<R: Rng>(rng: &mut R, n: usize, lo: usize, hi: usize) -> TokenSeq {
    (0..n).map(|_| rng.random_range(lo..hi) as Token).collect()
}

/// `thought ACT action EOS` with thought tokens from `[4, split)` and action
/// tokens from `[split, V)`.
pub fn response<R: Rng>(rng: &mut R, v: usize, split: usize) -> TokenSeq {
    let (nt, na) = (rng.random_range(1..5), rng.random_range(1..4));
    let mut r = tokens(rng, nt, 4, split);
    r.push(ACT);
    r.extend(tokens(rng, na, split, v));
    r.push(EOS);
    r
}

pub fn prompt<R: Rng>(rng: &mut R, split: usize) -> TokenSeq {
    let mut p = vec![BOS];
    let n = rng.random_range(1..9);
    p.extend(tokens(rng, n, 4, split));
    p
}

fn branch<R: Rng>(rng: &mut R, reference: &PolicyParams, prompt: &TokenSeq, v: usize, split: usize) -> (PairBranch, Vec<f64>) {
    let response = response(rng, v, split);
    let s = score_response(reference, prompt, &response).unwrap();
    (PairBranch { prompt: prompt.clone(), response, ref_joint_logp: s.total() }, s.action_token_probs())
}

pub fn pair_instance<R: Rng>(rng: &mut R, reference: &PolicyParams, n: usize, split: usize) -> Vec<PairExample> {
    let v = reference.dims().vocab;
    (0..n)
        .map(|_| {
            let p = prompt(rng, split);
            let (win, win_ref_action_probs) = branch(rng, reference, &p, v, split);
            let (lose, _) = branch(rng, reference, &p, v, split);
            PairExample { win, lose, win_ref_action_probs }
        })
        .collect()
}

pub fn instance_for<R: Rng>(spec: LossSpec, rng: &mut R, reference: &PolicyParams) -> Instance {
    let v = reference.dims().vocab;
    let split = 4 + (v - 4) / 2;
    match spec {
        LossSpec::SftCe => Instance::Seq(
            (0..2).map(|_| SeqExample { prompt: prompt(rng, split), response: response(rng, v, split) }).collect(),
        ),
        LossSpec::Reinforce => Instance::Reinforce(
            (0..2)
                .map(|_| ReinforceExample {
                    prompt: prompt(rng, split),
                    response: response(rng, v, split),
                    advantage: rng.random_range(-3.0..3.0),
                })
                .collect(),
        ),
        _ => Instance::Pairs(pair_instance(rng, reference, 2, split)),
    }
}

/// Branch statistics under `params`; `frozen_p` replaces the action
/// probability when it is treated as a constant.
fn branch_stats(params: &PolicyParams, b: &PairBranch, frozen_p: Option<f64>) -> (BranchStats, Vec<f64>) {
    let s = score_response(params, &b.prompt, &b.response).unwrap();
    let stats = BranchStats {
        thought_logp: s.thought_logp,
        ref_joint_logp: b.ref_joint_logp,
        action_prob: frozen_p.unwrap_or(s.action_prob()),
    };
    (stats, s.action_token_probs())
}

/// Scalar loss of `instance` at `params`. With `anchor = Some(θ0)` the action
/// probabilities inside the preference term are evaluated at θ0.
pub fn oracle_loss(params: &PolicyParams, cfg: &LossConfig, instance: &Instance, anchor: Option<&PolicyParams>) -> f64 {
    match instance {
        Instance::Seq(b) => b.iter().map(|e| -score_response(params, &e.prompt, &e.response).unwrap().total()).sum(),
        Instance::Reinforce(b) => b
            .iter()
            .map(|e| -e.advantage * score_response(params, &e.prompt, &e.response).unwrap().total())
            .sum(),
        Instance::Pairs(b) => b
            .iter()
            .map(|e| {
                let frozen = |br: &PairBranch| anchor.map(|a| score_response(a, &br.prompt, &br.response).unwrap().action_prob());
                let (w, wq) = branch_stats(params, &e.win, frozen(&e.win));
                let (l, _) = branch_stats(params, &e.lose, frozen(&e.lose));
                let stats = PairStats { win: w, lose: l, win_action_probs: wq, win_ref_action_probs: e.win_ref_action_probs.clone() };
                let r = match cfg.spec {
                    LossSpec::DpoNaive => dpo_naive_loss(&stats, cfg.beta),
                    LossSpec::TcpoApw => apw_loss(&stats, cfg.beta),
                    LossSpec::TcpoFull { kappa } => tcpo_loss(&stats, cfg.beta, kappa),
                    LossSpec::DpoApc { kappa } => dpo_naive_loss(&stats, cfg.beta)
                        .map(|mut r| {
                            r.loss += kappa * r.apc_penalty;
                            r
                        }),
                    _ => unreachable!(),
                };
                r.unwrap().loss
            })
            .sum(),
    }
}

pub fn central_difference(params: &PolicyParams, i: usize, f: &dyn Fn(&PolicyParams) -> f64) -> f64 {
    let mut plus = params.as_slice().to_vec();
    let mut minus = plus.clone();
    plus[i] += FD_STEP;
    minus[i] -= FD_STEP;
    let pp = PolicyParams::from_vec(*params.dims(), plus).unwrap();
    let pm = PolicyParams::from_vec(*params.dims(), minus).unwrap();
    (f(&pp) - f(&pm)) / (2.0 * FD_STEP)
}

pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = FD_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdSummary {
    pub instances: usize,
    pub components: usize,
    pub max_rel_err: f64,
}

/// Checks every parameter coordinate of `instances` random instances.
pub fn fd_check(cfg: &LossConfig, instances: usize, base_seed: u64) -> FdSummary {
    let mut summary = FdSummary::default();
    for k in 0..instances as u64 {
        let mut rng = seed::rng(seed::derive(base_seed, 100, k));
        let params = PolicyParams::init(rng.random(), oracle_dims()).unwrap();
        let reference = PolicyParams::init(rng.random(), oracle_dims()).unwrap();
        let inst = instance_for(cfg.spec, &mut rng, &reference);
        let analytic = grad_scalar(&params, cfg, inst.batch()).unwrap();
        let anchor = if cfg.stop_gradient { Some(&params) } else { None };
        let f = |p: &PolicyParams| oracle_loss(p, cfg, &inst, anchor);
        assert!((f(&params) - analytic.loss).abs() <= 1e-10 * analytic.loss.abs().max(1.0));
        for (i, &a) in analytic.grad.iter().enumerate() {
            let n = central_difference(&params, i, &f);
            summary.max_rel_err = summary.max_rel_err.max(relative_error(a, n, analytic.loss));
            summary.components += 1;
        }
        summary.instances += 1;
    }
    summary
}

pub fn all_specs() -> Vec<LossSpec> {
    vec![
        LossSpec::SftCe,
        LossSpec::DpoNaive,
        LossSpec::TcpoApw,
        LossSpec::TcpoFull { kappa: 0.1 },
        LossSpec::Reinforce,
    ]
}
