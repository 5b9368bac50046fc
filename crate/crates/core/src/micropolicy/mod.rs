//! Fixed-window autoregressive token policy.
//!
//! The last `W` tokens are embedded, concatenated, passed through one tanh
//! layer and projected to a softmax over the lexicon. Gradients are written
//! out by hand for this one architecture; see [`grad`].

mod checkpoint;
pub mod grad;
mod model;
mod optim;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{grad_scalar, grad_scalar_with, Batch, GradOutput, LossConfig, LossSpec, PairBranch, PairExample, ReinforceExample, SeqExample};
pub use model::{ParamLayout, PolicyDims, PolicyParams};
pub use optim::{optimizer_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::questworld::{Token, TokenSeq, ACT, BOS, EOS, PAD};
use model::{log_softmax, softmax};

/// Upper bound on sampled action tokens before EOS is forced. The longest
/// command (`put <object> <receptacle>`) has three.
pub const MAX_ACTION_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("malformed response: no ACT marker")]
    MissingAct,
    #[error("non-finite {term}: {detail}")]
    NonFinite { term: String, detail: String },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Preference(#[from] crate::preference::PreferenceError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Next-token distribution after `context` at `temperature`.
pub fn next_token_dist(params: &PolicyParams, context: &[Token], temperature: f64) -> Result<Vec<f64>, PolicyError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    let (_, logits) = params.forward(&params.window(context));
    Ok(softmax(&logits, temperature))
}

/// Log-probabilities of a response split into thought and action spans.
///
/// The thought span runs through the first ACT marker inclusive; the action
/// span is everything after it (including the closing EOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub token_logps: Vec<f64>,
    /// Index of the ACT marker in the response.
    pub act_index: usize,
    pub thought_logp: f64,
    pub action_logp: f64,
}

impl SequenceScore {
    fn from_logps(token_logps: Vec<f64>, act_index: usize) -> Self {
        let thought_logp = token_logps[..=act_index].iter().sum();
        let action_logp = token_logps[act_index + 1..].iter().sum();
        Self { token_logps, act_index, thought_logp, action_logp }
    }

    /// `log π(thought, action | prompt)`.
    pub fn total(&self) -> f64 {
        self.thought_logp + self.action_logp
    }

    /// `p(a | thought)`.
    pub fn action_prob(&self) -> f64 {
        self.action_logp.exp()
    }

    pub fn action_token_logps(&self) -> &[f64] {
        &self.token_logps[self.act_index + 1..]
    }

    pub fn action_token_probs(&self) -> Vec<f64> {
        self.action_token_logps().iter().map(|l| l.exp()).collect()
    }
}

/// Forward state kept for one scored position.
pub(crate) struct PositionCache {
    pub window: Vec<Token>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
    pub target: Token,
}

pub(crate) fn act_index(response: &[Token]) -> Result<usize, PolicyError> {
    response.iter().position(|&t| t == ACT).ok_or(PolicyError::MissingAct)
}

/// Scores every response position, optionally keeping forward caches.
pub(crate) fn score_positions(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    keep: bool,
) -> (Vec<f64>, Vec<PositionCache>) {
    let mut seq: TokenSeq = Vec::with_capacity(prompt.len() + response.len());
    seq.extend_from_slice(prompt);
    let mut logps = Vec::with_capacity(response.len());
    let mut caches = Vec::with_capacity(if keep { response.len() } else { 0 });
    for &target in response {
        let window = params.window(&seq);
        let (hidden, logits) = params.forward(&window);
        let lsm = log_softmax(&logits);
        logps.push(lsm[target as usize]);
        if keep {
            let probs = lsm.iter().map(|l| l.exp()).collect();
            caches.push(PositionCache { window, hidden, probs, target });
        }
        seq.push(target);
    }
    (logps, caches)
}

pub fn score_response(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<SequenceScore, PolicyError> {
    let act = act_index(response)?;
    let (logps, _) = score_positions(params, prompt, response, false);
    Ok(SequenceScore::from_logps(logps, act))
}

/// A sampled `thought ACT action EOS` response.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: TokenSeq,
    /// Log-probability of each token at temperature 1, forced tokens included.
    pub token_logps: Vec<f64>,
    /// The action span matched one of the admissible commands.
    pub admissible: bool,
    /// The thought hit the token limit and ACT was inserted.
    pub forced_act: bool,
}

impl SampledResponse {
    pub fn action(&self) -> &[Token] {
        crate::questworld::split_response(&self.tokens).map_or(&[], |(_, a)| a)
    }

    /// Same value [`score_response`] returns for these tokens.
    pub fn score(&self) -> SequenceScore {
        let act = self.tokens.iter().position(|&t| t == ACT).expect("sampled responses contain ACT");
        SequenceScore::from_logps(self.token_logps.clone(), act)
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], banned: &[Token], greedy: bool, rng: &mut R) -> Token {
    let allowed = |t: usize| !banned.contains(&(t as Token));
    if greedy {
        let mut best = None;
        for (t, &p) in probs.iter().enumerate().filter(|(t, _)| allowed(*t)) {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((t, p));
            }
        }
        return best.map_or(EOS, |(t, _)| t as Token);
    }
    let total: f64 = probs.iter().enumerate().filter(|(t, _)| allowed(*t)).map(|(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = EOS;
    for (t, &p) in probs.iter().enumerate().filter(|(t, _)| allowed(*t)) {
        last = t as Token;
        if u < p {
            return last;
        }
        u -= p;
    }
    last
}

/// Samples a response. `temperature == 0` decodes greedily.
///
/// Decoding constraints keep the protocol well formed: the thought never
/// contains PAD, BOS or EOS, and the action never contains PAD, BOS or ACT.
/// An ACT is inserted after `max_thought_tokens` thought tokens and an EOS
/// after [`MAX_ACTION_TOKENS`] action tokens.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    temperature: f64,
    max_thought_tokens: usize,
    admissible: &[TokenSeq],
    rng: &mut R,
) -> Result<SampledResponse, PolicyError> {
    let greedy = temperature == 0.0;
    if !greedy && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    let mut seq = prompt.to_vec();
    let start = seq.len();
    let mut token_logps = Vec::new();
    let mut forced_act = false;
    let mut action_start = None;

    loop {
        let (_, logits) = params.forward(&params.window(&seq));
        let lsm = log_softmax(&logits);
        let tok = match action_start {
            None if seq.len() - start >= max_thought_tokens => {
                forced_act = true;
                ACT
            }
            None => draw(&softmax(&logits, if greedy { 1.0 } else { temperature }), &[PAD, BOS, EOS], greedy, rng),
            Some(a) if seq.len() - a >= MAX_ACTION_TOKENS => EOS,
            Some(_) => draw(&softmax(&logits, if greedy { 1.0 } else { temperature }), &[PAD, BOS, ACT], greedy, rng),
        };
        token_logps.push(lsm[tok as usize]);
        seq.push(tok);
        if action_start.is_none() && tok == ACT {
            action_start = Some(seq.len());
        } else if action_start.is_some() && tok == EOS {
            break;
        }
    }
    let tokens = seq.split_off(start);
    let a = action_start.expect("loop exits only after ACT") - start;
    let admissible = admissible.iter().any(|x| x.as_slice() == &tokens[a..tokens.len() - 1]);
    Ok(SampledResponse { tokens, token_logps, admissible, forced_act })
}

/// Immutable snapshot playing the reference policy.
#[derive(Debug, Clone)]
pub struct ReferencePolicy {
    params: Arc<PolicyParams>,
    checksum: u64,
}

/// Deep-copies `params` into a frozen reference.
pub fn freeze_reference(params: &PolicyParams) -> ReferencePolicy {
    ReferencePolicy { checksum: params.checksum(), params: Arc::new(params.clone()) }
}

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Checksum taken at freeze time.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn is_intact(&self) -> bool {
        self.params.checksum() == self.checksum
    }

    pub fn score(&self, prompt: &[Token], response: &[Token]) -> Result<SequenceScore, PolicyError> {
        score_response(&self.params, prompt, response)
    }
}

/// `KL(π_θ(·|context) || π_ref(·|context))` over the next token.
pub fn next_token_kl(params: &PolicyParams, reference: &ReferencePolicy, context: &[Token]) -> Result<f64, PolicyError> {
    let p = next_token_dist(params, context, 1.0)?;
    let q = next_token_dist(reference.params(), context, 1.0)?;
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::questworld::Lexicon;
    use crate::seed;
    use rand::Rng;

    fn small() -> PolicyDims {
        PolicyDims::new(Lexicon::standard().len(), 8, 12, 6)
    }

    fn random_context<R: Rng>(rng: &mut R, v: usize) -> TokenSeq {
        let n = rng.random_range(0..20);
        (0..n).map(|_| rng.random_range(0..v) as Token).collect()
    }

    #[test]
    fn init_is_deterministic_with_expected_size() {
        let dims = PolicyDims::new(64, 16, 32, 24);
        assert_eq!(dims.param_count(), 64 * 16 + 24 * 16 * 32 + 32 + 32 * 64 + 64);
        let a = PolicyParams::init(7, dims).unwrap();
        let b = PolicyParams::init(7, dims).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), dims.param_count());
        assert_ne!(a, PolicyParams::init(8, dims).unwrap());
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(small()).unwrap();
        let v = small().vocab as f64;
        let d = next_token_dist(&p, &[5, 6, 7], 1.0).unwrap();
        assert!(d.iter().all(|x| (x - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn distributions_are_normalized() {
        let p = PolicyParams::init(1, small()).unwrap();
        let mut rng = seed::rng(2);
        for _ in 0..1000 {
            let ctx = random_context(&mut rng, small().vocab);
            let d = next_token_dist(&p, &ctx, 1.0).unwrap();
            assert!(d.iter().all(|x| *x > 0.0));
            assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_sharpens_and_flattens() {
        let p = PolicyParams::init(3, small()).unwrap();
        let ctx = [BOS, 10, 11];
        let max = |t| next_token_dist(&p, &ctx, t).unwrap().into_iter().fold(0.0, f64::max);
        assert!(max(0.2) > max(1.0));
        let flat = next_token_dist(&p, &ctx, 1e9).unwrap();
        let u = 1.0 / small().vocab as f64;
        assert!(flat.iter().all(|x| (x - u).abs() < 1e-6));
        assert!(matches!(next_token_dist(&p, &ctx, 0.0), Err(PolicyError::InvalidTemperature(_))));
    }

    #[test]
    fn empty_context_pads_with_bos() {
        let p = PolicyParams::init(3, small()).unwrap();
        assert_eq!(next_token_dist(&p, &[], 1.0).unwrap(), next_token_dist(&p, &[BOS], 1.0).unwrap());
    }

    #[test]
    fn minimal_response_score() {
        let p = PolicyParams::init(4, small()).unwrap();
        let prompt = [BOS, 9];
        let (t, a) = (12 as Token, 20 as Token);
        let s = score_response(&p, &prompt, &[t, ACT, a]).unwrap();
        let q = next_token_dist(&p, &prompt, 1.0).unwrap()[t as usize];
        let act = next_token_dist(&p, &[BOS, 9, t], 1.0).unwrap()[ACT as usize];
        let r = next_token_dist(&p, &[BOS, 9, t, ACT], 1.0).unwrap()[a as usize];
        assert!((s.thought_logp - (q.ln() + act.ln())).abs() < 1e-12);
        assert!((s.action_logp - r.ln()).abs() < 1e-12);
        assert!((s.action_prob() - r).abs() < 1e-12);
        assert!(matches!(score_response(&p, &prompt, &[t, a]), Err(PolicyError::MissingAct)));
    }

    #[test]
    fn chain_rule_matches_repeated_next_token_calls() {
        let p = PolicyParams::init(5, small()).unwrap();
        let mut rng = seed::rng(6);
        for _ in 0..20 {
            let prompt = random_context(&mut rng, small().vocab);
            let mut resp: TokenSeq = (0..8).map(|_| rng.random_range(4..small().vocab) as Token).collect();
            resp[rng.random_range(0..8)] = ACT;
            let s = score_response(&p, &prompt, &resp).unwrap();
            let mut ctx = prompt.clone();
            let mut total = 0.0;
            for &tok in &resp {
                total += next_token_dist(&p, &ctx, 1.0).unwrap()[tok as usize].ln();
                ctx.push(tok);
            }
            assert!((s.total() - total).abs() < 1e-12);
            assert!((s.token_logps.iter().sum::<f64>() - s.total()).abs() < 1e-12);
            assert!(s.token_logps.iter().all(|l| l.exp() > 0.0 && l.exp() <= 1.0));
        }
    }

    #[test]
    fn greedy_sampling_is_reproducible_and_well_formed() {
        let p = PolicyParams::init(8, small()).unwrap();
        let prompt = [BOS, 30, 31];
        let mut r1 = seed::rng(1);
        let mut r2 = seed::rng(2);
        let a = sample_response(&p, &prompt, 0.0, 16, &[], &mut r1).unwrap();
        let b = sample_response(&p, &prompt, 0.0, 16, &[], &mut r2).unwrap();
        assert_eq!(a, b);
        for s in 0..50 {
            let r = sample_response(&p, &prompt, 1.0, 4, &[], &mut seed::rng(s)).unwrap();
            assert_eq!(r.tokens.iter().filter(|&&t| t == ACT).count(), 1);
            assert_eq!(*r.tokens.last().unwrap(), EOS);
            let act = act_index(&r.tokens).unwrap();
            assert!(act <= 4);
            assert!(r.tokens.len() - act - 1 <= MAX_ACTION_TOKENS + 1);
            let direct = score_response(&p, &prompt, &r.tokens).unwrap();
            let cached = r.score();
            assert_eq!(cached.act_index, direct.act_index);
            for (x, y) in cached.token_logps.iter().zip(&direct.token_logps) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_is_an_immutable_snapshot() {
        let mut p = PolicyParams::init(9, small()).unwrap();
        let r = freeze_reference(&p);
        let resp = [12, 13, ACT, 14, EOS];
        assert_eq!(r.score(&[BOS], &resp).unwrap(), score_response(&p, &[BOS], &resp).unwrap());
        assert!(next_token_kl(&p, &r, &[BOS, 12]).unwrap().abs() < 1e-15);
        let mut state = AdamState::new(p.len());
        for _ in 0..100 {
            let g = vec![0.5; p.len()];
            optimizer_step(&mut p, &g, &mut state, 1e-2).unwrap();
        }
        assert!(r.is_intact());
        assert_ne!(r.score(&[BOS], &resp).unwrap(), score_response(&p, &[BOS], &resp).unwrap());
        assert!(next_token_kl(&p, &r, &[BOS, 12]).unwrap() > 0.0);
    }
}
