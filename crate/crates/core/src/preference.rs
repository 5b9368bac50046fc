//! Step-wise preference losses over thought/action pairs.
//!
//! For a pair of steps sharing a context, each branch carries the current
//! thought log-probability `log π_θ(T|τ)`, the cached reference joint
//! log-probability `log π_ref(a, T|τ)` and the action probability
//! `p = p(a|T)` under the current model.
//!
//! - joint objective: `-log σ(β[log p_w + log π_θ(T_w) - log π_ref(a_w,T_w)] - β[... lose ...])`
//! - weighted objective: `-log σ(β p_w [log π_θ(T_w) - log π_ref(a_w,T_w)] - β p_l [...])`
//! - consistency penalty: `κ ‖π_θ(a_w|T_w) - π_ref(a_w|T_w)‖₂` over the winning
//!   action's per-token probabilities.
//!
//! The two objectives differ per branch by `Δ(p) = log p + (1 - p)·logratio`,
//! which vanishes as `p → 1`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreferenceError {
    #[error("{what} must lie in (0, 1], got {value}")]
    Probability { what: &'static str, value: f64 },
    #[error("{what} must be a finite log-probability <= 0, got {value}")]
    LogProb { what: &'static str, value: f64 },
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("kappa must be non-negative, got {0}")]
    Kappa(f64),
    #[error("action probability vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow; `-log σ(x) = softplus(-x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `Q = β (log π_θ - log π_ref)`.
pub fn q_value(beta: f64, logp_theta: f64, logp_ref: f64) -> f64 {
    beta * (logp_theta - logp_ref)
}

/// Inverts [`q_value`]: the KL-regularised optimum `π_ref · exp(Q / β)`.
pub fn optimal_policy(pi_ref: f64, q: f64, beta: f64) -> f64 {
    pi_ref * (q / beta).exp()
}

/// Bradley-Terry probability that the first branch is preferred,
/// `e^{q_w} / (e^{q_w} + e^{q_l}) = σ(q_w - q_l)`.
pub fn bt_preference_prob(q_win: f64, q_lose: f64) -> f64 {
    sigmoid(q_win - q_lose)
}

fn check_prob(what: &'static str, p: f64) -> Result<(), PreferenceError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(PreferenceError::Probability { what, value: p })
    }
}

fn check_logp(what: &'static str, l: f64) -> Result<(), PreferenceError> {
    if l.is_finite() && l <= 0.0 {
        Ok(())
    } else {
        Err(PreferenceError::LogProb { what, value: l })
    }
}

/// `Δ(p) = log p + (1 - p)·log_ratio`, with
/// `log_ratio = log π_θ(T|τ) - log π_ref(a, T|τ)`.
pub fn approximation_gap(p: f64, log_ratio: f64) -> Result<f64, PreferenceError> {
    check_prob("action probability", p)?;
    Ok(p.ln() + (1.0 - p) * log_ratio)
}

/// Euclidean distance between the current and reference per-token
/// probabilities of the winning action.
pub fn apc_penalty(theta: &[f64], reference: &[f64]) -> Result<f64, PreferenceError> {
    if theta.len() != reference.len() {
        return Err(PreferenceError::LengthMismatch(theta.len(), reference.len()));
    }
    for &p in theta.iter().chain(reference) {
        check_prob("action token probability", p)?;
    }
    Ok(theta.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// One side of a preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchStats {
    /// `log π_θ(T|τ)`, ACT marker included.
    pub thought_logp: f64,
    /// `log π_ref(a, T|τ)`.
    pub ref_joint_logp: f64,
    /// `p(a|T)` under the current model.
    pub action_prob: f64,
}

impl BranchStats {
    pub fn log_ratio(&self) -> f64 {
        self.thought_logp - self.ref_joint_logp
    }

    /// Branch term of the joint objective (before β).
    fn joint_term(&self) -> f64 {
        self.action_prob.ln() + self.thought_logp - self.ref_joint_logp
    }

    /// Branch term of the weighted objective (before β).
    fn weighted_term(&self) -> f64 {
        self.action_prob * self.log_ratio()
    }

    pub fn gap(&self) -> f64 {
        self.action_prob.ln() + (1.0 - self.action_prob) * self.log_ratio()
    }
}

/// Everything the pair losses read.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub win: BranchStats,
    pub lose: BranchStats,
    /// Per-token probabilities of the winning action under the current model.
    pub win_action_probs: Vec<f64>,
    /// Same tokens under the reference.
    pub win_ref_action_probs: Vec<f64>,
}

impl PairStats {
    /// Pair without action-token vectors (consistency penalty reads as zero).
    pub fn scalar(win: BranchStats, lose: BranchStats) -> Self {
        Self { win, lose, win_action_probs: Vec::new(), win_ref_action_probs: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), PreferenceError> {
        for (b, side) in [(&self.win, "win"), (&self.lose, "lose")] {
            check_prob(if side == "win" { "p_win" } else { "p_lose" }, b.action_prob)?;
            check_logp("thought log-probability", b.thought_logp)?;
            check_logp("reference log-probability", b.ref_joint_logp)?;
        }
        if self.win_action_probs.len() != self.win_ref_action_probs.len() {
            return Err(PreferenceError::LengthMismatch(
                self.win_action_probs.len(),
                self.win_ref_action_probs.len(),
            ));
        }
        Ok(())
    }
}

/// Which σ-argument the loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairObjective {
    /// Joint thought+action log-ratio.
    Joint,
    /// Thought log-ratio weighted by the action probability.
    Weighted,
}

/// Scalar loss plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub loss: f64,
    /// Argument of σ in the preference term.
    pub margin: f64,
    /// σ of the joint Q̂ difference.
    pub lambda: f64,
    pub q_win: f64,
    pub q_lose: f64,
    pub delta_win: f64,
    pub delta_lose: f64,
    /// Preference term `softplus(-margin)`.
    pub apw_term: f64,
    pub apc_penalty: f64,
    pub kappa: f64,
    pub beta: f64,
}

/// Derivatives of the loss with respect to the pair statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossPartials {
    pub thought_win: f64,
    pub thought_lose: f64,
    pub action_prob_win: f64,
    pub action_prob_lose: f64,
    /// With respect to each entry of `win_action_probs`.
    pub win_action_probs: Vec<f64>,
}

/// Evaluates a pair loss and its partial derivatives.
pub fn pair_loss(
    stats: &PairStats,
    beta: f64,
    objective: PairObjective,
    kappa: f64,
) -> Result<(LossReport, LossPartials), PreferenceError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PreferenceError::Beta(beta));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(PreferenceError::Kappa(kappa));
    }
    stats.validate()?;
    let (w, l) = (&stats.win, &stats.lose);

    let q_win = beta * w.joint_term();
    let q_lose = beta * l.joint_term();
    let margin = match objective {
        PairObjective::Joint => q_win - q_lose,
        PairObjective::Weighted => beta * w.weighted_term() - beta * l.weighted_term(),
    };
    let apw_term = softplus(-margin);
    let apc = apc_penalty(&stats.win_action_probs, &stats.win_ref_action_probs)?;
    let loss = if kappa > 0.0 { apw_term + kappa * apc } else { apw_term };

    // d softplus(-m) / dm
    let dm = -sigmoid(-margin);
    let mut partials = match objective {
        PairObjective::Joint => LossPartials {
            thought_win: dm * beta,
            thought_lose: -dm * beta,
            action_prob_win: dm * beta / w.action_prob,
            action_prob_lose: -dm * beta / l.action_prob,
            win_action_probs: Vec::new(),
        },
        PairObjective::Weighted => LossPartials {
            thought_win: dm * beta * w.action_prob,
            thought_lose: -dm * beta * l.action_prob,
            action_prob_win: dm * beta * w.log_ratio(),
            action_prob_lose: -dm * beta * l.log_ratio(),
            win_action_probs: Vec::new(),
        },
    };
    partials.win_action_probs = if kappa > 0.0 && apc > 0.0 {
        stats
            .win_action_probs
            .iter()
            .zip(&stats.win_ref_action_probs)
            .map(|(a, b)| kappa * (a - b) / apc)
            .collect()
    } else {
        vec![0.0; stats.win_action_probs.len()]
    };

    let report = LossReport {
        loss,
        margin,
        lambda: sigmoid(q_win - q_lose),
        q_win,
        q_lose,
        delta_win: w.gap(),
        delta_lose: l.gap(),
        apw_term,
        apc_penalty: apc,
        kappa,
        beta,
    };
    Ok((report, partials))
}

/// Joint step-wise DPO loss.
pub fn dpo_naive_loss(stats: &PairStats, beta: f64) -> Result<LossReport, PreferenceError> {
    pair_loss(stats, beta, PairObjective::Joint, 0.0).map(|r| r.0)
}

/// Action-probability-weighted loss.
pub fn apw_loss(stats: &PairStats, beta: f64) -> Result<LossReport, PreferenceError> {
    pair_loss(stats, beta, PairObjective::Weighted, 0.0).map(|r| r.0)
}

/// Weighted loss plus `κ` times the consistency penalty.
pub fn tcpo_loss(stats: &PairStats, beta: f64, kappa: f64) -> Result<LossReport, PreferenceError> {
    pair_loss(stats, beta, PairObjective::Weighted, kappa).map(|r| r.0)
}

/// `σ(Q̂_win - Q̂_lose)` with the joint Q̂. Logged only.
pub fn lambda_diagnostic(stats: &PairStats, beta: f64) -> f64 {
    let q_win = beta * stats.win.joint_term();
    let q_lose = beta * stats.lose.joint_term();
    sigmoid(q_win - q_lose)
}
