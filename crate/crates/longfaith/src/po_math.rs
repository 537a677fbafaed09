//! Desk-scale numerics for the post-training objectives: the negative
//! log-likelihood loss, the odds-ratio preference loss, their weighted
//! combination, and finite-difference gradient verification.
//!
//! Everything runs in log space so long sequences cannot underflow. The
//! sequence probability entering the odds is length-normalized (geometric
//! mean) by default; [`OddsKind::Joint`] selects the raw product instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoMathError {
    #[error("sequence likelihood must be non-empty")]
    EmptySequence,
    #[error("token probability {0} outside the open interval (0,1)")]
    ProbOutOfRange(f64),
    #[error("sequence probability is numerically 1; odds are degenerate")]
    DegenerateOdds,
    #[error("beta {0} must be finite and >= 0")]
    InvalidBeta(f64),
    #[error("finite-difference step {0} must be finite and > 0")]
    InvalidStep(f64),
    #[error("step pushes token probability at index {index} outside (0,1)")]
    StepOutOfDomain { index: usize },
}

/// Per-token probabilities of one output sequence under a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLikelihood {
    token_probs: Vec<f64>,
}

impl SequenceLikelihood {
    /// Validates that the sequence is non-empty and every probability lies
    /// strictly inside (0,1).
    pub fn new(token_probs: Vec<f64>) -> Result<Self, PoMathError> {
        if token_probs.is_empty() {
            return Err(PoMathError::EmptySequence);
        }
        for &p in &token_probs {
            if !(p > 0.0 && p < 1.0) {
                return Err(PoMathError::ProbOutOfRange(p));
            }
        }
        Ok(Self { token_probs })
    }

    pub fn token_probs(&self) -> &[f64] {
        &self.token_probs
    }

    pub fn len(&self) -> usize {
        self.token_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_probs.is_empty()
    }

    fn sum_log_prob(&self) -> f64 {
        self.token_probs.iter().map(|p| p.ln()).sum()
    }

    fn mean_log_prob(&self) -> f64 {
        self.sum_log_prob() / self.token_probs.len() as f64
    }
}

/// How the sequence probability inside the odds is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OddsKind {
    /// Geometric-mean (length-normalized) sequence probability.
    #[default]
    LengthNormalized,
    /// Raw joint probability, no length normalization.
    Joint,
}

/// Weight of the odds-ratio term in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrpoConfig {
    pub beta: f64,
}

impl Default for OrpoConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

impl OrpoConfig {
    fn validate(&self) -> Result<(), PoMathError> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(PoMathError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the sequence; strictly positive on the
/// valid domain.
pub fn sft_loss(seq: &SequenceLikelihood) -> f64 {
    -seq.mean_log_prob()
}

/// log(1 - e^m) for m < 0, stable near both ends.
fn log1mexp(m: f64) -> Result<f64, PoMathError> {
    debug_assert!(m < 0.0);
    let one_minus = -m.exp_m1();
    if one_minus == 0.0 {
        return Err(PoMathError::DegenerateOdds);
    }
    if m < -std::f64::consts::LN_2 {
        Ok((-m.exp()).ln_1p())
    } else {
        Ok(one_minus.ln())
    }
}

fn seq_log_prob(seq: &SequenceLikelihood, kind: OddsKind) -> f64 {
    match kind {
        OddsKind::LengthNormalized => seq.mean_log_prob(),
        OddsKind::Joint => seq.sum_log_prob(),
    }
}

fn log_odds(seq: &SequenceLikelihood, kind: OddsKind) -> Result<f64, PoMathError> {
    let m = seq_log_prob(seq, kind);
    Ok(m - log1mexp(m)?)
}

/// Odds p/(1-p) of the length-normalized sequence probability.
pub fn seq_odds(seq: &SequenceLikelihood) -> Result<f64, PoMathError> {
    seq_odds_with(seq, OddsKind::LengthNormalized)
}

pub fn seq_odds_with(seq: &SequenceLikelihood, kind: OddsKind) -> Result<f64, PoMathError> {
    Ok(log_odds(seq, kind)?.exp())
}

/// ln(1 + e^x), stable for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative log-sigmoid of the log odds ratio between the preferred and
/// dispreferred sequences. Equals ln 2 when the odds coincide.
pub fn or_loss(win: &SequenceLikelihood, lose: &SequenceLikelihood) -> Result<f64, PoMathError> {
    or_loss_with(win, lose, OddsKind::LengthNormalized)
}

pub fn or_loss_with(
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    kind: OddsKind,
) -> Result<f64, PoMathError> {
    let z = log_odds(win, kind)? - log_odds(lose, kind)?;
    Ok(softplus(-z))
}

/// Combined objective: `sft_loss(win) + beta * or_loss(win, lose)`.
pub fn orpo_loss(
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    cfg: &OrpoConfig,
) -> Result<f64, PoMathError> {
    orpo_loss_with(win, lose, cfg, OddsKind::LengthNormalized)
}

pub fn orpo_loss_with(
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    cfg: &OrpoConfig,
    kind: OddsKind,
) -> Result<f64, PoMathError> {
    cfg.validate()?;
    Ok(sft_loss(win) + cfg.beta * or_loss_with(win, lose, kind)?)
}

/// Which objective a gradient check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Sft,
    OddsRatio,
    Orpo,
}

/// Analytic gradient with respect to each log-probability, as
/// `(d/d log p_i^win, d/d log p_j^lose)`.
fn analytic_grad(
    kind: LossKind,
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    cfg: &OrpoConfig,
    odds: OddsKind,
) -> Result<(Vec<f64>, Vec<f64>), PoMathError> {
    let n_win = win.len() as f64;
    let n_lose = lose.len() as f64;
    let scale = |n: f64| match odds {
        OddsKind::LengthNormalized => 1.0 / n,
        OddsKind::Joint => 1.0,
    };
    let sft_grad_win = vec![-1.0 / n_win; win.len()];

    match kind {
        LossKind::Sft => Ok((sft_grad_win, vec![0.0; lose.len()])),
        LossKind::OddsRatio | LossKind::Orpo => {
            let m_win = seq_log_prob(win, odds);
            let m_lose = seq_log_prob(lose, odds);
            let z = (m_win - log1mexp(m_win)?) - (m_lose - log1mexp(m_lose)?);
            let s = sigmoid(-z);
            // d log_odds / d m = 1 / (1 - pi)
            let pi_win = m_win.exp();
            let pi_lose = m_lose.exp();
            let or_win: Vec<f64> = (0..win.len())
                .map(|_| -s * scale(n_win) / (1.0 - pi_win))
                .collect();
            let or_lose: Vec<f64> = (0..lose.len())
                .map(|_| s * scale(n_lose) / (1.0 - pi_lose))
                .collect();
            if kind == LossKind::OddsRatio {
                Ok((or_win, or_lose))
            } else {
                let w = or_win
                    .iter()
                    .zip(&sft_grad_win)
                    .map(|(orv, sftv)| sftv + cfg.beta * orv)
                    .collect();
                let l = or_lose.iter().map(|orv| cfg.beta * orv).collect();
                Ok((w, l))
            }
        }
    }
}

fn loss_value(
    kind: LossKind,
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    cfg: &OrpoConfig,
    odds: OddsKind,
) -> Result<f64, PoMathError> {
    match kind {
        LossKind::Sft => Ok(sft_loss(win)),
        LossKind::OddsRatio => or_loss_with(win, lose, odds),
        LossKind::Orpo => orpo_loss_with(win, lose, cfg, odds),
    }
}

fn perturbed(
    seq: &SequenceLikelihood,
    index: usize,
    delta_log: f64,
) -> Result<SequenceLikelihood, PoMathError> {
    let log_p = seq.token_probs[index].ln() + delta_log;
    if log_p >= 0.0 {
        return Err(PoMathError::StepOutOfDomain { index });
    }
    let mut probs = seq.token_probs.clone();
    probs[index] = log_p.exp();
    SequenceLikelihood::new(probs)
}

/// Compares the analytic gradient of the chosen loss against central finite
/// differences in log-probability space and returns the maximum relative
/// error over all coordinates.
pub fn grad_check(
    kind: LossKind,
    win: &SequenceLikelihood,
    lose: &SequenceLikelihood,
    cfg: &OrpoConfig,
    odds: OddsKind,
    step: f64,
) -> Result<f64, PoMathError> {
    if !step.is_finite() || step <= 0.0 {
        return Err(PoMathError::InvalidStep(step));
    }
    cfg.validate()?;
    let (grad_win, grad_lose) = analytic_grad(kind, win, lose, cfg, odds)?;

    let mut max_rel = 0.0_f64;
    let mut check_side = |is_win: bool, grads: &[f64]| -> Result<(), PoMathError> {
        // SFT ignores the dispreferred sequence entirely.
        if kind == LossKind::Sft && !is_win {
            return Ok(());
        }
        let seq = if is_win { win } else { lose };
        for (i, &g) in grads.iter().enumerate() {
            let plus = perturbed(seq, i, step)?;
            let minus = perturbed(seq, i, -step)?;
            let (f_plus, f_minus) = if is_win {
                (
                    loss_value(kind, &plus, lose, cfg, odds)?,
                    loss_value(kind, &minus, lose, cfg, odds)?,
                )
            } else {
                (
                    loss_value(kind, win, &plus, cfg, odds)?,
                    loss_value(kind, win, &minus, cfg, odds)?,
                )
            };
            let fd = (f_plus - f_minus) / (2.0 * step);
            let denom = g.abs().max(fd.abs()).max(1e-12);
            max_rel = max_rel.max((g - fd).abs() / denom);
        }
        Ok(())
    };
    check_side(true, &grad_win)?;
    check_side(false, &grad_lose)?;
    Ok(max_rel)
}
