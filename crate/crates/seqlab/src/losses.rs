//! Training objectives: token-level cross entropy, the two sequence
//! score functions (average log-probability and average chosen-token
//! logit), the approximated sequence-level cross entropy over beam
//! hypotheses, and their linear combination.
//!
//! Each objective exists in two forms that must agree numerically: a
//! plain value over a logits tensor (for evaluation and decoding) and a
//! taped form (for gradients).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::model::{Model, TapedParams};
use crate::numerics::kernels as k;
use crate::numerics::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Which per-step value the sequence score averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreFn {
    /// Mean log P of chosen tokens (length-normalized log-probability).
    #[default]
    LogprobAvg,
    /// Mean raw logit of chosen tokens (unnormalized, shift-calibratable).
    LogitsAvg,
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreFn::LogprobAvg => "logprob_avg",
            ScoreFn::LogitsAvg => "logits_avg",
        })
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logprob_avg" => Ok(ScoreFn::LogprobAvg),
            "logits_avg" => Ok(ScoreFn::LogitsAvg),
            other => Err(Error::Validation(format!(
                "unknown score function {other:?} (expected logprob_avg or logits_avg)"
            ))),
        }
    }
}

/// A token sequence with its per-step values and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub per_step_values: Vec<f64>,
}

impl ScoredSequence {
    pub fn new(tokens: Vec<u32>, per_step_values: Vec<f64>) -> Result<Self> {
        if tokens.len() != per_step_values.len() {
            return Err(Error::Validation(format!(
                "{} tokens but {} per-step values",
                tokens.len(),
                per_step_values.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Validation("empty scored sequence".into()));
        }
        let score = per_step_values.iter().sum::<f64>() / per_step_values.len() as f64;
        Ok(ScoredSequence { tokens, score, per_step_values })
    }

    /// Scores a target sequence against teacher-forced logits.
    pub fn from_logits(logits: &Tensor, y: &[u32], score_fn: ScoreFn) -> Result<Self> {
        let values = match score_fn {
            ScoreFn::LogprobAvg => per_step_logprobs(logits, y)?,
            ScoreFn::LogitsAvg => per_step_logits(logits, y)?,
        };
        ScoredSequence::new(y.to_vec(), values)
    }
}

/// Component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_token: f64,
    pub l_seq: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn check_targets(logits: &Tensor, y: &[u32]) -> Result<usize> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!("logits must be 2-d, got {:?}", logits.shape)));
    }
    let v = logits.shape[1];
    if logits.shape[0] != y.len() || y.is_empty() {
        return Err(Error::Validation(format!(
            "{} logit rows for {} target tokens",
            logits.shape[0],
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Validation(format!(
            "target token id {bad} out of range for vocabulary of {v}"
        )));
    }
    Ok(v)
}

/// Log P(y_i | x, y_<i) for each step.
pub fn per_step_logprobs(logits: &Tensor, y: &[u32]) -> Result<Vec<f64>> {
    let v = check_targets(logits, y)?;
    let mut out = Vec::with_capacity(y.len());
    let mut row = vec![0.0; v];
    for (i, &t) in y.iter().enumerate() {
        row.copy_from_slice(&logits.data[i * v..(i + 1) * v]);
        k::log_softmax_lane(&mut row);
        out.push(row[t as usize]);
    }
    Ok(out)
}

/// Raw chosen-token logit u_{y_i} for each step.
pub fn per_step_logits(logits: &Tensor, y: &[u32]) -> Result<Vec<f64>> {
    let v = check_targets(logits, y)?;
    Ok(y.iter().enumerate().map(|(i, &t)| logits.data[i * v + t as usize]).collect())
}

/// Token-level cross entropy, averaged over |y| (EOS included in y).
pub fn token_ce(logits: &Tensor, y: &[u32]) -> Result<f64> {
    let lp = per_step_logprobs(logits, y)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Mean log-probability score: (1/|y|) sum log P(y_i | x, y_<i).
pub fn score_logprob_avg(logits: &Tensor, y: &[u32]) -> Result<f64> {
    let lp = per_step_logprobs(logits, y)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Mean chosen-token logit score: (1/|y|) sum u_{y_i}.
pub fn score_logits_avg(logits: &Tensor, y: &[u32]) -> Result<f64> {
    let lu = per_step_logits(logits, y)?;
    Ok(lu.iter().sum::<f64>() / lu.len() as f64)
}

/// Sequence-level cross entropy with the partition function restricted
/// to the groundtruth plus hypothesis scores: a (k+1)-class softmax in
/// which the groundtruth must win.
pub fn seq_ce_approx(gt_score: f64, hyp_scores: &[f64]) -> Result<f64> {
    if hyp_scores.is_empty() {
        return Err(Error::Contract("sequence loss needs at least one hypothesis score".into()));
    }
    let mut all = Vec::with_capacity(hyp_scores.len() + 1);
    all.push(gt_score);
    all.extend_from_slice(hyp_scores);
    Ok(k::log_sum_exp(&all) - gt_score)
}

/// total = alpha * l_token + beta * l_seq.
pub fn combined_loss(l_token: f64, l_seq: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_token", l_token), ("l_seq", l_seq), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("combined loss with non-finite {name}: {v}")));
        }
    }
    Ok(LossBreakdown { l_token, l_seq, total: alpha * l_token + beta * l_seq, alpha, beta })
}

/// Taped token-level cross entropy over teacher-forced logits.
pub fn token_ce_taped(tape: &mut Tape, logits: TensorId, y: &[u32]) -> Result<TensorId> {
    let idx = check_taped_targets(tape, logits, y)?;
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.select_per_row(lp, &idx)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// Taped sequence score of the chosen tokens.
pub fn score_taped(
    tape: &mut Tape,
    logits: TensorId,
    y: &[u32],
    score_fn: ScoreFn,
) -> Result<TensorId> {
    let idx = check_taped_targets(tape, logits, y)?;
    let values = match score_fn {
        ScoreFn::LogprobAvg => {
            let lp = tape.log_softmax(logits, 1)?;
            tape.select_per_row(lp, &idx)?
        }
        ScoreFn::LogitsAvg => tape.select_per_row(logits, &idx)?,
    };
    tape.mean_all(values)
}

fn check_taped_targets(tape: &Tape, logits: TensorId, y: &[u32]) -> Result<Vec<usize>> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != y.len() || y.is_empty() {
        return Err(Error::Validation(format!(
            "logits {shape:?} do not match {} target tokens",
            y.len()
        )));
    }
    Ok(y.iter().map(|&t| t as usize).collect())
}

/// Taped (k+1)-class sequence loss from scalar score nodes.
pub fn seq_ce_approx_taped(
    tape: &mut Tape,
    gt_score: TensorId,
    hyp_scores: &[TensorId],
) -> Result<TensorId> {
    if hyp_scores.is_empty() {
        return Err(Error::Contract("sequence loss needs at least one hypothesis score".into()));
    }
    let mut all = Vec::with_capacity(hyp_scores.len() + 1);
    all.push(gt_score);
    all.extend_from_slice(hyp_scores);
    let stacked = tape.stack_scalars(&all)?;
    let row = tape.reshape(stacked, &[1, all.len()])?;
    let lp = tape.log_softmax(row, 1)?;
    let gt = tape.select_per_row(lp, &[0])?;
    Ok(tape.scale(gt, -1.0))
}

/// Taped combination: alpha * l_token + beta * l_seq.
pub fn combined_taped(
    tape: &mut Tape,
    l_token: TensorId,
    l_seq: TensorId,
    alpha: f64,
    beta: f64,
) -> Result<TensorId> {
    let a = tape.scale(l_token, alpha);
    let b = tape.scale(l_seq, beta);
    tape.add(a, b)
}

/// Builds the full per-example combined loss on a tape: teacher-forced
/// token CE on the groundtruth plus the (k+1)-class sequence loss over
/// beam hypotheses. Hypotheses equal to the groundtruth (and exact
/// duplicates) are dropped before the sequence term.
#[allow(clippy::too_many_arguments)]
pub fn example_combined_loss_taped(
    model: &Model,
    tape: &mut Tape,
    tp: &TapedParams,
    x: &[u32],
    y: &[u32],
    hyps: &[Vec<u32>],
    score_fn: ScoreFn,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(TensorId, LossBreakdown)> {
    let memory = model.encode_taped(tape, tp, x, rng)?;
    let gt_logits = model.decoder_logits_taped(tape, tp, memory, y, rng)?;
    let l_token = token_ce_taped(tape, gt_logits, y)?;
    let gt_score = score_taped(tape, gt_logits, y, score_fn)?;
    let mut kept: Vec<&Vec<u32>> = Vec::with_capacity(hyps.len());
    for h in hyps {
        if h.as_slice() != y && !kept.iter().any(|k| k.as_slice() == h.as_slice()) {
            kept.push(h);
        }
    }
    let mut hyp_scores = Vec::with_capacity(kept.len());
    for h in kept {
        let logits = model.decoder_logits_taped(tape, tp, memory, h, rng)?;
        hyp_scores.push(score_taped(tape, logits, h, score_fn)?);
    }
    let l_seq = seq_ce_approx_taped(tape, gt_score, &hyp_scores)?;
    let total = combined_taped(tape, l_token, l_seq, alpha, beta)?;
    let breakdown =
        combined_loss(tape.value(l_token).item()?, tape.value(l_seq).item()?, alpha, beta)?;
    Ok((total, breakdown))
}
