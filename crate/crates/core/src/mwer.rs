//! Expected relative word error over an n-best list.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::hyp_text::wer_str;

/// One n-best list with its reference, scorer outputs and word error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwerBatchItem {
    pub hypotheses: Vec<String>,
    pub reference: String,
    pub raw_scores: Vec<f64>,
    pub wers: Vec<f64>,
    pub baseline: f64,
}

impl MwerBatchItem {
    pub fn new(
        hypotheses: Vec<String>,
        reference: impl Into<String>,
        raw_scores: Vec<f64>,
    ) -> Result<Self> {
        let reference = reference.into();
        if hypotheses.len() != raw_scores.len() {
            return Err(Error::invalid(format!(
                "{} hypotheses but {} scores",
                hypotheses.len(),
                raw_scores.len()
            )));
        }
        let wers = hypotheses
            .iter()
            .map(|h| wer_str(&reference, h))
            .collect::<Result<Vec<_>>>()?;
        let baseline = mean(&wers)?;
        Ok(Self {
            hypotheses,
            reference,
            raw_scores,
            wers,
            baseline,
        })
    }

    /// Value of the loss at the stored scores.
    pub fn loss(&self) -> Result<f64> {
        rl_loss_value(&self.raw_scores, &self.wers)
    }
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("n-best list"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Max-subtracted softmax of log scores.
pub fn normalize_likelihoods(raw_scores: &[f64]) -> Result<Vec<f64>> {
    if raw_scores.is_empty() {
        return Err(Error::Empty("score list"));
    }
    if raw_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite hypothesis score"));
    }
    let m = raw_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw_scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `(1/N) sum_i p_i (w_i - mean(w))` with `p = softmax(scores)`.
pub fn rl_loss_value(raw_scores: &[f64], wers: &[f64]) -> Result<f64> {
    check_lengths(raw_scores.len(), wers.len())?;
    let p = normalize_likelihoods(raw_scores)?;
    let wbar = mean(wers)?;
    let n = wers.len() as f64;
    Ok(p.iter().zip(wers).map(|(p, w)| p * (w - wbar)).sum::<f64>() / n)
}

fn check_lengths(scores: usize, wers: usize) -> Result<()> {
    if scores != wers {
        return Err(Error::invalid(format!(
            "{scores} scores but {wers} word error rates"
        )));
    }
    if wers == 0 {
        return Err(Error::Empty("n-best list"));
    }
    Ok(())
}

/// Differentiable loss; `scores` are `[1, 1]` graph scalars, one per hypothesis.
pub fn rl_loss(g: &mut Graph, scores: &[Var], wers: &[f64]) -> Result<Var> {
    check_lengths(scores.len(), wers.len())?;
    let row = g.concat_cols(scores)?;
    rl_loss_row(g, row, wers)
}

/// Same as [`rl_loss`] with the scores already laid out as a `[1, N]` row.
pub fn rl_loss_row(g: &mut Graph, row: Var, wers: &[f64]) -> Result<Var> {
    check_lengths(g.shape(row)[1], wers.len())?;
    let wbar = mean(wers)?;
    let n = wers.len();
    let p = g.softmax(row)?;
    let dev = g.constant(Tensor::new(
        vec![1, n],
        wers.iter().map(|w| w - wbar).collect(),
    )?)?;
    let weighted = g.mul(p, dev)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / n as f64)
}
