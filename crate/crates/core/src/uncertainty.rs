//! Per-prompt uncertainty scores and top-k selection.
//!
//! Every score is oriented so that larger means more uncertain, and
//! selection keeps the `k` largest.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Budget, SelectionResult, TokenStatsSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyKind {
    MeanEntropy,
    LeastConfidence,
    MeanMargin,
    MinMargin,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 4] = [
        UncertaintyKind::MeanEntropy,
        UncertaintyKind::LeastConfidence,
        UncertaintyKind::MeanMargin,
        UncertaintyKind::MinMargin,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            UncertaintyKind::MeanEntropy => "mean-entropy",
            UncertaintyKind::LeastConfidence => "least-confidence",
            UncertaintyKind::MeanMargin => "mean-margin",
            UncertaintyKind::MinMargin => "min-margin",
        }
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncertaintyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown uncertainty measure {s:?}")))
    }
}

/// Scoring options. `normalize_confidence` switches least confidence to the
/// per-token geometric mean instead of the raw sequence probability.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub normalize_confidence: bool,
}

/// Mean per-step Shannon entropy in nats.
pub fn mean_entropy(seq: &TokenStatsSequence) -> f64 {
    let total: f64 = seq.steps().iter().map(|s| s.entropy).sum();
    total / seq.len() as f64
}

/// Negated sequence probability `-∏ chosen_prob`, accumulated in log space.
pub fn least_confidence(seq: &TokenStatsSequence) -> Result<f64> {
    least_confidence_with(seq, ScoreOptions::default())
}

pub fn least_confidence_with(seq: &TokenStatsSequence, opts: ScoreOptions) -> Result<f64> {
    let mut log_prob = 0.0;
    for (step, s) in seq.steps().iter().enumerate() {
        if s.chosen_prob <= 0.0 {
            // prompt id is filled in by the caller that knows it
            return Err(Error::ZeroProbability { prompt: usize::MAX, step });
        }
        log_prob += s.chosen_prob.ln();
    }
    if opts.normalize_confidence {
        log_prob /= seq.len() as f64;
    }
    Ok(-log_prob.exp())
}

/// Negated mean top-1/top-2 margin.
pub fn mean_margin(seq: &TokenStatsSequence) -> f64 {
    let total: f64 = seq.steps().iter().map(|s| s.margin()).sum();
    -(total / seq.len() as f64)
}

/// Negated smallest top-1/top-2 margin over the sequence.
pub fn min_margin(seq: &TokenStatsSequence) -> f64 {
    let min = seq
        .steps()
        .iter()
        .map(|s| s.margin())
        .fold(f64::INFINITY, f64::min);
    -min
}

pub fn score(seq: &TokenStatsSequence, kind: UncertaintyKind, opts: ScoreOptions) -> Result<f64> {
    Ok(match kind {
        UncertaintyKind::MeanEntropy => mean_entropy(seq),
        UncertaintyKind::LeastConfidence => least_confidence_with(seq, opts)?,
        UncertaintyKind::MeanMargin => mean_margin(seq),
        UncertaintyKind::MinMargin => min_margin(seq),
    })
}

/// Scores every prompt; evaluation is parallel but each score depends only on its own sequence.
pub fn score_all(
    stats: &[TokenStatsSequence],
    kind: UncertaintyKind,
    opts: ScoreOptions,
) -> Result<Vec<f64>> {
    stats
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            score(seq, kind, opts).map_err(|e| match e {
                Error::ZeroProbability { step, .. } => Error::ZeroProbability { prompt: i, step },
                other => other,
            })
        })
        .collect()
}

/// Indices ordered by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// The `k` highest-scoring indices, in descending score order.
pub fn select_topk_by_scores(scores: &[f64], budget: Budget) -> Result<SelectionResult> {
    if budget.k() > scores.len() {
        return Err(Error::BudgetOutOfRange { k: budget.k(), n: scores.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("score for item {i} is not finite")));
    }
    let mut indices = rank_descending(scores);
    indices.truncate(budget.k());
    Ok(SelectionResult { indices, objective_trace: Vec::new(), gains: Vec::new() })
}

/// Top-k most uncertain prompts under `kind`.
pub fn select_topk_uncertain(
    stats: &[TokenStatsSequence],
    kind: UncertaintyKind,
    budget: Budget,
) -> Result<SelectionResult> {
    let scores = score_all(stats, kind, ScoreOptions::default())?;
    select_topk_by_scores(&scores, budget)
}
