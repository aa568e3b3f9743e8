//! Kernel-width saturation analysis.
//!
//! For each candidate RBF width, run lazy greedy up to the budget and record
//! the marginal gain `F(S_k) - F(S_{k-1})` at every step. A width whose gains
//! collapse below a threshold before the budget is reached has saturated: the
//! later picks add almost nothing. A width so small that the kernel is nearly
//! the identity is rejected too, since it sees no interactions between points.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facility_location::greedy_lazy;
use crate::kernels::{KernelOptions, SimilarityEngine};
use crate::types::{Budget, EmbeddingMatrix, KernelSpec};

/// Gain level below which a curve counts as saturated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    /// Fraction of the curve's first gain.
    RelativeToFirst(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::RelativeToFirst(1e-3)
    }
}

impl Threshold {
    fn resolve(&self, first_gain: f64) -> f64 {
        match *self {
            Threshold::Absolute(t) => t,
            Threshold::RelativeToFirst(f) => f * first_gain,
        }
    }

    fn check(&self) -> Result<()> {
        let v = match *self {
            Threshold::Absolute(v) | Threshold::RelativeToFirst(v) => v,
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidParameter(format!("threshold must be >= 0, got {v}")));
        }
        Ok(())
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    /// `T` for an absolute threshold, `rel:F` for a fraction of the first gain.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("bad threshold {s:?}; expected T or rel:F"));
        let t = match s.strip_prefix("rel:") {
            Some(f) => Threshold::RelativeToFirst(f.parse().map_err(|_| bad())?),
            None => Threshold::Absolute(s.parse().map_err(|_| bad())?),
        };
        t.check()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub threshold: Threshold,
    /// Pairs sampled to estimate the median off-diagonal similarity.
    pub diag_pairs: usize,
    pub diag_seed: u64,
    pub kernel: KernelOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            threshold: Threshold::default(),
            diag_pairs: 10_000,
            diag_seed: 0,
            kernel: KernelOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    pub gamma: f64,
    /// Steps `1..=k`.
    pub ks: Vec<usize>,
    pub gains: Vec<f64>,
    pub objectives: Vec<f64>,
    /// Absolute gain threshold applied to this curve.
    pub threshold: f64,
    /// First step `k` whose gain fell below `threshold`.
    pub saturation_step: Option<usize>,
    /// Median of `w_ij` over sampled pairs `i != j`; `None` when `n < 2`.
    pub median_offdiag_similarity: Option<f64>,
}

pub fn saturation_step(gains: &[f64], threshold: f64) -> Option<usize> {
    gains.iter().position(|&g| g < threshold).map(|p| p + 1)
}

/// Median similarity over up to `pairs` distinct off-diagonal pairs.
pub fn median_offdiag_similarity(engine: &SimilarityEngine<'_>, pairs: usize, seed: u64) -> Option<f64> {
    let n = engine.n();
    if n < 2 || pairs == 0 {
        return None;
    }
    let total = n as u128 * (n as u128 - 1) / 2;
    let mut vals: Vec<f64> = if total <= pairs as u128 {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| engine.similarity(i, j))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                engine.similarity(i, j)
            })
            .collect()
    };
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    Some(if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) })
}

/// One lazy-greedy run per width; gains recorded at every step.
pub fn gain_sweep(
    emb: &EmbeddingMatrix,
    gammas: &[f64],
    budget: Budget,
    opts: SweepOptions,
) -> Result<Vec<GainCurve>> {
    if gammas.is_empty() {
        return Err(Error::InvalidParameter("gamma list is empty".into()));
    }
    opts.threshold.check()?;
    gammas
        .iter()
        .map(|&gamma| {
            let engine = SimilarityEngine::with_options(emb, KernelSpec::rbf(gamma)?, opts.kernel)?;
            let run = greedy_lazy(&engine, budget, None)?;
            let threshold = opts.threshold.resolve(run.gains[0]);
            Ok(GainCurve {
                gamma,
                ks: (1..=run.gains.len()).collect(),
                saturation_step: saturation_step(&run.gains, threshold),
                threshold,
                median_offdiag_similarity: median_offdiag_similarity(&engine, opts.diag_pairs, opts.diag_seed),
                gains: run.gains,
                objectives: run.objective_trace,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    Saturated { step: usize },
    Diagonal { median_similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub gamma: f64,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRecommendation {
    pub stable: Vec<f64>,
    pub rejected: Vec<Rejection>,
}

/// Default floor on the median off-diagonal similarity.
pub const DIAGONAL_FLOOR: f64 = 1e-6;

/// Splits swept widths into stable (never saturated within the budget and not
/// effectively diagonal) and rejected.
pub fn recommend_gamma_range(
    curves: &[GainCurve],
    budget: Budget,
    diagonal_floor: f64,
) -> Result<GammaRecommendation> {
    if curves.is_empty() {
        return Err(Error::EmptyCurveSet);
    }
    let mut stable = Vec::new();
    let mut rejected = Vec::new();
    for c in curves {
        if c.gains.len() != budget.k() {
            return Err(Error::InvalidParameter(format!(
                "curve for gamma={} has {} steps, budget is {}",
                c.gamma,
                c.gains.len(),
                budget.k()
            )));
        }
        if let Some(step) = c.saturation_step {
            rejected.push(Rejection { gamma: c.gamma, reason: RejectReason::Saturated { step } });
        } else if let Some(m) = c.median_offdiag_similarity.filter(|&m| m < diagonal_floor) {
            rejected.push(Rejection { gamma: c.gamma, reason: RejectReason::Diagonal { median_similarity: m } });
        } else {
            stable.push(c.gamma);
        }
    }
    Ok(GammaRecommendation { stable, rejected })
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// CSV with header `gamma,k,gain,objective`, one row per (width, step).
pub fn write_gains_csv<W: Write>(curves: &[GainCurve], mut w: W) -> std::io::Result<()> {
    writeln!(w, "gamma,k,gain,objective")?;
    for c in curves {
        for ((k, g), o) in c.ks.iter().zip(&c.gains).zip(&c.objectives) {
            writeln!(w, "{},{},{},{}", format_sig9(c.gamma), k, format_sig9(*g), format_sig9(*o))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub gamma: f64,
    pub first_gain: f64,
    pub threshold: f64,
    pub saturation_step: Option<usize>,
    pub median_offdiag_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub budget: usize,
    pub stable: Vec<f64>,
    pub rejected: Vec<Rejection>,
    pub curves: Vec<CurveSummary>,
}

pub fn summarize(curves: &[GainCurve], rec: &GammaRecommendation, budget: Budget) -> SweepSummary {
    SweepSummary {
        budget: budget.k(),
        stable: rec.stable.clone(),
        rejected: rec.rejected.clone(),
        curves: curves
            .iter()
            .map(|c| CurveSummary {
                gamma: c.gamma,
                first_gain: c.gains.first().copied().unwrap_or(0.0),
                threshold: c.threshold,
                saturation_step: c.saturation_step,
                median_offdiag_similarity: c.median_offdiag_similarity,
            })
            .collect(),
    }
}
