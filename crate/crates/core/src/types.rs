//! Shared domain types and input validation.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation, Violations};
use crate::linalg;

/// `n` prompt feature vectors of dimension `d`, stored row-major in double precision.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
    sq_norms: OnceLock<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::BadShape(format!("n={n}, d={d}; both must be >= 1")));
        }
        if data.len() != n * d {
            return Err(Error::BadShape(format!(
                "data length {} != n*d = {}",
                data.len(),
                n * d
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding { row: pos / d, col: pos % d });
        }
        Ok(EmbeddingMatrix { n, d, data, sq_norms: OnceLock::new() })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::DimensionMismatch { left: d, right: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(n, d, data)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Cached `||f_i||²`, computed on first use with the same dot kernel as
    /// every pairwise product so that `||f_i - f_i||²` evaluates to exactly 0.
    pub fn row_sq_norms(&self) -> &[f64] {
        self.sq_norms.get_or_init(|| {
            use rayon::prelude::*;
            (0..self.n)
                .into_par_iter()
                .map(|i| linalg::dot(self.row(i), self.row(i)))
                .collect()
        })
    }

    /// A new matrix whose row `t` is row `order[t]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(order.len() * self.d);
        for &i in order {
            if i >= self.n {
                return Err(Error::IndexOutOfRange { index: i, n: self.n });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(order.len(), self.d, data)
    }
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.d == other.d && self.data == other.data
    }
}

/// Summary of one decoding step's softmax distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    /// Shannon entropy of the step distribution, in nats.
    pub entropy: f64,
    pub top1_prob: f64,
    pub top2_prob: f64,
    /// Probability of the token actually emitted (equals `top1_prob` under greedy decoding).
    pub chosen_prob: f64,
}

impl TokenStats {
    pub fn new(entropy: f64, top1_prob: f64, top2_prob: f64, chosen_prob: f64) -> Self {
        TokenStats { entropy, top1_prob, top2_prob, chosen_prob }
    }

    /// Convenience constructor for a greedy-decoded step.
    pub fn greedy(entropy: f64, top1_prob: f64, top2_prob: f64) -> Self {
        Self::new(entropy, top1_prob, top2_prob, top1_prob)
    }

    /// Reports the first broken invariant, if any.
    ///
    /// A zero `chosen_prob` is accepted here; it is rejected by the
    /// least-confidence scorer, which is the only consumer of that field.
    pub fn check(&self) -> std::result::Result<(), String> {
        let all = [self.entropy, self.top1_prob, self.top2_prob, self.chosen_prob];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.entropy < 0.0 {
            return Err(format!("entropy {} < 0", self.entropy));
        }
        if !(0.0..=1.0).contains(&self.top1_prob) {
            return Err(format!("top1 {} outside [0, 1]", self.top1_prob));
        }
        if self.top2_prob < 0.0 || self.top2_prob > self.top1_prob {
            return Err(format!(
                "top2 {} outside [0, top1={}]",
                self.top2_prob, self.top1_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.chosen_prob) {
            return Err(format!("chosen {} outside [0, 1]", self.chosen_prob));
        }
        Ok(())
    }

    #[inline]
    pub fn margin(&self) -> f64 {
        self.top1_prob - self.top2_prob
    }
}

/// The per-step statistics of one generated response, length >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStatsSequence {
    steps: Vec<TokenStats>,
}

impl TokenStatsSequence {
    pub fn new(steps: Vec<TokenStats>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParameter("token stats sequence must have >= 1 step".into()));
        }
        for (t, s) in steps.iter().enumerate() {
            s.check()
                .map_err(|detail| Error::InvalidParameter(format!("step {t}: {detail}")))?;
        }
        Ok(TokenStatsSequence { steps })
    }

    pub fn steps(&self) -> &[TokenStats] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Number of prompts to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    k: usize,
}

impl Budget {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::BudgetOutOfRange { k, n });
        }
        Ok(Budget { k })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }
}

/// Selected indices in selection order, with per-step traces.
///
/// `objective_trace` is strategy-specific (coverage objective for facility
/// location, covering radius for k-center) and empty for score-based strategies.
/// `gains` is only filled by the facility-location family.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub gains: Vec<f64>,
}

impl SelectionResult {
    /// Checks index uniqueness and range against a pool of `n`.
    pub fn check(&self, n: usize) -> std::result::Result<(), String> {
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(format!("index {i} out of range for n={n}"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(format!("index {i} selected twice"));
            }
        }
        Ok(())
    }
}

/// Similarity function used by facility location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-||fi - fj||² / gamma)`.
    Rbf { gamma: f64 },
    /// `max(0, cos(fi, fj))`.
    ClippedCosine,
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidKernel(format!("rbf gamma must be > 0, got {gamma}")));
        }
        Ok(KernelSpec::Rbf { gamma })
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { gamma } => Self::rbf(gamma).map(|_| ()),
            KernelSpec::ClippedCosine => Ok(()),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Rbf { gamma } => write!(f, "rbf:{gamma}"),
            KernelSpec::ClippedCosine => f.write_str("cosine"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Parses `rbf:GAMMA` or `cosine`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cosine") {
            return Ok(KernelSpec::ClippedCosine);
        }
        match s.split_once(':') {
            Some((kind, g)) if kind.eq_ignore_ascii_case("rbf") => {
                let gamma: f64 = g
                    .parse()
                    .map_err(|_| Error::InvalidKernel(format!("bad gamma {g:?}")))?;
                Self::rbf(gamma)
            }
            _ => Err(Error::InvalidKernel(format!(
                "unknown kernel {s:?}; expected rbf:GAMMA or cosine"
            ))),
        }
    }
}

/// Which inputs a strategy consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Requirements {
    pub embeddings: bool,
    pub token_stats: bool,
}

/// Normalized run configuration produced by [`validate_inputs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub n: usize,
    pub budget: Budget,
}

/// Checks that the inputs a strategy needs are present and mutually consistent.
///
/// Every violation is collected before returning, not just the first.
pub fn validate_inputs(
    needs: Requirements,
    embeddings: Option<&EmbeddingMatrix>,
    stats: Option<&[TokenStatsSequence]>,
    k: usize,
) -> Result<RunConfig> {
    let mut violations = Vec::new();
    if needs.embeddings && embeddings.is_none() {
        violations.push(Violation::MissingEmbeddings);
    }
    if needs.token_stats && stats.is_none() {
        violations.push(Violation::MissingTokenStats);
    }
    if embeddings.is_none() && stats.is_none() && violations.is_empty() {
        violations.push(Violation::MissingEmbeddings);
    }
    let n = match (embeddings, stats) {
        (Some(e), Some(s)) => {
            if s.len() != e.n() {
                violations.push(Violation::LengthMismatch { stats: s.len(), n: e.n() });
            }
            Some(e.n())
        }
        (Some(e), None) => Some(e.n()),
        (None, Some(s)) => Some(s.len()),
        (None, None) => None,
    };
    if let Some(n) = n {
        if k == 0 || k > n {
            violations.push(Violation::BudgetOutOfRange { k, n });
        }
    }
    match (violations.is_empty(), n) {
        (true, Some(n)) => Ok(RunConfig { n, budget: Budget::new(k, n)? }),
        _ => {
            // Surface the lone variant directly so callers can match on it.
            if violations.len() == 1 {
                match violations[0] {
                    Violation::BudgetOutOfRange { k, n } => return Err(Error::BudgetOutOfRange { k, n }),
                    Violation::LengthMismatch { stats, n } => {
                        return Err(Error::LengthMismatch { stats, n })
                    }
                    _ => {}
                }
            }
            Err(Error::Invalid(Violations(violations)))
        }
    }
}
