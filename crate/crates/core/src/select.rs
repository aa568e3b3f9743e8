//! One entry point per selection strategy, shared by every front end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::facility_location::{fl_greedy, Greedy, Mixture};
use crate::kcenter::{kcenter_greedy, SeedMode};
use crate::kernels::KernelOptions;
use crate::types::{validate_inputs, Budget, EmbeddingMatrix, KernelSpec, Requirements, SelectionResult, TokenStatsSequence};
use crate::uncertainty::{self, ScoreOptions, UncertaintyKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    /// Uniform sampling without replacement.
    Random { seed: u64 },
    Uncertainty { kind: UncertaintyKind, opts: ScoreOptions },
    Kcenter { seed_mode: SeedMode },
    Fl { kernel: KernelSpec, greedy: Greedy, kernel_opts: KernelOptionsDef },
    /// Facility location plus `weight · ln(1 + Σ shifted min-margin)`.
    FlMixture { kernel: KernelSpec, greedy: Greedy, weight: f64, kernel_opts: KernelOptionsDef },
}

/// Serializable mirror of [`KernelOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptionsDef {
    pub block_size: usize,
    pub dense_threshold: usize,
    pub column_cache: usize,
}

impl Default for KernelOptionsDef {
    fn default() -> Self {
        KernelOptions::default().into()
    }
}

impl From<KernelOptions> for KernelOptionsDef {
    fn from(o: KernelOptions) -> Self {
        KernelOptionsDef { block_size: o.block_size, dense_threshold: o.dense_threshold, column_cache: o.column_cache }
    }
}

impl From<KernelOptionsDef> for KernelOptions {
    fn from(o: KernelOptionsDef) -> Self {
        KernelOptions { block_size: o.block_size, dense_threshold: o.dense_threshold, column_cache: o.column_cache }
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random { .. } => "random",
            Strategy::Uncertainty { .. } => "uncertainty",
            Strategy::Kcenter { .. } => "kcenter",
            Strategy::Fl { .. } => "fl",
            Strategy::FlMixture { .. } => "fl-mixture",
        }
    }

    pub fn requirements(&self) -> Requirements {
        match self {
            Strategy::Random { .. } => Requirements::default(),
            Strategy::Uncertainty { .. } => Requirements { embeddings: false, token_stats: true },
            Strategy::Kcenter { .. } | Strategy::Fl { .. } => Requirements { embeddings: true, token_stats: false },
            Strategy::FlMixture { .. } => Requirements { embeddings: true, token_stats: true },
        }
    }
}

/// `k` distinct indices drawn uniformly from `0..n`.
pub fn random_selection(n: usize, budget: Budget, seed: u64) -> SelectionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n, budget.k()).into_vec();
    SelectionResult { indices, objective_trace: Vec::new(), gains: Vec::new() }
}

/// Validates inputs for `strategy` and runs it.
pub fn run_strategy(
    strategy: &Strategy,
    embeddings: Option<&EmbeddingMatrix>,
    stats: Option<&[TokenStatsSequence]>,
    k: usize,
) -> Result<SelectionResult> {
    let cfg = validate_inputs(strategy.requirements(), embeddings, stats, k)?;
    let budget = cfg.budget;
    match *strategy {
        Strategy::Random { seed } => Ok(random_selection(cfg.n, budget, seed)),
        Strategy::Uncertainty { kind, opts } => {
            let scores = uncertainty::score_all(stats.unwrap(), kind, opts)?;
            uncertainty::select_topk_by_scores(&scores, budget)
        }
        Strategy::Kcenter { seed_mode } => kcenter_greedy(embeddings.unwrap(), budget, seed_mode),
        Strategy::Fl { kernel, greedy, kernel_opts } => {
            fl_greedy(embeddings.unwrap(), kernel, budget, greedy, None, kernel_opts.into())
        }
        Strategy::FlMixture { kernel, greedy, weight, kernel_opts } => {
            let scores = uncertainty::score_all(stats.unwrap(), UncertaintyKind::MinMargin, ScoreOptions::default())?;
            let mixture = Mixture::from_min_margin(&scores, weight)?;
            fl_greedy(embeddings.unwrap(), kernel, budget, greedy, Some(&mixture), kernel_opts.into())
        }
    }
}
