//! Greedy maximization of the facility-location objective
//! `F(S) = Σ_i max_{j∈S} w_ij`, optionally mixed with a concave uncertainty
//! term `weight · ln(1 + Σ_{j∈S} u_j)`.
//!
//! Three drivers share one [`CoverageState`]: naive greedy (full argmax each
//! step), lazy greedy (max-heap of stale upper bounds) and stochastic greedy
//! (argmax over a random sample). Naive and lazy return identical sequences.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gain_from_column, KernelOptions, SimilarityColumn, SimilarityEngine};
use crate::types::{Budget, EmbeddingMatrix, KernelSpec, SelectionResult};

/// What the greedy drivers need from a similarity source.
pub trait CoverageKernel: Sync {
    fn n(&self) -> usize;

    /// Coverage gains for each candidate against the current `cur_max`.
    fn coverage_gains(&self, cands: &[usize], cur_max: &[f64]) -> Vec<f64>;

    fn column(&self, j: usize) -> Arc<Vec<f64>>;

    /// Gains of every point against an empty selection.
    fn empty_set_gains(&self) -> Vec<f64> {
        let all: Vec<usize> = (0..self.n()).collect();
        self.coverage_gains(&all, &vec![0.0; self.n()])
    }

    /// How many stale heap entries lazy greedy may refresh in one pass.
    fn refresh_batch(&self) -> usize {
        1
    }
}

impl CoverageKernel for SimilarityEngine<'_> {
    fn n(&self) -> usize {
        SimilarityEngine::n(self)
    }

    fn coverage_gains(&self, cands: &[usize], cur_max: &[f64]) -> Vec<f64> {
        SimilarityEngine::coverage_gains(self, cands, cur_max)
    }

    fn empty_set_gains(&self) -> Vec<f64> {
        SimilarityEngine::empty_set_gains(self)
    }

    fn column(&self, j: usize) -> Arc<Vec<f64>> {
        self.column_shared(j)
    }

    fn refresh_batch(&self) -> usize {
        if self.is_dense() {
            1
        } else {
            self.options().block_size
        }
    }
}

/// A fully materialized kernel, `w[j][i] = w_ij` (column-major by candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitKernel {
    n: usize,
    cols: Vec<Arc<Vec<f64>>>,
}

impl ExplicitKernel {
    /// Builds from a row-major matrix `m[i][j] = w_ij`; entries must lie in [0, 1].
    pub fn from_matrix<R: AsRef<[f64]>>(m: &[R]) -> Result<Self> {
        let n = m.len();
        if n == 0 {
            return Err(Error::BadShape("empty kernel".into()));
        }
        let mut cols = vec![Vec::with_capacity(n); n];
        for (i, row) in m.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::DimensionMismatch { left: n, right: row.len() });
            }
            for (j, &w) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidKernel(format!("w[{i}][{j}] = {w} outside [0, 1]")));
                }
                cols[j].push(w);
            }
        }
        Ok(ExplicitKernel { n, cols: cols.into_iter().map(Arc::new).collect() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j][i]
    }
}

impl CoverageKernel for ExplicitKernel {
    fn n(&self) -> usize {
        self.n
    }

    fn coverage_gains(&self, cands: &[usize], cur_max: &[f64]) -> Vec<f64> {
        cands.iter().map(|&j| gain_from_column(&self.cols[j], cur_max)).collect()
    }

    fn column(&self, j: usize) -> Arc<Vec<f64>> {
        self.cols[j].clone()
    }
}

/// Shifted per-item uncertainties and the weight of the concave term.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    shifted: Vec<f64>,
    weight: f64,
}

impl Mixture {
    /// `shifted` must be finite and nonnegative so that the log term stays
    /// monotone and concave in the running sum.
    pub fn new(shifted: Vec<f64>, weight: f64) -> Result<Self> {
        if let Some((index, &value)) = shifted.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::NegativeShiftedUncertainty { index, value });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidParameter(format!("mixture weight must be >= 0, got {weight}")));
        }
        Ok(Mixture { shifted, weight })
    }

    /// Min-margin scores lie in [-1, 0]; shifting by +1 maps them to [0, 1]
    /// without changing their order.
    pub fn from_min_margin(scores: &[f64], weight: f64) -> Result<Self> {
        Self::new(scores.iter().map(|s| s + 1.0).collect(), weight)
    }

    pub fn shifted(&self) -> &[f64] {
        &self.shifted
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    #[inline]
    fn log_gain(&self, u_sum: f64, j: usize) -> f64 {
        self.weight * log_term_gain(u_sum, self.shifted[j])
    }
}

#[inline]
fn log_term_gain(u_sum: f64, u_cand: f64) -> f64 {
    (u_sum + u_cand).ln_1p() - u_sum.ln_1p()
}

/// Coverage vector and objective of the current selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageState {
    /// `cur_max[i] = max_{j∈S} w_ij`, 0 for the empty set.
    pub cur_max: Vec<f64>,
    /// Full objective (coverage plus weighted log term when mixing).
    pub objective: f64,
    pub selected: Vec<usize>,
    /// Running sum of shifted uncertainties of the selection.
    pub u_sum: f64,
}

impl CoverageState {
    pub fn new(n: usize) -> Self {
        CoverageState { cur_max: vec![0.0; n], objective: 0.0, selected: Vec::new(), u_sum: 0.0 }
    }

    pub fn coverage(&self) -> f64 {
        self.cur_max.iter().sum()
    }

    /// Adds `j` with its kernel column.
    pub fn accept(&mut self, j: usize, col: &[f64], mixture: Option<&Mixture>) {
        for (c, &w) in self.cur_max.iter_mut().zip(col) {
            if w > *c {
                *c = w;
            }
        }
        self.selected.push(j);
        self.objective = self.coverage();
        if let Some(m) = mixture {
            self.u_sum += m.shifted[j];
            self.objective += m.weight * self.u_sum.ln_1p();
        }
    }
}

/// Marginal coverage gain `Σ_i max(0, col[i] - cur_max[i])`.
pub fn fl_gain(state: &CoverageState, col: &SimilarityColumn) -> f64 {
    gain_from_column(&col.values, &state.cur_max)
}

/// Coverage gain plus `ln(1 + u_sum + u_cand) - ln(1 + u_sum)`.
pub fn mixture_gain(state: &CoverageState, col: &SimilarityColumn, u_sum: f64, u_cand: f64) -> Result<f64> {
    if u_cand.is_nan() || u_cand < 0.0 {
        return Err(Error::NegativeShiftedUncertainty { index: col.j, value: u_cand });
    }
    if u_sum.is_nan() || u_sum < 0.0 {
        return Err(Error::NegativeShiftedUncertainty { index: usize::MAX, value: u_sum });
    }
    Ok(fl_gain(state, col) + log_term_gain(u_sum, u_cand))
}

/// Greedy driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Greedy {
    Naive,
    Lazy,
    Stochastic { epsilon: f64, seed: u64 },
}

fn check_mixture(n: usize, mixture: Option<&Mixture>) -> Result<()> {
    if let Some(m) = mixture {
        if m.shifted.len() != n {
            return Err(Error::LengthMismatch { stats: m.shifted.len(), n });
        }
    }
    Ok(())
}

fn total_gains<K: CoverageKernel>(
    kernel: &K,
    state: &CoverageState,
    cands: &[usize],
    mixture: Option<&Mixture>,
) -> Vec<f64> {
    let mut g = if state.selected.is_empty() && cands.len() == kernel.n() {
        kernel.empty_set_gains()
    } else {
        kernel.coverage_gains(cands, &state.cur_max)
    };
    if let Some(m) = mixture {
        for (v, &j) in g.iter_mut().zip(cands) {
            *v += m.log_gain(state.u_sum, j);
        }
    }
    g
}

/// First index of the maximum; `cands` must be ascending.
fn argmax_first(cands: &[usize], gains: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for c in 1..gains.len() {
        if gains[c] > gains[best] {
            best = c;
        }
    }
    (cands[best], gains[best])
}

struct Trace {
    gains: Vec<f64>,
    objective: Vec<f64>,
}

impl Trace {
    fn new(k: usize) -> Self {
        Trace { gains: Vec::with_capacity(k), objective: Vec::with_capacity(k) }
    }

    fn finish(self, state: CoverageState) -> SelectionResult {
        SelectionResult { indices: state.selected, objective_trace: self.objective, gains: self.gains }
    }
}

fn step<K: CoverageKernel>(
    kernel: &K,
    state: &mut CoverageState,
    trace: &mut Trace,
    j: usize,
    gain: f64,
    mixture: Option<&Mixture>,
) {
    let col = kernel.column(j);
    state.accept(j, &col, mixture);
    trace.gains.push(gain);
    trace.objective.push(state.objective);
}

/// Evaluates every unselected candidate at every step.
pub fn greedy_naive<K: CoverageKernel>(
    kernel: &K,
    budget: Budget,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    let n = kernel.n();
    check_budget(budget, n)?;
    check_mixture(n, mixture)?;
    let mut state = CoverageState::new(n);
    let mut trace = Trace::new(budget.k());
    let mut taken = vec![false; n];
    for _ in 0..budget.k() {
        let cands: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        let gains = total_gains(kernel, &state, &cands, mixture);
        let (j, g) = argmax_first(&cands, &gains);
        taken[j] = true;
        step(kernel, &mut state, &mut trace, j, g, mixture);
    }
    Ok(trace.finish(state))
}

/// Cached gain of a candidate as of step `stamp`; an upper bound on its
/// current gain by submodularity.
#[derive(Debug, Clone, Copy)]
pub struct LazyHeapEntry {
    pub candidate: usize,
    pub cached_gain: f64,
    pub stamp: usize,
}

impl PartialEq for LazyHeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for LazyHeapEntry {}

impl Ord for LazyHeapEntry {
    // Max-heap order: larger gain first, then lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.cached_gain
            .total_cmp(&other.cached_gain)
            .then_with(|| other.candidate.cmp(&self.candidate))
    }
}

impl PartialOrd for LazyHeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Accelerated greedy with the same output as [`greedy_naive`].
///
/// The heap is ordered by (cached gain desc, index asc). A top entry that is
/// fresh for the current step beats every other entry: their cached gains
/// are upper bounds, and equal bounds belong to higher indices. Stale tops are
/// refreshed in growing batches (1, 2, 4, … up to the kernel's refresh batch)
/// so large pools amortize one pass over the rows across several candidates.
pub fn greedy_lazy<K: CoverageKernel>(
    kernel: &K,
    budget: Budget,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    let n = kernel.n();
    check_budget(budget, n)?;
    check_mixture(n, mixture)?;
    let mut state = CoverageState::new(n);
    let mut trace = Trace::new(budget.k());

    let all: Vec<usize> = (0..n).collect();
    let init = total_gains(kernel, &state, &all, mixture);
    let mut heap: BinaryHeap<LazyHeapEntry> = all
        .iter()
        .zip(init)
        .map(|(&candidate, cached_gain)| LazyHeapEntry { candidate, cached_gain, stamp: 0 })
        .collect();

    let max_batch = kernel.refresh_batch().max(1);
    for t in 0..budget.k() {
        let mut batch_size = 1;
        loop {
            let top = *heap.peek().expect("heap holds every unselected candidate");
            if top.stamp == t {
                heap.pop();
                step(kernel, &mut state, &mut trace, top.candidate, top.cached_gain, mixture);
                break;
            }
            let mut stale = Vec::with_capacity(batch_size);
            while stale.len() < batch_size {
                match heap.peek() {
                    Some(e) if e.stamp != t => stale.push(heap.pop().unwrap().candidate),
                    _ => break,
                }
            }
            let fresh = total_gains(kernel, &state, &stale, mixture);
            heap.extend(
                stale
                    .into_iter()
                    .zip(fresh)
                    .map(|(candidate, cached_gain)| LazyHeapEntry { candidate, cached_gain, stamp: t }),
            );
            batch_size = (batch_size * 2).min(max_batch);
        }
    }
    Ok(trace.finish(state))
}

/// Per-step sample size `ceil((n / k) · ln(1 / epsilon))`.
pub fn stochastic_sample_size(n: usize, k: usize, epsilon: f64) -> usize {
    ((n as f64 / k as f64) * (1.0 / epsilon).ln()).ceil().max(1.0) as usize
}

/// Stochastic greedy: each step evaluates a uniform sample (without
/// replacement) of the unselected candidates.
pub fn greedy_stochastic<K: CoverageKernel>(
    kernel: &K,
    budget: Budget,
    epsilon: f64,
    seed: u64,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    let n = kernel.n();
    check_budget(budget, n)?;
    check_mixture(n, mixture)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let s = stochastic_sample_size(n, budget.k(), epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut state = CoverageState::new(n);
    let mut trace = Trace::new(budget.k());
    for _ in 0..budget.k() {
        let sample: Vec<usize> = if s >= remaining.len() {
            remaining.clone()
        } else {
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, remaining.len(), s)
                .into_iter()
                .map(|p| remaining[p])
                .collect();
            picked.sort_unstable();
            picked
        };
        let gains = total_gains(kernel, &state, &sample, mixture);
        let (j, g) = argmax_first(&sample, &gains);
        let pos = remaining.binary_search(&j).expect("winner is unselected");
        remaining.remove(pos);
        step(kernel, &mut state, &mut trace, j, g, mixture);
    }
    Ok(trace.finish(state))
}

fn check_budget(budget: Budget, n: usize) -> Result<()> {
    if budget.k() > n {
        return Err(Error::BudgetOutOfRange { k: budget.k(), n });
    }
    Ok(())
}

/// Runs `greedy` over `emb` with the given kernel.
pub fn fl_greedy(
    emb: &EmbeddingMatrix,
    spec: KernelSpec,
    budget: Budget,
    greedy: Greedy,
    mixture: Option<&Mixture>,
    opts: KernelOptions,
) -> Result<SelectionResult> {
    let engine = SimilarityEngine::with_options(emb, spec, opts)?;
    match greedy {
        Greedy::Naive => greedy_naive(&engine, budget, mixture),
        Greedy::Lazy => greedy_lazy(&engine, budget, mixture),
        Greedy::Stochastic { epsilon, seed } => greedy_stochastic(&engine, budget, epsilon, seed, mixture),
    }
}

pub fn fl_greedy_naive(
    emb: &EmbeddingMatrix,
    spec: KernelSpec,
    budget: Budget,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    fl_greedy(emb, spec, budget, Greedy::Naive, mixture, KernelOptions::default())
}

pub fn fl_greedy_lazy(
    emb: &EmbeddingMatrix,
    spec: KernelSpec,
    budget: Budget,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    fl_greedy(emb, spec, budget, Greedy::Lazy, mixture, KernelOptions::default())
}

pub fn fl_greedy_stochastic(
    emb: &EmbeddingMatrix,
    spec: KernelSpec,
    budget: Budget,
    epsilon: f64,
    seed: u64,
    mixture: Option<&Mixture>,
) -> Result<SelectionResult> {
    fl_greedy(emb, spec, budget, Greedy::Stochastic { epsilon, seed }, mixture, KernelOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> ExplicitKernel {
        ExplicitKernel::from_matrix(&[[1.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 1.0]]).unwrap()
    }

    fn col(k: &ExplicitKernel, j: usize) -> SimilarityColumn {
        SimilarityColumn { j, values: k.column(j).to_vec() }
    }

    #[test]
    fn gain_on_empty_state_is_column_sum() {
        let k = k3();
        let state = CoverageState::new(3);
        assert!((fl_gain(&state, &col(&k, 1)) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn dominated_candidate_has_zero_gain() {
        let mut state = CoverageState::new(3);
        state.accept(0, &[1.0, 1.0, 1.0], None);
        let c = SimilarityColumn { j: 1, values: vec![0.3, 1.0, 0.9] };
        assert_eq!(fl_gain(&state, &c), 0.0);
    }

    #[test]
    fn three_point_gain_after_first_pick() {
        let k = k3();
        let mut state = CoverageState::new(3);
        state.accept(0, &k.column(0), None);
        assert!((fl_gain(&state, &col(&k, 2)) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn mixture_gain_examples() {
        let k = k3();
        let mut state = CoverageState::new(3);
        let c = col(&k, 2);
        assert_eq!(mixture_gain(&state, &c, 0.0, 0.0).unwrap(), fl_gain(&state, &c));
        state.cur_max = vec![1.0; 3];
        assert!((mixture_gain(&state, &c, 0.0, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            mixture_gain(&state, &c, 0.0, -0.5),
            Err(Error::NegativeShiftedUncertainty { .. })
        ));
    }

    #[test]
    fn mixture_rejects_negative_shift() {
        assert!(Mixture::new(vec![0.2, -0.1], 1.0).is_err());
        let m = Mixture::from_min_margin(&[-1.0, -0.25, 0.0], 1.0).unwrap();
        assert_eq!(m.shifted(), &[0.0, 0.75, 1.0]);
    }

    #[test]
    fn first_pick_is_max_column_sum() {
        let r = greedy_naive(&k3(), Budget::new(1, 3).unwrap(), None).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.gains[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn duplicates_are_suppressed() {
        // items 0 and 1 are identical; 2 and 3 are far apart
        let m = [
            [1.0, 1.0, 0.3, 0.0],
            [1.0, 1.0, 0.3, 0.0],
            [0.3, 0.3, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let k = ExplicitKernel::from_matrix(&m).unwrap();
        let r = greedy_naive(&k, Budget::new(4, 4).unwrap(), None).unwrap();
        assert_eq!(r.indices, vec![0, 3, 2, 1]);
        assert_eq!(r.gains[3], 0.0);
        assert_eq!(greedy_lazy(&k, Budget::new(4, 4).unwrap(), None).unwrap(), r);
    }

    #[test]
    fn identical_pool_picks_ascending() {
        let emb = EmbeddingMatrix::from_rows(&[[0.5, 0.5]; 5]).unwrap();
        let r = fl_greedy_lazy(&emb, KernelSpec::Rbf { gamma: 1.0 }, Budget::new(5, 5).unwrap(), None).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.gains, vec![5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_budget_covers_everyone() {
        let emb = EmbeddingMatrix::from_rows(&[[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0], [4.0, 4.0]]).unwrap();
        let r = fl_greedy_lazy(&emb, KernelSpec::Rbf { gamma: 0.5 }, Budget::new(4, 4).unwrap(), None).unwrap();
        assert!((r.objective_trace[3] - 4.0).abs() < 1e-12);
        let total: f64 = r.gains.iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_saturated_sample_equals_naive() {
        let emb = EmbeddingMatrix::from_rows(&[[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0], [4.0, 4.0], [0.1, 0.9]]).unwrap();
        let spec = KernelSpec::Rbf { gamma: 2.0 };
        let b = Budget::new(3, 5).unwrap();
        let naive = fl_greedy_naive(&emb, spec, b, None).unwrap();
        let s = fl_greedy_stochastic(&emb, spec, b, 1e-9, 1, None).unwrap();
        assert_eq!(s, naive);
    }

    #[test]
    fn stochastic_is_seed_deterministic() {
        let rows: Vec<[f64; 2]> = (0..40).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let emb = EmbeddingMatrix::from_rows(&rows).unwrap();
        let spec = KernelSpec::Rbf { gamma: 0.1 };
        let b = Budget::new(6, 40).unwrap();
        let a = fl_greedy_stochastic(&emb, spec, b, 0.3, 42, None).unwrap();
        assert_eq!(a, fl_greedy_stochastic(&emb, spec, b, 0.3, 42, None).unwrap());
        assert!(fl_greedy_stochastic(&emb, spec, b, 1.0, 42, None).is_err());
    }

    #[test]
    fn sample_size_formula() {
        // (64 / 8) * ln 10 = 18.42
        assert_eq!(stochastic_sample_size(64, 8, 0.1), 19);
        assert_eq!(stochastic_sample_size(10, 10, 0.5), 1);
    }

    #[test]
    fn heap_order_breaks_ties_by_index() {
        let mut h = BinaryHeap::new();
        h.push(LazyHeapEntry { candidate: 3, cached_gain: 1.0, stamp: 0 });
        h.push(LazyHeapEntry { candidate: 1, cached_gain: 1.0, stamp: 0 });
        h.push(LazyHeapEntry { candidate: 2, cached_gain: 0.5, stamp: 0 });
        let order: Vec<usize> = std::iter::from_fn(|| h.pop().map(|e| e.candidate)).collect();
        assert_eq!(order, vec![1, 3, 2]);
    }
}
