//! Farthest-first traversal for the minimax (k-center) objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::pairwise_sq_distance_column;
use crate::linalg;
use crate::types::{Budget, EmbeddingMatrix, SelectionResult};

/// How the first center is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SeedMode {
    /// Point closest (squared distance) to the pool mean.
    #[default]
    Medoid,
    Index { index: usize },
    Random { seed: u64 },
}

/// Running state of the traversal.
#[derive(Debug, Clone)]
pub struct KCenterState {
    /// Squared distance of each point to its nearest chosen center.
    pub min_dist: Vec<f64>,
    pub chosen: Vec<usize>,
}

impl KCenterState {
    pub fn new(n: usize) -> Self {
        KCenterState { min_dist: vec![f64::INFINITY; n], chosen: Vec::new() }
    }

    /// Covering radius (not squared).
    pub fn radius(&self) -> f64 {
        self.min_dist.iter().cloned().fold(0.0, f64::max).sqrt()
    }

    fn add(&mut self, center: usize, dist_col: &[f64]) {
        self.min_dist
            .par_iter_mut()
            .zip(dist_col.par_iter())
            .for_each(|(m, &d)| {
                if d < *m {
                    *m = d;
                }
            });
        self.min_dist[center] = 0.0;
        self.chosen.push(center);
    }

    /// Farthest point from the chosen set, lowest index on ties.
    fn farthest(&self) -> usize {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in self.min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Index of the row closest to the pool mean, lowest index on ties.
pub fn medoid(emb: &EmbeddingMatrix) -> usize {
    let (n, d) = (emb.n(), emb.d());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(emb.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mean_sq = linalg::dot(&mean, &mean);
    let norms = emb.row_sq_norms();
    let dists: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (norms[i] + mean_sq - 2.0 * linalg::dot(emb.row(i), &mean)).max(0.0))
        .collect();
    let mut best = 0;
    for i in 1..n {
        if dists[i] < dists[best] {
            best = i;
        }
    }
    best
}

/// Greedy k-center. `objective_trace[t]` is the covering radius after `t + 1` centers.
pub fn kcenter_greedy(emb: &EmbeddingMatrix, budget: Budget, seed_mode: SeedMode) -> Result<SelectionResult> {
    let n = emb.n();
    if budget.k() > n {
        return Err(Error::BudgetOutOfRange { k: budget.k(), n });
    }
    let first = match seed_mode {
        SeedMode::Medoid => medoid(emb),
        SeedMode::Index { index } => {
            if index >= n {
                return Err(Error::IndexOutOfRange { index, n });
            }
            index
        }
        SeedMode::Random { seed } => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
    };
    let mut state = KCenterState::new(n);
    let mut trace = Vec::with_capacity(budget.k());
    let mut next = first;
    for _ in 0..budget.k() {
        let col = pairwise_sq_distance_column(emb, next)?;
        state.add(next, &col);
        trace.push(state.radius());
        if state.chosen.len() < budget.k() {
            next = state.farthest();
        }
    }
    Ok(SelectionResult { indices: state.chosen, objective_trace: trace, gains: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn farthest_first_on_a_line() {
        let emb = line(&[0.0, 1.0, 2.0, 10.0]);
        let r = kcenter_greedy(&emb, Budget::new(2, 4).unwrap(), SeedMode::Index { index: 0 }).unwrap();
        assert_eq!(r.indices, vec![0, 3]);
        assert_eq!(r.objective_trace, vec![10.0, 2.0]);
    }

    #[test]
    fn exhausting_the_pool_gives_zero_radius() {
        let emb = line(&[0.5, -3.0, 2.0, 7.0, 7.5]);
        let r = kcenter_greedy(&emb, Budget::new(5, 5).unwrap(), SeedMode::Medoid).unwrap();
        let mut sorted = r.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(*r.objective_trace.last().unwrap(), 0.0);
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn medoid_is_closest_to_mean() {
        // mean = 2.6; the point 2 is closest
        assert_eq!(medoid(&line(&[0.0, 1.0, 2.0, 10.0, 0.0])), 2);
        // ties go to the lowest index
        assert_eq!(medoid(&line(&[1.0, -1.0])), 0);
    }

    #[test]
    fn random_seed_is_reproducible() {
        let emb = line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = Budget::new(3, 6).unwrap();
        let a = kcenter_greedy(&emb, b, SeedMode::Random { seed: 9 }).unwrap();
        assert_eq!(a, kcenter_greedy(&emb, b, SeedMode::Random { seed: 9 }).unwrap());
    }

    #[test]
    fn bad_seed_index() {
        let emb = line(&[0.0, 1.0]);
        assert!(matches!(
            kcenter_greedy(&emb, Budget::new(1, 2).unwrap(), SeedMode::Index { index: 2 }),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
