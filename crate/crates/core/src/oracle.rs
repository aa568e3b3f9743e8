//! Brute-force references for tiny instances.
//!
//! Nothing here touches the production kernel, coverage or heap code: values
//! are computed straight from the set-function definitions so the greedy
//! paths can be checked against them.

use crate::error::{Error, Result};
use crate::types::KernelSpec;

pub const MAX_SUBSET_POOL: usize = 14;
pub const MAX_SUBSET_K: usize = 5;
pub const MAX_TOPK_POOL: usize = 20;

/// Calls `f` with every k-subset of `0..n` in lexicographic order.
pub fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // rightmost position that can still move right
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn check_bounds(n: usize, k: usize, max_n: usize, max_k: usize) -> Result<()> {
    if n > max_n || k > max_k {
        return Err(Error::InstanceTooLarge(format!(
            "n={n}, k={k} exceeds enumeration bound n<={max_n}, k<={max_k}"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::BudgetOutOfRange { k, n });
    }
    Ok(())
}

fn check_square<R: AsRef<[f64]>>(kernel: &[R]) -> Result<usize> {
    let n = kernel.len();
    for r in kernel {
        if r.as_ref().len() != n {
            return Err(Error::DimensionMismatch { left: n, right: r.as_ref().len() });
        }
    }
    Ok(n)
}

/// `Σ_i max_{j∈S} w_ij` with `kernel[i][j] = w_ij`.
pub fn fl_value<R: AsRef<[f64]>>(kernel: &[R], set: &[usize]) -> f64 {
    kernel
        .iter()
        .map(|row| set.iter().map(|&j| row.as_ref()[j]).fold(0.0, f64::max))
        .sum()
}

/// Facility location plus `weight · ln(1 + Σ_{j∈S} u_j)`.
pub fn mixture_value<R: AsRef<[f64]>>(kernel: &[R], u: &[f64], weight: f64, set: &[usize]) -> f64 {
    let s: f64 = set.iter().map(|&j| u[j]).sum();
    fl_value(kernel, set) + weight * (1.0 + s).ln()
}

fn argmax_subset(n: usize, k: usize, value: impl Fn(&[usize]) -> f64) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    // strict improvement keeps the lexicographically smallest optimum
    for_each_subset(n, k, |s| {
        let v = value(s);
        if v > best.1 {
            best = (s.to_vec(), v);
        }
    });
    best
}

/// Exact facility-location optimum over all `C(n, k)` subsets.
pub fn exhaustive_fl_opt<R: AsRef<[f64]>>(kernel: &[R], k: usize) -> Result<(Vec<usize>, f64)> {
    let n = check_square(kernel)?;
    check_bounds(n, k, MAX_SUBSET_POOL, MAX_SUBSET_K)?;
    Ok(argmax_subset(n, k, |s| fl_value(kernel, s)))
}

/// Exact optimum of the facility-location plus log-uncertainty mixture.
pub fn exhaustive_mixture_opt<R: AsRef<[f64]>>(
    kernel: &[R],
    u: &[f64],
    weight: f64,
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    let n = check_square(kernel)?;
    if u.len() != n {
        return Err(Error::LengthMismatch { stats: u.len(), n });
    }
    check_bounds(n, k, MAX_SUBSET_POOL, MAX_SUBSET_K)?;
    Ok(argmax_subset(n, k, |s| mixture_value(kernel, u, weight, s)))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max_i min_{j∈centers} ||p_i - p_j||`.
pub fn covering_radius<R: AsRef<[f64]>>(points: &[R], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| euclidean(p.as_ref(), points[c].as_ref()))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Exact k-center optimum (true, non-squared radius).
pub fn exhaustive_kcenter_opt<R: AsRef<[f64]>>(points: &[R], k: usize) -> Result<(Vec<usize>, f64)> {
    let n = points.len();
    check_bounds(n, k, MAX_SUBSET_POOL, MAX_SUBSET_K)?;
    let (set, neg) = argmax_subset(n, k, |s| -covering_radius(points, s));
    Ok((set, -neg))
}

/// Set of size `k` maximizing `min_{x∈S} score(x)`, lexicographically smallest on ties.
pub fn exhaustive_topk(scores: &[f64], k: usize) -> Result<(Vec<usize>, f64)> {
    let n = scores.len();
    check_bounds(n, k, MAX_TOPK_POOL, MAX_TOPK_POOL)?;
    Ok(argmax_subset(n, k, |s| s.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min)))
}

/// Kernel matrix by the textbook double loop.
pub fn naive_kernel_matrix<R: AsRef<[f64]>>(points: &[R], spec: KernelSpec) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| {
                    let (a, b) = (a.as_ref(), b.as_ref());
                    match spec {
                        KernelSpec::Rbf { gamma } => {
                            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                            (-d2 / gamma).exp()
                        }
                        KernelSpec::ClippedCosine => {
                            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                            (dot / (na * nb)).clamp(0.0, 1.0)
                        }
                    }
                })
                .collect()
        })
        .collect()
}
