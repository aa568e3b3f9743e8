//! Pairwise similarities and squared distances, evaluated column by column.
//!
//! The full `n × n` kernel is only materialized for pools at or below
//! [`KernelOptions::dense_threshold`]; larger pools compute columns on demand,
//! a block of candidate columns per pass over the embedding rows.
//!
//! Every path (single pair, single column, candidate block, dense matrix)
//! produces bitwise-identical values for the same pair, and every coverage
//! gain is summed over rows in the same fixed chunk order. Greedy decisions
//! therefore do not depend on block size, thread count, or caching.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::types::{EmbeddingMatrix, KernelSpec};

/// Rows per fixed summation chunk. Part of the numeric contract: changing it
/// changes the low bits of every gain.
pub(crate) const SUM_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    /// Candidate columns computed together per pass over the rows.
    pub block_size: usize,
    /// Pools with `n` at or below this are materialized densely.
    pub dense_threshold: usize,
    /// Capacity (in columns) of the LRU column cache; 0 disables it.
    pub column_cache: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { block_size: 64, dense_threshold: 8192, column_cache: 0 }
    }
}

/// Column `j` of the similarity matrix: `values[i] = w_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityColumn {
    pub j: usize,
    pub values: Vec<f64>,
}

#[inline(always)]
fn rbf_from_parts(ni: f64, nj: f64, dot: f64, gamma: f64) -> f64 {
    let d2 = (ni + nj - 2.0 * dot).max(0.0);
    (-d2 / gamma).exp()
}

#[inline(always)]
fn cosine_from_parts(ni: f64, nj: f64, dot: f64) -> f64 {
    // sqrt(ni * nj) rather than sqrt(ni) * sqrt(nj): exact 1 on the diagonal
    (dot / (ni * nj).sqrt()).clamp(0.0, 1.0)
}

#[inline(always)]
fn sq_dist_from_parts(ni: f64, nj: f64, dot: f64) -> f64 {
    (ni + nj - 2.0 * dot).max(0.0)
}

fn check_dims(fi: &[f64], fj: &[f64]) -> Result<()> {
    if fi.len() != fj.len() {
        return Err(Error::DimensionMismatch { left: fi.len(), right: fj.len() });
    }
    Ok(())
}

/// `exp(-||fi - fj||² / gamma)` via the norm expansion, clamped at zero distance.
pub fn rbf_similarity(fi: &[f64], fj: &[f64], gamma: f64) -> Result<f64> {
    check_dims(fi, fj)?;
    KernelSpec::rbf(gamma)?;
    Ok(rbf_from_parts(linalg::dot(fi, fi), linalg::dot(fj, fj), linalg::dot(fi, fj), gamma))
}

/// `max(0, cos(fi, fj))`.
pub fn cosine_clipped_similarity(fi: &[f64], fj: &[f64]) -> Result<f64> {
    check_dims(fi, fj)?;
    let (ni, nj) = (linalg::dot(fi, fi), linalg::dot(fj, fj));
    if ni == 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    if nj == 0.0 {
        return Err(Error::ZeroNormRow { row: 1 });
    }
    Ok(cosine_from_parts(ni, nj, linalg::dot(fi, fj)))
}

pub fn similarity_column(emb: &EmbeddingMatrix, j: usize, spec: KernelSpec) -> Result<SimilarityColumn> {
    let engine = SimilarityEngine::with_options(
        emb,
        spec,
        KernelOptions { dense_threshold: 0, ..Default::default() },
    )?;
    Ok(SimilarityColumn { j, values: engine.column(j)? })
}

/// `||f_i - f_j||²` for every row `i`.
pub fn pairwise_sq_distance_column(emb: &EmbeddingMatrix, j: usize) -> Result<Vec<f64>> {
    if j >= emb.n() {
        return Err(Error::IndexOutOfRange { index: j, n: emb.n() });
    }
    let norms = emb.row_sq_norms();
    let fj = emb.row(j);
    let nj = norms[j];
    let mut out = vec![0.0; emb.n()];
    out.par_chunks_mut(SUM_CHUNK).enumerate().for_each(|(c, slot)| {
        let start = c * SUM_CHUNK;
        for (o, v) in slot.iter_mut().enumerate() {
            let i = start + o;
            *v = sq_dist_from_parts(norms[i], nj, linalg::dot(emb.row(i), fj));
        }
    });
    Ok(out)
}

/// Small LRU of computed columns.
#[derive(Debug, Default)]
struct ColumnCache {
    capacity: usize,
    map: HashMap<usize, Arc<Vec<f64>>>,
    order: VecDeque<usize>,
}

impl ColumnCache {
    fn get(&mut self, j: usize) -> Option<Arc<Vec<f64>>> {
        let col = self.map.get(&j)?.clone();
        if let Some(pos) = self.order.iter().position(|&x| x == j) {
            self.order.remove(pos);
        }
        self.order.push_back(j);
        Some(col)
    }

    fn put(&mut self, j: usize, col: Arc<Vec<f64>>) {
        if self.capacity == 0 || self.map.contains_key(&j) {
            return;
        }
        while self.map.len() >= self.capacity {
            match self.order.pop_front() {
                Some(old) => {
                    self.map.remove(&old);
                }
                None => break,
            }
        }
        self.map.insert(j, col);
        self.order.push_back(j);
    }
}

/// Similarity oracle over one embedding pool and kernel.
///
/// Safe to share across threads; all column requests are pure.
#[derive(Debug)]
pub struct SimilarityEngine<'a> {
    emb: &'a EmbeddingMatrix,
    spec: KernelSpec,
    opts: KernelOptions,
    dense: Option<Vec<f64>>,
    cache: Option<Mutex<ColumnCache>>,
}

impl<'a> SimilarityEngine<'a> {
    pub fn new(emb: &'a EmbeddingMatrix, spec: KernelSpec) -> Result<Self> {
        Self::with_options(emb, spec, KernelOptions::default())
    }

    pub fn with_options(emb: &'a EmbeddingMatrix, spec: KernelSpec, opts: KernelOptions) -> Result<Self> {
        spec.check()?;
        if opts.block_size == 0 {
            return Err(Error::InvalidParameter("block size must be >= 1".into()));
        }
        let norms = emb.row_sq_norms();
        if spec == KernelSpec::ClippedCosine {
            if let Some(row) = norms.iter().position(|&v| v == 0.0) {
                return Err(Error::ZeroNormRow { row });
            }
        }
        let mut engine = SimilarityEngine {
            emb,
            spec,
            opts,
            dense: None,
            cache: (opts.column_cache > 0).then(|| {
                Mutex::new(ColumnCache { capacity: opts.column_cache, ..Default::default() })
            }),
        };
        if emb.n() <= opts.dense_threshold {
            let all: Vec<usize> = (0..emb.n()).collect();
            let mut dense = vec![0.0; emb.n() * emb.n()];
            // dense[j * n + i] = w_ij, one contiguous slice per column
            for block in all.chunks(opts.block_size) {
                let cols = engine.compute_columns(block);
                for (c, &j) in block.iter().enumerate() {
                    dense[j * emb.n()..(j + 1) * emb.n()].copy_from_slice(&cols[c]);
                }
            }
            engine.dense = Some(dense);
        }
        Ok(engine)
    }

    pub fn n(&self) -> usize {
        self.emb.n()
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn options(&self) -> KernelOptions {
        self.opts
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    #[inline(always)]
    fn sim_from_dot(&self, i: usize, j: usize, dot: f64, norms: &[f64]) -> f64 {
        match self.spec {
            KernelSpec::Rbf { gamma } => rbf_from_parts(norms[i], norms[j], dot, gamma),
            KernelSpec::ClippedCosine => cosine_from_parts(norms[i], norms[j], dot),
        }
    }

    /// Single entry `w_ij`.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        if let Some(dense) = &self.dense {
            return dense[j * self.n() + i];
        }
        let dot = linalg::dot(self.emb.row(i), self.emb.row(j));
        self.sim_from_dot(i, j, dot, self.emb.row_sq_norms())
    }

    fn pack(&self, cands: &[usize]) -> Vec<f64> {
        let d = self.emb.d();
        let mut packed = Vec::with_capacity(cands.len() * d);
        for &j in cands {
            packed.extend_from_slice(self.emb.row(j));
        }
        packed
    }

    /// Similarities of rows `lo..hi` against the packed candidates, passed to
    /// `visit` one row at a time in ascending order.
    fn visit_rows(
        &self,
        rows: std::ops::Range<usize>,
        cands: &[usize],
        packed: &[f64],
        buf: &mut [f64],
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let d = self.emb.d();
        let m = cands.len();
        let norms = self.emb.row_sq_norms();
        let e = self.emb;
        let mut i = rows.start;
        while i < rows.end {
            let count = (rows.end - i).min(4);
            if count == 4 {
                linalg::dot_many4([e.row(i), e.row(i + 1), e.row(i + 2), e.row(i + 3)], packed, d, buf);
            } else {
                for r in 0..count {
                    linalg::dot_many(e.row(i + r), packed, d, &mut buf[r * m..(r + 1) * m]);
                }
            }
            for r in 0..count {
                let sims = &mut buf[r * m..(r + 1) * m];
                for (slot, &j) in sims.iter_mut().zip(cands) {
                    *slot = self.sim_from_dot(i + r, j, *slot, norms);
                }
                visit(i + r, sims);
            }
            i += count;
        }
    }

    /// Visits rows in fixed chunks, in parallel across chunks. For each row the
    /// callback receives the similarities against every candidate in `cands`.
    fn fold_chunks<T, F>(&self, cands: &[usize], init: impl Fn() -> T + Sync, visit: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut T, usize, &[f64]) + Sync,
    {
        let n = self.n();
        let packed = self.pack(cands);
        (0..n.div_ceil(SUM_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = init();
                let mut buf = vec![0.0; 4 * cands.len()];
                let rows = c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(n);
                self.visit_rows(rows, cands, &packed, &mut buf, |i, sims| visit(&mut acc, i, sims));
                acc
            })
            .collect()
    }

    /// Gains of every point against an empty selection, bitwise equal to
    /// `coverage_gains(0..n, zeros)`.
    ///
    /// `w_ij` and `w_ji` are computed by the same operations, so one
    /// upper-triangle tile of chunk pairs yields the canonical chunk partial
    /// sums for both its columns and its rows.
    pub fn empty_set_gains(&self) -> Vec<f64> {
        let n = self.n();
        if self.dense.is_some() {
            let all: Vec<usize> = (0..n).collect();
            return self.coverage_gains(&all, &vec![0.0; n]);
        }
        let chunks = n.div_ceil(SUM_CHUNK);
        let range = |c: usize| c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(n);
        let pairs: Vec<(usize, usize)> = (0..chunks).flat_map(|a| (a..chunks).map(move |b| (a, b))).collect();
        let tiles: Vec<(Vec<f64>, Vec<f64>)> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let (rows, cols) = (range(a), range(b));
                // col_part[j]: sum over rows of chunk a; row_part[i]: sum over columns of chunk b
                let mut col_part = vec![0.0; cols.len()];
                let mut row_part = vec![0.0; rows.len()];
                let all_cols: Vec<usize> = cols.clone().collect();
                for sub in all_cols.chunks(self.opts.block_size.max(4)) {
                    let packed = self.pack(sub);
                    let off = sub[0] - cols.start;
                    let mut buf = vec![0.0; 4 * sub.len()];
                    self.visit_rows(rows.clone(), sub, &packed, &mut buf, |i, sims| {
                        let rp = &mut row_part[i - rows.start];
                        for (cp, &w) in col_part[off..off + sub.len()].iter_mut().zip(sims) {
                            if w > 0.0 {
                                *cp += w;
                                *rp += w;
                            }
                        }
                    });
                }
                (col_part, row_part)
            })
            .collect();
        let mut partial = vec![0.0; chunks * n];
        for (&(a, b), (col_part, row_part)) in pairs.iter().zip(&tiles) {
            partial[a * n + range(b).start..a * n + range(b).end].copy_from_slice(col_part);
            if a != b {
                partial[b * n + range(a).start..b * n + range(a).end].copy_from_slice(row_part);
            }
        }
        let mut total = vec![0.0; n];
        for part in partial.chunks_exact(n) {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        total
    }

    fn compute_columns(&self, cands: &[usize]) -> Vec<Vec<f64>> {
        let n = self.n();
        let parts = self.fold_chunks(
            cands,
            || Vec::<f64>::with_capacity(SUM_CHUNK * cands.len()),
            |acc, _i, sims| acc.extend_from_slice(sims),
        );
        let mut cols = vec![Vec::with_capacity(n); cands.len()];
        for part in &parts {
            for row in part.chunks_exact(cands.len()) {
                for (col, &v) in cols.iter_mut().zip(row) {
                    col.push(v);
                }
            }
        }
        cols
    }

    /// Column `j` of the kernel.
    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.n() {
            return Err(Error::IndexOutOfRange { index: j, n: self.n() });
        }
        Ok(self.column_arc(j).as_ref().clone())
    }

    fn column_arc(&self, j: usize) -> Arc<Vec<f64>> {
        if let Some(dense) = &self.dense {
            return Arc::new(dense[j * self.n()..(j + 1) * self.n()].to_vec());
        }
        if let Some(cache) = &self.cache {
            if let Some(col) = cache.lock().unwrap().get(j) {
                return col;
            }
        }
        let col = Arc::new(self.compute_columns(&[j]).pop().unwrap());
        if let Some(cache) = &self.cache {
            cache.lock().unwrap().put(j, col.clone());
        }
        col
    }

    /// Column `j`, shared with the cache when one is enabled.
    pub fn column_shared(&self, j: usize) -> Arc<Vec<f64>> {
        self.column_arc(j)
    }

    /// Coverage gains `Σ_i max(0, w_ic - cur_max[i])` for each candidate `c`.
    pub fn coverage_gains(&self, cands: &[usize], cur_max: &[f64]) -> Vec<f64> {
        debug_assert_eq!(cur_max.len(), self.n());
        if let Some(dense) = &self.dense {
            let n = self.n();
            return cands
                .par_iter()
                .map(|&j| gain_from_column(&dense[j * n..(j + 1) * n], cur_max))
                .collect();
        }
        let mut out = vec![0.0; cands.len()];
        let mut uncached = Vec::new();
        if let Some(cache) = &self.cache {
            let mut guard = cache.lock().unwrap();
            for (c, &j) in cands.iter().enumerate() {
                match guard.get(j) {
                    Some(col) => out[c] = gain_from_column(&col, cur_max),
                    None => uncached.push(c),
                }
            }
        } else {
            uncached.extend(0..cands.len());
        }
        for block in uncached.chunks(self.opts.block_size) {
            let ids: Vec<usize> = block.iter().map(|&c| cands[c]).collect();
            if let Some(cache) = &self.cache {
                let cols = self.compute_columns(&ids);
                let mut guard = cache.lock().unwrap();
                for (col, (&c, &j)) in cols.into_iter().zip(block.iter().zip(&ids)) {
                    out[c] = gain_from_column(&col, cur_max);
                    guard.put(j, Arc::new(col));
                }
            } else {
                let gains = self.block_gains(&ids, cur_max);
                for (&c, g) in block.iter().zip(gains) {
                    out[c] = g;
                }
            }
        }
        out
    }

    fn block_gains(&self, cands: &[usize], cur_max: &[f64]) -> Vec<f64> {
        let partials = self.fold_chunks(
            cands,
            || vec![0.0; cands.len()],
            |acc, i, sims| {
                let floor = cur_max[i];
                for (a, &w) in acc.iter_mut().zip(sims) {
                    let g = w - floor;
                    if g > 0.0 {
                        *a += g;
                    }
                }
            },
        );
        let mut total = vec![0.0; cands.len()];
        for p in &partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    }
}

/// Coverage gain of one explicit column, summed in the canonical chunk order.
pub(crate) fn gain_from_column(col: &[f64], cur_max: &[f64]) -> f64 {
    let mut total = 0.0;
    for (wc, cc) in col.chunks(SUM_CHUNK).zip(cur_max.chunks(SUM_CHUNK)) {
        let mut p = 0.0;
        for (&w, &c) in wc.iter().zip(cc) {
            let g = w - c;
            if g > 0.0 {
                p += g;
            }
        }
        total += p;
    }
    total
}
