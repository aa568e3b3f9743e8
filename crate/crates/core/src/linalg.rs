//! Dot-product kernels shared by every pairwise computation.
//!
//! All routines accumulate each pair in the same fixed order (eight strided
//! lanes, a fixed reduction tree, then the scalar tail), so a given pair of
//! rows yields bitwise the same value whichever entry point computes it.

pub(crate) const LANES: usize = 8;

/// `acc + x * y`, fused when the target has FMA. Every dot in a build goes
/// through this one operation.
#[inline(always)]
fn madd(acc: f64, x: f64, y: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        x.mul_add(y, acc)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        acc + x * y
    }
}

#[inline(always)]
fn reduce(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn tail(a: &[f64], b: &[f64]) -> f64 {
    let mut t = 0.0;
    for (x, y) in a.iter().zip(b) {
        t = madd(t, *x, *y);
    }
    t
}

/// Dot product of two equal-length slices.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() - a.len() % LANES;
    let mut acc = [0.0f64; LANES];
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = madd(acc[l], ca[l], cb[l]);
        }
    }
    reduce(&acc) + tail(&a[split..], &b[split..])
}

/// Dots of one row against a packed block of `out.len()` rows of width `d`.
#[inline]
pub(crate) fn dot_many(row: &[f64], packed: &[f64], d: usize, out: &mut [f64]) {
    let m = out.len();
    debug_assert_eq!(packed.len(), m * d);
    let quads = m / 4;
    for q in 0..quads {
        let base = q * 4 * d;
        let b = [
            &packed[base..base + d],
            &packed[base + d..base + 2 * d],
            &packed[base + 2 * d..base + 3 * d],
            &packed[base + 3 * d..base + 4 * d],
        ];
        out[q * 4..q * 4 + 4].copy_from_slice(&tile::<1, 4>([row], b)[0]);
    }
    for c in quads * 4..m {
        out[c] = dot(row, &packed[c * d..(c + 1) * d]);
    }
}

/// `out[r][q] = dot(a[r], b[q])` for an `R x C` tile.
#[inline(always)]
fn tile<const R: usize, const C: usize>(a: [&[f64]; R], b: [&[f64]; C]) -> [[f64; C]; R] {
    let len = a[0].len();
    let split = len - len % LANES;
    let acc = tile_acc::<R, C>(a, b, split);
    std::array::from_fn(|r| std::array::from_fn(|q| reduce(&acc[r][q]) + tail(&a[r][split..], &b[q][split..])))
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "fma"))]
#[inline(never)]
fn tile_acc<const R: usize, const C: usize>(a: [&[f64]; R], b: [&[f64]; C], split: usize) -> [[[f64; LANES]; C]; R] {
    use std::arch::x86_64::*;
    let ha: [&[f64]; R] = std::array::from_fn(|r| &a[r][..split]);
    let hb: [&[f64]; C] = std::array::from_fn(|q| &b[q][..split]);
    // SAFETY: the cfg above guarantees avx512f and fma at compile time
    let mut acc = [[unsafe { _mm512_setzero_pd() }; C]; R];
    let mut c = 0;
    while c < split {
        let rb: [__m512d; C] = std::array::from_fn(|q| load(&hb[q][c..]));
        for r in 0..R {
            let ra = load(&ha[r][c..]);
            for q in 0..C {
                acc[r][q] = unsafe { _mm512_fmadd_pd(ra, rb[q], acc[r][q]) };
            }
        }
        c += LANES;
    }
    // SAFETY: __m512d and [f64; LANES] have the same size and every bit pattern is valid for both
    acc.map(|row| row.map(|v| unsafe { std::mem::transmute::<__m512d, [f64; LANES]>(v) }))
}

/// By-value load; `_mm512_loadu_pd` goes through `read_unaligned`, which
/// carries a per-call overlap check when debug assertions are on.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "fma"))]
#[inline(always)]
fn load(chunk: &[f64]) -> std::arch::x86_64::__m512d {
    assert!(chunk.len() >= LANES);
    // SAFETY: LANES in-bounds f64 at f64 alignment; __m512d has the same size and accepts any bits
    unsafe { std::mem::transmute::<[f64; LANES], std::arch::x86_64::__m512d>(*chunk.as_ptr().cast::<[f64; LANES]>()) }
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f", target_feature = "fma")))]
#[inline(never)]
fn tile_acc<const R: usize, const C: usize>(a: [&[f64]; R], b: [&[f64]; C], split: usize) -> [[[f64; LANES]; C]; R] {
    let mut acc = [[[0.0f64; LANES]; C]; R];
    let ha: [&[f64]; R] = std::array::from_fn(|r| &a[r][..split]);
    let hb: [&[f64]; C] = std::array::from_fn(|q| &b[q][..split]);
    let mut c = 0;
    while c < split {
        for r in 0..R {
            let ra: &[f64; LANES] = ha[r][c..c + LANES].try_into().unwrap();
            for q in 0..C {
                let rb: &[f64; LANES] = hb[q][c..c + LANES].try_into().unwrap();
                for l in 0..LANES {
                    acc[r][q][l] = madd(acc[r][q][l], ra[l], rb[l]);
                }
            }
        }
        c += LANES;
    }
    acc
}

/// `dot_many` for four rows at once; `out` holds four consecutive runs of `m` values.
#[inline]
pub(crate) fn dot_many4(rows: [&[f64]; 4], packed: &[f64], d: usize, out: &mut [f64]) {
    let m = out.len() / 4;
    debug_assert_eq!(packed.len(), m * d);
    let quads = m / 4;
    for q in 0..quads {
        let base = q * 4 * d;
        let b = [
            &packed[base..base + d],
            &packed[base + d..base + 2 * d],
            &packed[base + 2 * d..base + 3 * d],
            &packed[base + 3 * d..base + 4 * d],
        ];
        let r = tile::<4, 4>(rows, b);
        for (k, vals) in r.iter().enumerate() {
            out[k * m + 4 * q..k * m + 4 * q + 4].copy_from_slice(vals);
        }
    }
    for c in quads * 4..m {
        let r = tile::<4, 1>(rows, [&packed[c * d..(c + 1) * d]]);
        for (k, vals) in r.iter().enumerate() {
            out[k * m + c] = vals[0];
        }
    }
}
