//! Matrix kernels with a fixed reduction order.
//!
//! Every output element is reduced sequentially over the inner index in
//! ascending order. Work is split across threads only along output rows, so
//! the result is bitwise identical for any thread count and tiling.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 20;

fn parallel(work: usize) -> bool {
    work >= PAR_THRESHOLD && rayon::current_num_threads() > 1
}

const MR: usize = 4;
const NR: usize = 32;

/// `c[rows, n] += A * b[inner, n]` where `A[i, p] = a[i * rs + p * cs]`.
/// Each output element accumulates over `p` in ascending order, so tiling
/// does not change the result.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T], rows: usize, inner: usize, n: usize) {
    let full_rows = rows - rows % MR;
    let full_cols = n - n % NR;
    // column panels outermost so one panel of `b` stays in cache across row blocks
    for j0 in (0..full_cols).step_by(NR) {
        for i0 in (0..full_rows).step_by(MR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, acc_r) in acc.iter_mut().enumerate() {
                acc_r.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..inner {
                let b_row: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR columns");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let s = a[(i0 + r) * rs + p * cs];
                    for (x, &y) in acc_r.iter_mut().zip(b_row) {
                        *x = s.mul_add(y, *x);
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_r);
            }
        }
    }
    if full_cols < n {
        tail(a, rs, cs, b, c, 0..full_rows, full_cols, inner, n);
    }
    if full_rows < rows {
        tail(a, rs, cs, b, c, full_rows..rows, 0, inner, n);
    }
}

#[allow(clippy::too_many_arguments)]
fn tail<T: Real>(
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
    rows: std::ops::Range<usize>,
    j0: usize,
    inner: usize,
    n: usize,
) {
    for i in rows {
        let c_row = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..inner {
            let s = a[i * rs + p * cs];
            for (x, &y) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *x = s.mul_add(y, *x);
            }
        }
    }
}

fn split_rows<T: Real>(c: &mut [T], rows: usize, n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if parallel(work) {
        let band = MR * rows.div_ceil(MR * rayon::current_num_threads()).max(1);
        c.par_chunks_mut(band * n)
            .enumerate()
            .for_each(|(bi, chunk)| f(bi * band, chunk));
    } else {
        f(0, c);
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    split_rows(c, m, n, m * k * n, |r0, chunk| {
        let rows = chunk.len() / n;
        gemm_strided(&a[r0 * k..(r0 + rows) * k], k, 1, b, chunk, rows, k, n);
    });
}

/// `c[k,n] += a[r,k]^T * b[r,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], r: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), k * n);
    split_rows(c, k, n, r * k * n, |p0, chunk| {
        let rows = chunk.len() / n;
        gemm_strided(&a[p0..], 1, k, b, chunk, rows, r, n);
    });
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Transposes a row-major `[rows, cols]` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))` computed with max subtraction.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
