//! Row-major matrix multiply with a fixed accumulation order.
//!
//! Each output element is accumulated over the shared dimension in ascending
//! order, so results do not depend on how the inner loop gets vectorized.
//! They do depend on whether the build target has FMA.

use super::Real;

const MR: usize = 4;
const NR: usize = 32;

/// `c[m×n] = a[m×k] · b[k×n]`, or `c += a · b` when `accumulate` is set.
pub(crate) fn gemm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if !accumulate {
        c.fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            tile(i, j, n, k, a, b, c);
            j += NR;
        }
        for r in i..i + MR {
            edge_row(r, full_cols, n, k, a, b, c);
        }
        i += MR;
    }
    for r in i..m {
        edge_row(r, 0, n, k, a, b, c);
    }
}

/// `a·b + c`, fused when the target has hardware FMA (a software fused
/// multiply-add would be far slower than the two-rounding form).
#[inline(always)]
fn madd<T: Real>(a: T, b: T, c: T) -> T {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// One `MR × NR` output tile, accumulated in registers over the full `k`.
#[inline(always)]
fn tile<T: Real>(i: usize, j: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for p in 0..k {
        let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR columns");
        for r in 0..MR {
            let av = rows[r][p];
            for (acc, &bv) in acc[r].iter_mut().zip(brow) {
                *acc = madd(av, bv, *acc);
            }
        }
    }
    for (r, acc) in acc.iter().enumerate() {
        for (cv, &v) in c[(i + r) * n + j..(i + r) * n + j + NR].iter_mut().zip(acc) {
            *cv += v;
        }
    }
}

/// Columns `j0..n` of output row `r`.
fn edge_row<T: Real>(r: usize, j0: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    if j0 == n {
        return;
    }
    let mut acc = vec![T::zero(); n - j0];
    for p in 0..k {
        let av = a[r * k + p];
        for (acc, &bv) in acc.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
            *acc = madd(av, bv, *acc);
        }
    }
    for (cv, v) in c[r * n + j0..(r + 1) * n].iter_mut().zip(acc) {
        *cv += v;
    }
}

/// Transposes a row-major `rows × cols` matrix.
pub(crate) fn transpose<T: Copy>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    assert_eq!(src.len(), rows * cols);
    if src.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(src.len());
    for j in 0..cols {
        out.extend((0..rows).map(|i| src[i * cols + j]));
    }
    out
}
