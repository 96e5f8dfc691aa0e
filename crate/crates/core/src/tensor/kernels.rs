//! Slice-level dense kernels. All loops run in a fixed order so results are
//! bit-reproducible.

use crate::Scalar;

/// `out[m,n] = a[m,k] * b[k,n]` (overwrites `out`).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|x| *x = T::zero());
    gemm_acc(a, b, out, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[m,n] += a[m,k] * b[k,n]`. Each output element sums over `p` in
/// increasing order, starting from its current value; `MR x NR` tiles are
/// accumulated in registers.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let nfull = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        for j0 in (0..nfull).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j0..(i + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bv: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for jj in 0..NR {
                        row[jj] += av * bv[jj];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j0..(i + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for r in i..i + MR {
            gemm_row_tail(a, b, out, r, k, n, nfull);
        }
        i += MR;
    }
    for r in i..m {
        gemm_row_tail(a, b, out, r, k, n, 0);
    }
}

/// Columns `from..n` of output row `r`.
fn gemm_row_tail<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    r: usize,
    k: usize,
    n: usize,
    from: usize,
) {
    if from == n {
        return;
    }
    let row = &mut out[r * n + from..(r + 1) * n];
    for p in 0..k {
        let arp = a[r * k + p];
        let brow = &b[p * n + from..(p + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += arp * bv;
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    transpose(b, &mut bt, 1, n, k);
    gemm_acc(a, &bt, out, m, k, n);
}

/// `out[k,n] += a[m,k]^T * b[m,n]`, summing over `m` in increasing order.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let nfull = n - n % NR;
    let mut p = 0;
    while p + MR <= k {
        for j0 in (0..nfull).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(p + r) * n + j0..(p + r) * n + j0 + NR]);
            }
            for i in 0..m {
                let bv: &[T; NR] = b[i * n + j0..i * n + j0 + NR].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + p + r];
                    for jj in 0..NR {
                        row[jj] += av * bv[jj];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(p + r) * n + j0..(p + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for r in p..p + MR {
            tn_row_tail(a, b, out, r, m, k, n, nfull);
        }
        p += MR;
    }
    for r in p..k {
        tn_row_tail(a, b, out, r, m, k, n, 0);
    }
}

/// Columns `from..n` of output row `r` of [`matmul_tn_acc`].
#[allow(clippy::too_many_arguments)]
fn tn_row_tail<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    r: usize,
    m: usize,
    k: usize,
    n: usize,
    from: usize,
) {
    if from == n {
        return;
    }
    let orow = &mut out[r * n + from..(r + 1) * n];
    for i in 0..m {
        let air = a[i * k + r];
        let brow = &b[i * n + from..(i + 1) * n];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o += air * bv;
        }
    }
}

/// Swaps the last two axes of `batch` stacked `r x c` matrices.
pub fn transpose<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let d = &mut dst[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn variants_agree_with_naive() {
        for (m, k, n) in [(3, 5, 4), (9, 7, 5), (4, 1, 3), (8, 6, 16), (13, 9, 21)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut got = vec![0.0; m * n];
            matmul(&a, &b, &mut got, m, k, n);
            assert_eq!(got, want);

            let mut bt = vec![0.0; k * n];
            transpose(&b, &mut bt, 1, k, n);
            let mut got = vec![0.0; m * n];
            matmul_nt_acc(&a, &bt, &mut got, m, k, n);
            assert_eq!(got, want);

            let mut at = vec![0.0; m * k];
            transpose(&a, &mut at, 1, m, k);
            let mut got = vec![0.0; m * n];
            matmul_tn_acc(&at, &b, &mut got, k, m, n);
            assert_eq!(got, want);
        }
    }
}
