//! Small dense linear algebra: LU with partial pivoting, a 1-norm condition
//! estimator, and a symmetric eigenvalue routine for oracles.

use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// LU factorization `PA = LU` of a square matrix.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    piv: Vec<usize>,
    singular: bool,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &[T], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(shape_err("lu", format!("{} elements for n={}", a.len(), n)));
        }
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut singular = false;
        for col in 0..n {
            let mut best = col;
            let mut best_val = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best_val {
                    best = r;
                    best_val = v;
                }
            }
            if best_val == T::zero() {
                singular = true;
                continue;
            }
            if best != col {
                for j in 0..n {
                    lu.swap(col * n + j, best * n + j);
                }
                piv.swap(col, best);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != T::zero() {
                    for j in col + 1..n {
                        let u = lu[col * n + j];
                        lu[r * n + j] -= f * u;
                    }
                }
            }
        }
        Ok(Self {
            n,
            lu,
            piv,
            singular,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves `A X = B` for `B` of shape `[n, m]`.
    pub fn solve(&self, b: &[T], m: usize) -> Result<Vec<T>> {
        let n = self.n;
        if b.len() != n * m {
            return Err(shape_err(
                "lu_solve",
                format!("rhs len {} for n={} m={}", b.len(), n, m),
            ));
        }
        if self.singular {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        let mut x = vec![T::zero(); n * m];
        for (i, &p) in self.piv.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        // forward: L has unit diagonal
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != T::zero() {
                    for j in 0..m {
                        let v = x[k * m + j];
                        x[i * m + j] -= l * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != T::zero() {
                    for j in 0..m {
                        let v = x[k * m + j];
                        x[i * m + j] -= u * v;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        Ok(x)
    }

    /// Solves `A^T X = B` for `B` of shape `[n, m]`.
    pub fn solve_transpose(&self, b: &[T], m: usize) -> Result<Vec<T>> {
        let n = self.n;
        if b.len() != n * m {
            return Err(shape_err(
                "lu_solve_t",
                format!("rhs len {} for n={} m={}", b.len(), n, m),
            ));
        }
        if self.singular {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, x = P^T w.
        let mut z = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != T::zero() {
                    for j in 0..m {
                        let v = z[k * m + j];
                        z[i * m + j] -= u * v;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                z[i * m + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                if l != T::zero() {
                    for j in 0..m {
                        let v = z[k * m + j];
                        z[i * m + j] -= l * v;
                    }
                }
            }
        }
        let mut x = vec![T::zero(); n * m];
        for (i, &p) in self.piv.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&z[i * m..(i + 1) * m]);
        }
        Ok(x)
    }

    /// Estimate of `||A^{-1}||_1` (Hager's method with Higham's alternate
    /// vector), `O(n^2)` per iteration.
    pub fn inverse_norm1_estimate(&self) -> f64 {
        if self.singular {
            return f64::INFINITY;
        }
        let n = self.n;
        let nf = n as f64;
        let mut x = vec![T::lit(1.0 / nf); n];
        let mut est = 0.0f64;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = match self.solve(&x, 1) {
                Ok(y) => y,
                Err(_) => return f64::INFINITY,
            };
            est = y.iter().map(|v| v.as_f64().abs()).sum();
            let xi: Vec<T> = y
                .iter()
                .map(|&v| if v >= T::zero() { T::one() } else { -T::one() })
                .collect();
            let z = match self.solve_transpose(&xi, 1) {
                Ok(z) => z,
                Err(_) => return f64::INFINITY,
            };
            let (j, zmax) = z.iter().enumerate().fold((0, 0.0f64), |(bj, bm), (i, v)| {
                let a = v.as_f64().abs();
                if a > bm {
                    (i, a)
                } else {
                    (bj, bm)
                }
            });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x = vec![T::zero(); n];
            x[j] = T::one();
        }
        let alt: Vec<T> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let t = if n > 1 { i as f64 / (nf - 1.0) } else { 0.0 };
                T::lit(s * (1.0 + t))
            })
            .collect();
        if let Ok(y) = self.solve(&alt, 1) {
            let a: f64 = y.iter().map(|v| v.as_f64().abs()).sum::<f64>() * 2.0 / (3.0 * nf);
            est = est.max(a);
        }
        est
    }
}

/// Matrix 1-norm (max absolute column sum) of an `n x n` matrix.
pub fn norm1<T: Scalar>(a: &[T], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].as_f64().abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number estimate of a square matrix.
pub fn condition_estimate<T: Scalar>(a: &[T], n: usize) -> Result<f64> {
    let lu = Lu::factor(a, n)?;
    Ok(norm1(a, n) * lu.inverse_norm1_estimate())
}

/// Exact 1-norm condition number via the explicit inverse (oracle use).
pub fn condition_exact<T: Scalar>(a: &[T], n: usize) -> Result<f64> {
    let lu = Lu::factor(a, n)?;
    if lu.is_singular() {
        return Ok(f64::INFINITY);
    }
    let eye: Vec<T> = (0..n * n)
        .map(|i| if i / n == i % n { T::one() } else { T::zero() })
        .collect();
    let inv = lu.solve(&eye, n)?;
    Ok(norm1(a, n) * norm1(&inv, n))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: [f64; 9] = [4.0, -2.0, 1.0, 3.0, 6.0, -4.0, 2.0, 1.0, 8.0];

    fn mul(a: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        crate::tensor::kernels::matmul(a, b, &mut out, n, n, m);
        out
    }

    #[test]
    fn solve_and_transpose_solve() {
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let lu = Lu::factor(&A, 3).unwrap();
        let x = lu.solve(&b, 2).unwrap();
        let back = mul(&A, &x, 3, 2);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let mut at = [0.0; 9];
        crate::tensor::kernels::transpose(&A, &mut at, 1, 3, 3);
        let y = lu.solve_transpose(&b, 2).unwrap();
        let back = mul(&at, &y, 3, 2);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_detected() {
        let s = [1.0, 2.0, 2.0, 4.0];
        let lu = Lu::factor(&s, 2).unwrap();
        assert!(lu.is_singular());
        assert!(lu.solve(&[1.0, 1.0], 1).is_err());
        assert!(condition_estimate(&s, 2).unwrap().is_infinite());
    }

    #[test]
    fn estimate_is_close_to_exact() {
        let exact = condition_exact(&A, 3).unwrap();
        let est = condition_estimate(&A, 3).unwrap();
        assert!(est <= exact * (1.0 + 1e-12));
        assert!(est >= exact / 3.0, "est {est} exact {exact}");
        let d = [1.0, 0.0, 0.0, 1e-7];
        assert!(condition_estimate(&d, 2).unwrap() > 1e6);
    }

    #[test]
    fn jacobi_eigenvalues() {
        let m = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let ev = symmetric_eigenvalues(&m, 3);
        let want = [1.0, 3.0, 5.0];
        for (a, b) in ev.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
