//! Small dense linear algebra kernels.
//!
//! Everything here targets matrices of a few dozen rows at most (Gram
//! matrices of injective-flow Jacobians, sample covariances), so the simple
//! O(d^3) algorithms are the right tool. Matrices are row-major flat slices.

use crate::error::{Error, Result};

/// Cholesky factorization A = L L^T for a symmetric positive definite matrix.
/// Returns the lower factor, row-major. Fails with the smallest pivot seen
/// when the matrix is not positive definite, so callers can report how close
/// to singular the input was.
pub fn cholesky_lower(a: &[f64], d: usize, context: &'static str) -> Result<Vec<f64>> {
    assert_eq!(a.len(), d * d, "cholesky: matrix size");
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { context, pivot: sum });
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// log det A from a Cholesky factor: 2 * sum(log diag(L)).
pub fn logdet_from_cholesky(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Solves A x = b given the lower Cholesky factor of A.
pub fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), d, "cholesky_solve: rhs length");
    // Forward substitution L y = b.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    // Back substitution L^T x = y.
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in (i + 1)..d {
            sum -= l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    x
}

/// Dense inverse of an SPD matrix from its Cholesky factor, by solving
/// against the identity columns. The result is symmetrized to scrub the
/// rounding asymmetry.
pub fn spd_inverse_from_cholesky(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = cholesky_solve(l, d, &e);
        e[j] = 0.0;
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = s;
            inv[j * d + i] = s;
        }
    }
    inv
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns (eigenvalues, eigenvectors) with eigenvectors in the COLUMNS of
/// the returned matrix: A = V diag(w) V^T. Eigenvalues are unsorted.
pub fn sym_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d, "sym_eigen: matrix size");
    let mut m = a.to_vec();
    // Work on the symmetrized copy so tiny asymmetries cannot stall sweeps.
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Stable Jacobi rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = (0..d).map(|i| m[i * d + i]).collect();
    (w, v)
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// C = A * B for square row-major matrices.
pub fn matmul_square(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}
