//! One-sided Jacobi singular value decomposition.
//!
//! The batch-level matrices this crate decomposes are small (tens of rows by
//! a few hundred columns), where cyclic one-sided Jacobi is accurate and easy
//! to audit: rotate column pairs of a working copy until all pairs are
//! orthogonal, read singular values off the column norms, and accumulate the
//! rotations into V.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sweep limit before declaring non-convergence.
pub const MAX_SWEEPS: usize = 60;
/// A column pair counts as orthogonal when |<p,q>| <= REL_TOL * ||p|| * ||q||.
pub const REL_TOL: f64 = 1e-12;

/// Thin SVD factors: `a = u * diag(s) * v^T` with singular values descending.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// m x k left singular vectors (columns may be zero for zero singular values).
    pub u: Tensor,
    /// k singular values, nonnegative, sorted descending.
    pub s: Vec<f64>,
    /// n x k right singular vectors.
    pub v: Tensor,
}

impl SvdFactors {
    /// Singular values as a 1-D tensor.
    pub fn spectrum(&self) -> Tensor {
        Tensor::from_vec(self.s.clone()).expect("spectrum is non-empty")
    }
}

/// Computes the thin SVD of a 2-D tensor.
///
/// The factorization is verified internally: the reconstruction residual
/// must satisfy `||a - u s v^T||_F <= 1e-8 * (1 + ||a||_F)`.
pub fn svd(a: &Tensor) -> Result<SvdFactors> {
    if !a.is_matrix() {
        return Err(Error::shape(
            "svd",
            format!("needs a 2-D operand, got {:?}", a.shape()),
        ));
    }
    a.check_finite("svd")?;

    let (m, n) = (a.shape()[0], a.shape()[1]);
    // One-sided Jacobi wants at least as many rows as columns; for wide
    // matrices decompose the transpose and swap the factor roles.
    let transposed = m < n;
    let work = if transposed { a.transpose()? } else { a.clone() };
    let (wm, wn) = (work.shape()[0], work.shape()[1]);

    let mut b: Vec<f64> = work.data().to_vec();
    let mut v = vec![0.0; wn * wn];
    for j in 0..wn {
        v[j * wn + j] = 1.0;
    }

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..wn {
            for q in (p + 1)..wn {
                let (app, aqq, apq) = column_gram(&b, wm, wn, p, q);
                if apq.abs() <= REL_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                // classic stable rotation zeroing the (p,q) Gram entry
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut b, wm, wn, p, q, c, s);
                rotate_columns(&mut v, wn, wn, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdConvergence { sweeps: MAX_SWEEPS });
    }

    // Singular values are the column norms of the rotated working matrix.
    let k = wn.min(wm);
    let scale = {
        let f = work.frobenius_norm();
        if f > 0.0 {
            f
        } else {
            1.0
        }
    };
    let mut sigma = vec![0.0; wn];
    let mut u = vec![0.0; wm * wn];
    for j in 0..wn {
        let norm = (0..wm).map(|i| b[i * wn + j] * b[i * wn + j]).sum::<f64>().sqrt();
        sigma[j] = norm;
        if norm > scale * 1e-300 {
            for i in 0..wm {
                u[i * wn + j] = b[i * wn + j] / norm;
            }
        }
        // zero singular value: leave the U column zero, it carries no mass
    }

    // Sort descending; stable order keeps runs deterministic.
    let mut order: Vec<usize> = (0..wn).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite singular values"));
    let order = &order[..k];

    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let u_sorted = select_columns(&u, wm, wn, order);
    let v_sorted = select_columns(&v, wn, wn, order);

    let factors = if transposed {
        // work = a^T = U S V^T  =>  a = V S U^T
        SvdFactors {
            u: Tensor::new(vec![m, k], v_sorted)?,
            s,
            v: Tensor::new(vec![n, k], u_sorted)?,
        }
    } else {
        SvdFactors {
            u: Tensor::new(vec![m, k], u_sorted)?,
            s,
            v: Tensor::new(vec![n, k], v_sorted)?,
        }
    };

    verify_reconstruction(a, &factors)?;
    Ok(factors)
}

/// Singular values only, sorted descending.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

fn column_gram(b: &[f64], rows: usize, cols: usize, p: usize, q: usize) -> (f64, f64, f64) {
    let mut app = 0.0;
    let mut aqq = 0.0;
    let mut apq = 0.0;
    for i in 0..rows {
        let bp = b[i * cols + p];
        let bq = b[i * cols + q];
        app += bp * bp;
        aqq += bq * bq;
        apq += bp * bq;
    }
    (app, aqq, apq)
}

fn rotate_columns(b: &mut [f64], rows: usize, cols: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..rows {
        let bp = b[i * cols + p];
        let bq = b[i * cols + q];
        b[i * cols + p] = c * bp - s * bq;
        b[i * cols + q] = s * bp + c * bq;
    }
}

fn select_columns(mat: &[f64], rows: usize, cols: usize, order: &[usize]) -> Vec<f64> {
    let k = order.len();
    let mut out = vec![0.0; rows * k];
    for i in 0..rows {
        for (jj, &j) in order.iter().enumerate() {
            out[i * k + jj] = mat[i * cols + j];
        }
    }
    out
}

fn verify_reconstruction(a: &Tensor, f: &SvdFactors) -> Result<()> {
    let k = f.s.len();
    let mut us = f.u.clone();
    let (m, cols) = (us.shape()[0], us.shape()[1]);
    debug_assert_eq!(cols, k);
    for i in 0..m {
        for j in 0..k {
            us.data_mut()[i * k + j] *= f.s[j];
        }
    }
    let recon = us.matmul(&f.v.transpose()?)?;
    let residual = a.sub(&recon)?.frobenius_norm();
    let budget = 1e-8 * (1.0 + a.frobenius_norm());
    if residual > budget {
        return Err(Error::numeric(
            "svd",
            format!("reconstruction residual {residual:.3e} exceeds {budget:.3e}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(r: &mut Rng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| r.normal()).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    /// Independent oracle: singular values are sqrt of eigenvalues of A^T A,
    /// computed with a two-sided Jacobi eigensolver written only for tests.
    fn eig_oracle_singular_values(a: &Tensor) -> Vec<f64> {
        let at = a.transpose().unwrap();
        let small = if a.shape()[0] >= a.shape()[1] {
            at.matmul(a).unwrap()
        } else {
            a.matmul(&at).unwrap()
        };
        let n = small.shape()[0];
        let mut g: Vec<f64> = small.data().to_vec();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += g[p * n + q] * g[p * n + q];
                }
            }
            if off.sqrt() < 1e-14 * (1.0 + small.frobenius_norm()) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let gpq = g[p * n + q];
                    if gpq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (g[q * n + q] - g[p * n + p]) / gpq;
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let gip = g[i * n + p];
                        let giq = g[i * n + q];
                        g[i * n + p] = c * gip - s * giq;
                        g[i * n + q] = s * gip + c * giq;
                    }
                    for j in 0..n {
                        let gpj = g[p * n + j];
                        let gqj = g[q * n + j];
                        g[p * n + j] = c * gpj - s * gqj;
                        g[q * n + j] = s * gpj + c * gqj;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| g[i * n + i].max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        eig
    }

    #[test]
    fn identity_spectrum_is_ones() {
        let s = singular_values(&Tensor::identity(3)).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_sorted() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shear_matrix_matches_closed_form() {
        // eigenvalues of A^T A for [[1,1],[0,1]] are (3 +- sqrt(5)) / 2
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = singular_values(&a).unwrap();
        let hi = ((3.0 + 5.0_f64.sqrt()) / 2.0).sqrt();
        let lo = ((3.0 - 5.0_f64.sqrt()) / 2.0).sqrt();
        assert!((s[0] - hi).abs() < 1e-12, "{} vs {}", s[0], hi);
        assert!((s[1] - lo).abs() < 1e-12, "{} vs {}", s[1], lo);
    }

    #[test]
    fn matches_eigenvalue_oracle_on_random_matrices() {
        let mut r = Rng::seed_from(11);
        for trial in 0..50 {
            let m = 1 + r.below(8);
            let n = 1 + r.below(12);
            let a = random_matrix(&mut r, m, n);
            let s = singular_values(&a).unwrap();
            let expect = eig_oracle_singular_values(&a);
            assert_eq!(s.len(), m.min(n));
            for (i, (got, want)) in s.iter().zip(&expect).enumerate() {
                assert!(
                    (got - want).abs() <= 1e-8 * (1.0 + want),
                    "trial {trial}: sigma[{i}] {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn transpose_invariance() {
        let mut r = Rng::seed_from(12);
        for _ in 0..20 {
            let m = 2 + r.below(6);
            let n = 2 + r.below(9);
            let a = random_matrix(&mut r, m, n);
            let s1 = singular_values(&a).unwrap();
            let s2 = singular_values(&a.transpose().unwrap()).unwrap();
            for (x, y) in s1.iter().zip(&s2) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scaling_homogeneity() {
        let mut r = Rng::seed_from(13);
        let a = random_matrix(&mut r, 4, 6);
        let s = singular_values(&a).unwrap();
        for c in [-2.5, 0.5, 3.0] {
            let sc = singular_values(&a.scale(c)).unwrap();
            for (x, y) in s.iter().zip(&sc) {
                assert!((x * c.abs() - y).abs() < 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn rank_deficient_matrix_has_zero_tail() {
        // two identical columns -> rank 1
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let s = singular_values(&a).unwrap();
        assert!(s[1].abs() < 1e-12);
        assert!((s[0] - (28.0_f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_column_norm() {
        let a = Tensor::new(vec![3, 1], vec![1.0, 2.0, 2.0]).unwrap();
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
    }
}
