//! Small dense complex-Hermitian linear algebra used throughout the crate.
//!
//! Only the handful of operations the optimizer needs are exposed here, each
//! with a checkable contract. Matrices are tiny (a few tens of rows at most),
//! so everything is dense and allocation cost is irrelevant.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CtfaError, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Relative tolerance for rank truncation in [`truncated_svd`].
pub const RANK_TOL: f64 = 1e-10;

/// Hermitian-ness check tolerance, scaled by the matrix magnitude.
pub const HERM_TOL: f64 = 1e-10;

/// Truncated SVD of a general complex matrix.
pub struct SvdFactors {
    /// Left singular vectors, one column per kept singular value.
    pub left: CMat,
    /// Singular values above `RANK_TOL * max`, descending.
    pub singulars: Vec<f64>,
    /// Right singular vectors, one column per kept singular value.
    pub right: CMat,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singulars.len()
    }

    /// Reconstruct `left * diag(singulars) * right^H`.
    pub fn reconstruct(&self) -> CMat {
        let s = CMat::from_diagonal(&CVec::from_iterator(
            self.singulars.len(),
            self.singulars.iter().map(|&v| Complex64::new(v, 0.0)),
        ));
        &self.left * s * self.right.adjoint()
    }
}

pub fn frobenius_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `(M + M^H) / 2`, absorbing round-off before eigen/sqrt routines.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

fn check_hermitian(m: &CMat, op: &str) -> Result<()> {
    if !m.is_square() {
        return Err(CtfaError::Contract(format!(
            "{op}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !is_finite(m) {
        return Err(CtfaError::Contract(format!("{op}: non-finite input")));
    }
    let scale = frobenius_norm(m).max(1.0);
    let dev = frobenius_norm(&(m - m.adjoint()));
    if dev > HERM_TOL * scale * 10.0 {
        return Err(CtfaError::Contract(format!(
            "{op}: matrix is not Hermitian (deviation {dev:.3e})"
        )));
    }
    Ok(())
}

/// Largest eigenvalue of a Hermitian matrix.
pub fn hermitian_max_eig(m: &CMat) -> Result<f64> {
    check_hermitian(m, "hermitian_max_eig")?;
    let eig = hermitize(m).symmetric_eigen();
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Truncated SVD keeping singular values above `RANK_TOL` relative to the largest.
pub fn truncated_svd(m: &CMat) -> Result<SvdFactors> {
    if !is_finite(m) {
        return Err(CtfaError::Contract("truncated_svd: non-finite input".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let v = v_t.adjoint();

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let max_sv = order
        .first()
        .map(|&i| svd.singular_values[i])
        .unwrap_or(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > RANK_TOL * max_sv && svd.singular_values[i] > 0.0)
        .collect();

    // from_columns panics on an empty slice; rank 0 gets explicit 0-column
    // factors instead.
    let left = if kept.is_empty() {
        CMat::zeros(m.nrows(), 0)
    } else {
        CMat::from_columns(
            &kept
                .iter()
                .map(|&i| u.column(i).into_owned())
                .collect::<Vec<_>>(),
        )
    };
    let right = if kept.is_empty() {
        CMat::zeros(m.ncols(), 0)
    } else {
        CMat::from_columns(
            &kept
                .iter()
                .map(|&i| v.column(i).into_owned())
                .collect::<Vec<_>>(),
        )
    };
    let singulars = kept.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(SvdFactors {
        left,
        singulars,
        right,
    })
}

/// Hermitian PSD square root: returns R with `R * R = q`.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything below `-1e-6`
/// is rejected as not PSD.
pub fn psd_sqrt(q: &CMat) -> Result<CMat> {
    check_hermitian(q, "psd_sqrt")?;
    let eig = hermitize(q).symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_ev < -1e-6 * scale {
        return Err(CtfaError::NotPsd(min_ev));
    }
    let n = q.nrows();
    let sqrt_d = CMat::from_diagonal(&CVec::from_iterator(
        n,
        eig.eigenvalues
            .iter()
            .map(|&v| Complex64::new(v.max(0.0).sqrt(), 0.0)),
    ));
    let r = &eig.eigenvectors * sqrt_d * eig.eigenvectors.adjoint();
    Ok(hermitize(&r))
}

/// All eigenvalues of a Hermitian matrix (unsorted).
pub fn hermitian_eigenvalues(m: &CMat) -> Result<Vec<f64>> {
    check_hermitian(m, "hermitian_eigenvalues")?;
    let eig = hermitize(m).symmetric_eigen();
    Ok(eig.eigenvalues.iter().copied().collect())
}

/// `ln det` of a Hermitian positive definite matrix via Cholesky.
pub fn logdet_hermitian_pd(m: &CMat) -> Result<f64> {
    check_hermitian(m, "logdet_hermitian_pd")?;
    let chol = hermitize(m)
        .cholesky()
        .ok_or_else(|| CtfaError::Contract("logdet: matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|z| z.re.ln()).sum::<f64>())
}

/// Real part of the trace.
pub fn trace_re(m: &CMat) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_cmat(rng: &mut impl Rng, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn random_hermitian_psd(rng: &mut impl Rng, n: usize) -> CMat {
        let a = random_cmat(rng, n, n);
        &a * a.adjoint()
    }

    /// Test-only oracle: cyclic Jacobi eigensolver for Hermitian matrices,
    /// independent of the nalgebra path used by the implementation.
    fn jacobi_eigenvalues(m: &CMat) -> Vec<f64> {
        let n = m.nrows();
        let mut a = hermitize(m);
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)].norm_sqr();
                }
            }
            if off.sqrt() < 1e-14 * frobenius_norm(m).max(1.0) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.norm() < 1e-300 {
                        continue;
                    }
                    let app = a[(p, p)].re;
                    let aqq = a[(q, q)].re;
                    // Unitary 2x2 diagonalization of [[app, apq],[apq^*, aqq]].
                    let phase = apq / apq.norm();
                    let theta = 0.5 * (2.0 * apq.norm()).atan2(app - aqq);
                    let c = theta.cos();
                    let s = theta.sin();
                    // Columns p,q updated: new_p = c*p + s*phase^* *q ... apply as
                    // A <- J^H A J with J[[c, -s*phase],[s*phase^*, c]] pattern.
                    let jpp = Complex64::new(c, 0.0);
                    let jpq = -phase * s;
                    let jqp = phase.conj() * s;
                    let jqq = Complex64::new(c, 0.0);
                    // A <- A J on columns p,q
                    for r in 0..n {
                        let arp = a[(r, p)];
                        let arq = a[(r, q)];
                        a[(r, p)] = arp * jpp + arq * jqp;
                        a[(r, q)] = arp * jpq + arq * jqq;
                    }
                    // A <- J^H A on rows p,q
                    for ccol in 0..n {
                        let apc = a[(p, ccol)];
                        let aqc = a[(q, ccol)];
                        a[(p, ccol)] = jpp.conj() * apc + jqp.conj() * aqc;
                        a[(q, ccol)] = jpq.conj() * apc + jqq.conj() * aqc;
                    }
                }
            }
        }
        (0..n).map(|i| a[(i, i)].re).collect()
    }

    #[test]
    fn max_eig_identity() {
        let m = CMat::identity(3, 3);
        assert!((hermitian_max_eig(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_eig_diagonal() {
        let m = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(3.0, 0.0),
            Complex64::new(2.0, 0.0),
        ]));
        assert!((hermitian_max_eig(&m).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn max_eig_matches_jacobi_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_hermitian_psd(&mut rng, 4);
            let got = hermitian_max_eig(&m).unwrap();
            let want = jacobi_eigenvalues(&m)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn max_eig_rejects_non_square() {
        let m = CMat::zeros(2, 3);
        assert!(hermitian_max_eig(&m).is_err());
    }

    #[test]
    fn max_eig_rejects_non_hermitian() {
        let mut m = CMat::identity(2, 2);
        m[(0, 1)] = Complex64::new(1.0, 0.0);
        assert!(hermitian_max_eig(&m).is_err());
    }

    #[test]
    fn max_eig_positive_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..10 {
            let m = random_hermitian_psd(&mut rng, 3);
            let alpha = rng.gen_range(0.1..10.0);
            let a = hermitian_max_eig(&m).unwrap();
            let b = hermitian_max_eig(&m.scale(alpha)).unwrap();
            assert!((b - alpha * a).abs() <= 1e-9 * (alpha * a).abs().max(1e-12));
        }
    }

    #[test]
    fn svd_identity() {
        let f = truncated_svd(&CMat::identity(2, 2)).unwrap();
        assert_eq!(f.rank(), 2);
        assert!((f.singulars[0] - 1.0).abs() < 1e-12);
        assert!((f.singulars[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_rank_one() {
        // u with norm 2, v with norm 3 -> single singular value 6.
        let u = CVec::from_vec(vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]);
        let v = CVec::from_vec(vec![
            Complex64::new(0.0, 3.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        let m = &u * v.adjoint();
        let f = truncated_svd(&m).unwrap();
        assert_eq!(f.rank(), 1);
        assert!((f.singulars[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn svd_reconstruction() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = random_cmat(&mut rng, 4, 3);
            let f = truncated_svd(&m).unwrap();
            assert!(frobenius_norm(&(f.reconstruct() - &m)) < 1e-9);
            // Orthonormal columns to 1e-10.
            let gu = f.left.adjoint() * &f.left;
            let gv = f.right.adjoint() * &f.right;
            let id = CMat::identity(f.rank(), f.rank());
            assert!(frobenius_norm(&(gu - &id)) < 1e-10 * 10.0);
            assert!(frobenius_norm(&(gv - &id)) < 1e-10 * 10.0);
        }
    }

    #[test]
    fn svd_singulars_of_adjoint_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let m = random_cmat(&mut rng, 5, 3);
        let a = truncated_svd(&m).unwrap().singulars;
        let b = truncated_svd(&m.adjoint()).unwrap().singulars;
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sqrt_diagonal() {
        let q = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(4.0, 0.0),
            Complex64::new(9.0, 0.0),
        ]));
        let r = psd_sqrt(&q).unwrap();
        assert!((r[(0, 0)].re - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)].re - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_zero() {
        let r = psd_sqrt(&CMat::zeros(3, 3)).unwrap();
        assert!(frobenius_norm(&r) == 0.0);
    }

    #[test]
    fn sqrt_multiplication_oracle_and_commutes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = random_hermitian_psd(&mut rng, 3);
            let r = psd_sqrt(&q).unwrap();
            assert!(frobenius_norm(&(&r * &r - &q)) < 1e-9 * frobenius_norm(&q).max(1.0));
            assert!(frobenius_norm(&(&r * &q - &q * &r)) < 1e-8);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let q = CMat::from_diagonal(&CVec::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(-0.5, 0.0),
        ]));
        assert!(matches!(psd_sqrt(&q), Err(CtfaError::NotPsd(_))));
    }
}
