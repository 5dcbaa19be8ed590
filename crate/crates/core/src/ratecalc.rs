//! Rate and throughput evaluation, the weighted-MMSE reformulation of the
//! log-det rate, and the three closed-form block updates: water-filling for
//! the transmit covariance, the MMSE receive filter, and the weight matrix.
//!
//! All internal algebra is in natural log; throughputs cross to bits (log2)
//! only in the reporting functions.

use nalgebra::Complex;

use crate::error::{CtfaError, Result};
use crate::numerics::{
    frobenius_norm, hermitian_eigenvalues, hermitize, logdet_hermitian_pd, psd_sqrt, trace_re,
    CMat, CVec,
};

/// Transmit covariance per slot, one `N_t x N_t` matrix for samples 0..=N.
#[derive(Debug, Clone)]
pub struct CovarianceSchedule {
    pub q_mat: Vec<CMat>,
}

impl CovarianceSchedule {
    /// Uniform allocation `(P / N_t) I` at every sample.
    pub fn uniform(n_samples: usize, n_tx: usize, power: f64) -> Self {
        let q = CMat::identity(n_tx, n_tx).scale(power / n_tx as f64);
        Self {
            q_mat: vec![q; n_samples],
        }
    }

    /// Enforce the schedule invariants: Hermitian PSD with trace <= P.
    pub fn validate(&self, power: f64) -> Result<()> {
        for (n, q) in self.q_mat.iter().enumerate() {
            let scale = frobenius_norm(q).max(1.0);
            if frobenius_norm(&(q - q.adjoint())) > 1e-10 * scale {
                return Err(CtfaError::Contract(format!(
                    "covariance at slot {n} is not Hermitian"
                )));
            }
            let min_eig = hermitian_eigenvalues(q)?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-9 * scale {
                return Err(CtfaError::NotPsd(min_eig));
            }
            if trace_re(q) > power + 1e-9 {
                return Err(CtfaError::Contract(format!(
                    "covariance at slot {n} exceeds the power budget: {} > {power}",
                    trace_re(q)
                )));
            }
        }
        Ok(())
    }
}

/// Auxiliary WMMSE variables per slot plus the cached objective value.
#[derive(Debug, Clone)]
pub struct WmmseState {
    /// Receive filters, `N_r x N_t`.
    pub u_mat: Vec<CMat>,
    /// Weight matrices, `N_t x N_t`, Hermitian positive definite.
    pub w_mat: Vec<CMat>,
    /// Current h1 value in nats.
    pub objective: f64,
}

fn check_psd(q: &CMat, op: &str) -> Result<()> {
    let scale = frobenius_norm(q).max(1.0);
    let min_eig = hermitian_eigenvalues(q)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-8 * scale {
        return Err(CtfaError::Contract(format!(
            "{op}: covariance is not PSD (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

fn hpd_inverse(m: &CMat, op: &str) -> Result<CMat> {
    hermitize(m)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| CtfaError::Contract(format!("{op}: matrix is not positive definite")))
}

/// `log2 det(I + H Q H^H / sigma^2)` in bits.
pub fn instantaneous_rate(h: &CMat, q: &CMat, noise_var: f64) -> Result<f64> {
    if h.ncols() != q.nrows() || !q.is_square() {
        return Err(CtfaError::DimensionMismatch(format!(
            "instantaneous_rate: H is {}x{}, Q is {}x{}",
            h.nrows(),
            h.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    check_psd(q, "instantaneous_rate")?;
    let nr = h.nrows();
    let m = CMat::identity(nr, nr) + (h * q * h.adjoint()).scale(1.0 / noise_var);
    Ok(logdet_hermitian_pd(&hermitize(&m))? / std::f64::consts::LN_2)
}

/// Throughput in bits: `slot_len * sum_n rate(H_n, Q_n)`.
pub fn total_throughput(
    channels: &[CMat],
    schedule: &CovarianceSchedule,
    noise_var: f64,
    slot_len: f64,
) -> Result<f64> {
    if channels.len() != schedule.q_mat.len() {
        return Err(CtfaError::DimensionMismatch(format!(
            "total_throughput: {} channels vs {} covariances",
            channels.len(),
            schedule.q_mat.len()
        )));
    }
    let mut sum = 0.0;
    for (h, q) in channels.iter().zip(&schedule.q_mat) {
        sum += instantaneous_rate(h, q, noise_var)?;
    }
    Ok(slot_len * sum)
}

/// MSE matrix `E = (I - U^H H Q^{1/2} / sigma)(...)^H + U^H U`.
pub fn mse_matrix(h: &CMat, q: &CMat, u: &CMat, noise_var: f64) -> Result<CMat> {
    let q_sqrt = psd_sqrt(&hermitize(q))?;
    let sigma = noise_var.sqrt();
    let nt = h.ncols();
    let m = CMat::identity(nt, nt) - (u.adjoint() * h * &q_sqrt).scale(1.0 / sigma);
    Ok(hermitize(&(&m * m.adjoint() + u.adjoint() * u)))
}

/// `h1 = sum_n [ln det(W_n) - tr(W_n E_n)]` in nats.
pub fn wmmse_objective(w_mats: &[CMat], e_mats: &[CMat]) -> Result<f64> {
    if w_mats.len() != e_mats.len() {
        return Err(CtfaError::DimensionMismatch(
            "wmmse_objective: slot count mismatch".into(),
        ));
    }
    let mut sum = 0.0;
    for (w, e) in w_mats.iter().zip(e_mats) {
        sum += logdet_hermitian_pd(w)? - trace_re(&(w * e));
    }
    Ok(sum)
}

/// Capacity-achieving covariance by water-filling over the singular values
/// of `h`. The water level is found by bisection; `tr(Q*) = P` exactly up to
/// 1e-12.
pub fn waterfill(h: &CMat, power: f64, noise_var: f64) -> Result<CMat> {
    let svd = crate::numerics::truncated_svd(h)?;
    if svd.rank() == 0 {
        return Err(CtfaError::ZeroChannel);
    }
    let floors: Vec<f64> = svd
        .singulars
        .iter()
        .map(|&xi| noise_var / (xi * xi))
        .collect();
    let alloc = |level: f64| -> Vec<f64> {
        floors.iter().map(|&f| (level - f).max(0.0)).collect()
    };
    let total = |level: f64| -> f64 { alloc(level).iter().sum() };
    let mut lo = 0.0;
    let mut hi = floors.iter().cloned().fold(0.0, f64::max) + power;
    debug_assert!(total(hi) >= power);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < power {
            lo = mid;
        } else {
            hi = mid;
        }
        if (total(hi) - power).abs() <= 1e-12 {
            break;
        }
    }
    let mut p = alloc(hi);
    // Distribute the bisection residual over the active streams so the
    // trace constraint holds exactly.
    let active = p.iter().filter(|&&v| v > 0.0).count();
    let residual = power - p.iter().sum::<f64>();
    if active > 0 {
        let share = residual / active as f64;
        for v in p.iter_mut().filter(|v| **v > 0.0) {
            *v = (*v + share).max(0.0);
        }
    }
    let diag = CMat::from_diagonal(&CVec::from_iterator(
        p.len(),
        p.iter().map(|&v| Complex::new(v, 0.0)),
    ));
    Ok(hermitize(&(&svd.right * diag * svd.right.adjoint())))
}

/// MMSE receive filter `U* = (I + H Q H^H / sigma^2)^{-1} H Q^{1/2} / sigma`.
pub fn update_u(h: &CMat, q: &CMat, noise_var: f64) -> Result<CMat> {
    check_psd(q, "update_u")?;
    let q_sqrt = psd_sqrt(&hermitize(q))?;
    let sigma = noise_var.sqrt();
    let nr = h.nrows();
    let a = CMat::identity(nr, nr) + (h * q * h.adjoint()).scale(1.0 / noise_var);
    let rhs = (h * &q_sqrt).scale(1.0 / sigma);
    let chol = hermitize(&a)
        .cholesky()
        .ok_or_else(|| CtfaError::Contract("update_u: normal matrix not PD".into()))?;
    Ok(chol.solve(&rhs))
}

/// Optimal weight `W* = E(U*)^{-1}`. The flag reports whether a 1e-12 ridge
/// was needed because E was near-singular.
pub fn update_w(h: &CMat, q: &CMat, u_star: &CMat, noise_var: f64) -> Result<(CMat, bool)> {
    let mut e = mse_matrix(h, q, u_star, noise_var)?;
    let eigs = hermitian_eigenvalues(&e)?;
    let max = eigs.iter().cloned().fold(0.0, f64::max);
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut ridged = false;
    if min <= max / 1e12 {
        e += CMat::identity(e.nrows(), e.ncols()).scale(1e-12);
        ridged = true;
    }
    Ok((hermitize(&hpd_inverse(&e, "update_w")?), ridged))
}

/// Variational identity behind the WMMSE reformulation: the log-det rate
/// with noise covariance `z` equals `max_{W,U} [ln det W - tr(W E) + m]`.
/// Returns `(direct, variational)` where the second value is evaluated at
/// the analytic maximizers.
pub fn lemma1_value(h: &CMat, v: &CMat, z: &CMat) -> Result<(f64, f64)> {
    let m = v.ncols();
    let x = h * v * v.adjoint() * h.adjoint();
    // log det(I + X Z^{-1}) = log det(Z + X) - log det(Z), both Hermitian PD.
    let direct = logdet_hermitian_pd(&hermitize(&(&x + z)))? - logdet_hermitian_pd(&hermitize(z))?;
    let hv = h * v;
    let chol = hermitize(&(&x + z))
        .cholesky()
        .ok_or_else(|| CtfaError::Contract("lemma1_value: Z + HVV^H H^H not PD".into()))?;
    let u = chol.solve(&hv);
    let e_mat = {
        let mm = CMat::identity(m, m) - u.adjoint() * &hv;
        hermitize(&(&mm * mm.adjoint() + u.adjoint() * z * &u))
    };
    let w = hermitize(&hpd_inverse(&e_mat, "lemma1_value")?);
    let variational = logdet_hermitian_pd(&w)? - trace_re(&(&w * &e_mat)) + m as f64;
    Ok((direct, variational))
}

/// Full closed-form refresh for one slot: capacity water-filling, then the
/// MMSE filter and weight for the new covariance. Falls back to the uniform
/// covariance when the channel is identically zero.
pub fn refresh_slot(
    h: &CMat,
    power: f64,
    noise_var: f64,
    n_tx: usize,
) -> Result<(CMat, CMat, CMat)> {
    let q = match waterfill(h, power, noise_var) {
        Ok(q) => q,
        Err(CtfaError::ZeroChannel) => CMat::identity(n_tx, n_tx).scale(power / n_tx as f64),
        Err(e) => return Err(e),
    };
    let u = update_u(h, &q, noise_var)?;
    let (w, _) = update_w(h, &q, &u, noise_var)?;
    Ok((q, u, w))
}

/// Per-slot h1 contribution `ln det(W) - tr(W E)` for the given variables.
pub fn slot_objective(h: &CMat, q: &CMat, u: &CMat, w: &CMat, noise_var: f64) -> Result<f64> {
    let e = mse_matrix(h, q, u, noise_var)?;
    Ok(logdet_hermitian_pd(w)? - trace_re(&(w * e)))
}
