//! Majorization machinery for a single element's trajectory subproblem:
//! the quadratic-in-field-response decomposition of the weighted MSE, the
//! eigenvalue majorizer, the closed-form gradient/Hessian of the majorized
//! objective, the Lipschitz curvature bound, the resulting quadratic
//! surrogate, and the linearized separation constraints.


use crate::channel::{field_response_matrix, field_response_vector, ChannelGeometry, Position2D, Side};
use crate::error::{CtfaError, Result};
use crate::numerics::{hermitian_max_eig, hermitize, psd_sqrt, trace_re, CMat, CVec};

/// Everything held fixed while one element of one slot moves.
pub struct SlotContext<'a> {
    pub geometry: &'a ChannelGeometry,
    pub tx_positions: &'a [Position2D],
    pub rx_positions: &'a [Position2D],
    /// Transmit covariance for the slot.
    pub q: &'a CMat,
    /// Receive filter for the slot.
    pub u: &'a CMat,
    /// Weight matrix for the slot.
    pub w: &'a CMat,
    pub noise_var: f64,
    pub wavelength: f64,
}

/// Quadratic decomposition of the slot's weighted MSE in the moving
/// element's field-response vector:
/// `tr(W E) = g^H B g + 2 Re{g^H d} + const`.
#[derive(Debug, Clone)]
pub struct SlotCoefficients {
    pub b_mat: CMat,
    pub d_vec: CVec,
    /// Largest eigenvalue of `b_mat`, defining the majorizer `Phi = lam I`.
    pub phi_scale: f64,
    pub const_term: f64,
}

/// One-slot quadratic surrogate `gamma(q) = (delta/2)|q|^2 + linear^T q`;
/// `gamma(q) + const_shift` majorizes the linearized objective `tau`.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateQuadratic {
    pub curvature: f64,
    pub linear: [f64; 2],
    pub expansion_point: Position2D,
    /// `tau` at the expansion point.
    pub anchor_value: f64,
    /// Constant making `gamma + const_shift` tangent to `tau` at the
    /// expansion point.
    pub const_shift: f64,
}

impl SurrogateQuadratic {
    pub fn gamma(&self, q: Position2D) -> f64 {
        0.5 * self.curvature * (q.x * q.x + q.y * q.y) + self.linear[0] * q.x + self.linear[1] * q.y
    }

    /// Upper bound on `tau(q)`.
    pub fn majorized_value(&self, q: Position2D) -> f64 {
        self.gamma(q) + self.const_shift
    }
}

/// Linearized separation constraint: `normal . (q - fixed_point) >= min_sep`.
#[derive(Debug, Clone, Copy)]
pub struct HalfSpace {
    pub normal: [f64; 2],
    pub fixed_point: Position2D,
    pub min_sep: f64,
}

impl HalfSpace {
    pub fn slack(&self, q: Position2D) -> f64 {
        self.normal[0] * (q.x - self.fixed_point.x) + self.normal[1] * (q.y - self.fixed_point.y)
            - self.min_sep
    }
}

/// Builds the decomposition coefficients for `element` of the given side.
///
/// Every other variable (other elements' positions, the far side's layout,
/// the covariance and the auxiliaries) is frozen; the coefficients are valid
/// for any candidate position of the moving element.
pub fn slot_coefficients(ctx: &SlotContext, side: Side, element: usize) -> Result<SlotCoefficients> {
    let sigma_mat = &ctx.geometry.path_response;
    let sigma = ctx.noise_var.sqrt();
    let f_mat = field_response_matrix(ctx.rx_positions, Side::Rx, ctx.geometry, ctx.wavelength);
    let g_mat = field_response_matrix(ctx.tx_positions, Side::Tx, ctx.geometry, ctx.wavelength);
    let q_sqrt = psd_sqrt(&hermitize(ctx.q))?;

    // Shared constant pieces of tr(W E).
    let mut const_term = trace_re(ctx.w) + trace_re(&(ctx.w * ctx.u.adjoint() * ctx.u));

    let (c_mat, a_mat, s_mat, own_count) = match side {
        Side::Tx => {
            // C = Sigma^H F U W U^H F^H Sigma / sigma^2 over the tx paths.
            let c = (sigma_mat.adjoint() * &f_mat * ctx.u * ctx.w * ctx.u.adjoint()
                * f_mat.adjoint()
                * sigma_mat)
                .scale(1.0 / ctx.noise_var);
            // A = Sigma^H F U W Q^{1/2} / sigma; alpha_i is column i.
            let a = (sigma_mat.adjoint() * &f_mat * ctx.u * ctx.w * &q_sqrt).scale(1.0 / sigma);
            // S = G Q^{1/2}; the moving element contributes column-k rank-1.
            let s = &g_mat * &q_sqrt;
            (hermitize(&c), a, s, ctx.tx_positions.len())
        }
        Side::Rx => {
            // C = Sigma G Q G^H Sigma^H / sigma^2 over the rx paths.
            let c = (sigma_mat * &g_mat * ctx.q * g_mat.adjoint() * sigma_mat.adjoint())
                .scale(1.0 / ctx.noise_var);
            // A = Sigma G Q^{1/2} W U^H / sigma; alpha_l is column l.
            let a = (sigma_mat * &g_mat * &q_sqrt * ctx.w * ctx.u.adjoint()).scale(1.0 / sigma);
            // T = F L_X^{1/2} with L_X = U W U^H.
            let l_x = hermitize(&(ctx.u * ctx.w * ctx.u.adjoint()));
            let l_sqrt = psd_sqrt(&l_x)?;
            let t = &f_mat * &l_sqrt;
            (hermitize(&c), a, t, ctx.rx_positions.len())
        }
    };
    if element >= own_count {
        return Err(CtfaError::Contract(format!(
            "slot_coefficients: element {element} out of range {own_count}"
        )));
    }

    // Weight column of the moving element and the interference remainder.
    let own_weights = match side {
        Side::Tx => q_sqrt.column(element).into_owned(),
        Side::Rx => {
            let l_x = hermitize(&(ctx.u * ctx.w * ctx.u.adjoint()));
            psd_sqrt(&l_x)?.column(element).into_owned()
        }
    };
    let own_field = match side {
        Side::Tx => field_response_vector(
            ctx.tx_positions[element],
            &ctx.geometry.tx_elevations,
            &ctx.geometry.tx_azimuths,
            ctx.wavelength,
        ),
        Side::Rx => field_response_vector(
            ctx.rx_positions[element],
            &ctx.geometry.rx_elevations,
            &ctx.geometry.rx_azimuths,
            ctx.wavelength,
        ),
    };
    // S = sum_i field_i weights_i^H; remove the moving element's dyad.
    let s_rest = &s_mat - &own_field * own_weights.adjoint();

    let weight_norm_sq: f64 = own_weights.iter().map(|z| z.norm_sqr()).sum();
    let b_mat = c_mat.scale(weight_norm_sq);
    let d_vec = &c_mat * &s_rest * &own_weights - a_mat.column(element).into_owned();

    // Remaining constants: the frozen elements' linear terms and the
    // interference quadratic.
    let (elev, azim) = ctx.geometry.angles(side);
    let positions = match side {
        Side::Tx => ctx.tx_positions,
        Side::Rx => ctx.rx_positions,
    };
    for (i, &p) in positions.iter().enumerate() {
        if i == element {
            continue;
        }
        let fi = field_response_vector(p, elev, azim, ctx.wavelength);
        const_term -= 2.0 * fi.dotc(&a_mat.column(i).into_owned()).re;
    }
    const_term += trace_re(&(&c_mat * &s_rest * s_rest.adjoint()));

    let phi_scale = hermitian_max_eig(&b_mat)?.max(0.0);
    Ok(SlotCoefficients {
        b_mat,
        d_vec,
        phi_scale,
        const_term,
    })
}

/// Direct evaluation of the decomposition at a candidate position.
pub fn h3_value(
    coeffs: &SlotCoefficients,
    q: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> f64 {
    let g = field_response_vector(q, elevations, azimuths, wavelength);
    let quad = g.dotc(&(&coeffs.b_mat * &g)).re;
    let lin = 2.0 * g.dotc(&coeffs.d_vec).re;
    quad + lin + coeffs.const_term
}

/// `eta = d - (lam_max I - B) g(q_prev)`, defining `tau(q) = 2 Re{g^H eta}`.
pub fn eta(
    coeffs: &SlotCoefficients,
    expansion_point: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> CVec {
    let g = field_response_vector(expansion_point, elevations, azimuths, wavelength);
    let phi_minus_b =
        CMat::identity(coeffs.b_mat.nrows(), coeffs.b_mat.ncols()).scale(coeffs.phi_scale)
            - &coeffs.b_mat;
    &coeffs.d_vec - phi_minus_b * g
}

/// Constant completing the majorization: `H3(q) <= tau(q) + gamma2` with
/// equality at the expansion point.
pub fn majorization_constant(
    coeffs: &SlotCoefficients,
    expansion_point: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> f64 {
    let g = field_response_vector(expansion_point, elevations, azimuths, wavelength);
    let l = elevations.len() as f64;
    let phi_minus_b = CMat::identity(coeffs.b_mat.nrows(), coeffs.b_mat.ncols())
        .scale(coeffs.phi_scale)
        - &coeffs.b_mat;
    l * coeffs.phi_scale + g.dotc(&(phi_minus_b * &g)).re + coeffs.const_term
}

/// `tau(q) = 2 Re{g(q)^H eta} = 2 sum |eta_i| cos kappa_i`.
pub fn tau_value(
    eta_vec: &CVec,
    q: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> f64 {
    let g = field_response_vector(q, elevations, azimuths, wavelength);
    2.0 * g.dotc(eta_vec).re
}

/// Closed-form gradient, Hessian, and Lipschitz curvature of `tau` at `q`.
pub fn surrogate_derivatives(
    eta_vec: &CVec,
    q: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> ([f64; 2], [[f64; 2]; 2], f64) {
    let two_pi = std::f64::consts::TAU;
    let k0 = two_pi / wavelength;
    let mut grad = [0.0_f64; 2];
    let mut hess = [[0.0_f64; 2]; 2];
    let mut curvature = 0.0_f64;
    for (i, z) in eta_vec.iter().enumerate() {
        let mag = z.norm();
        let sx = elevations[i].sin() * azimuths[i].cos();
        let sy = elevations[i].cos();
        let kappa = k0 * (q.x * sx + q.y * sy) - z.arg();
        let (sin_k, cos_k) = kappa.sin_cos();
        grad[0] -= 2.0 * k0 * mag * sx * sin_k;
        grad[1] -= 2.0 * k0 * mag * sy * sin_k;
        hess[0][0] -= 2.0 * k0 * k0 * mag * sx * sx * cos_k;
        hess[0][1] -= 2.0 * k0 * k0 * mag * sx * sy * cos_k;
        hess[1][1] -= 2.0 * k0 * k0 * mag * sy * sy * cos_k;
        curvature += 4.0 * k0 * k0 * mag;
    }
    hess[1][0] = hess[0][1];
    (grad, hess, curvature)
}

/// Assemble the quadratic surrogate tangent to `tau` at the expansion point.
pub fn build_surrogate(
    eta_vec: &CVec,
    expansion_point: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> SurrogateQuadratic {
    let (grad, _, curvature) =
        surrogate_derivatives(eta_vec, expansion_point, elevations, azimuths, wavelength);
    let anchor = tau_value(eta_vec, expansion_point, elevations, azimuths, wavelength);
    let qe = expansion_point;
    let linear = [grad[0] - curvature * qe.x, grad[1] - curvature * qe.y];
    // tau(q) <= anchor + grad.(q - qe) + (delta/2)|q - qe|^2
    //        = gamma(q) + [anchor - grad.qe + (delta/2)|qe|^2].
    let const_shift = anchor - grad[0] * qe.x - grad[1] * qe.y
        + 0.5 * curvature * (qe.x * qe.x + qe.y * qe.y);
    SurrogateQuadratic {
        curvature,
        linear,
        expansion_point,
        anchor_value: anchor,
        const_shift,
    }
}

/// Inner linearization of the pairwise distance constraint around the
/// previous iterate: every point of the half-space keeps true distance
/// at least `min_sep` from `fixed_point`.
pub fn linearize_separation(
    moving_point_prev: Position2D,
    fixed_point: Position2D,
    min_sep: f64,
) -> Result<HalfSpace> {
    let dx = moving_point_prev.x - fixed_point.x;
    let dy = moving_point_prev.y - fixed_point.y;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist <= 1e-9 {
        return Err(CtfaError::DegenerateGeometry(
            "separation linearization at coincident points".into(),
        ));
    }
    Ok(HalfSpace {
        normal: [dx / dist, dy / dist],
        fixed_point,
        min_sep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_geometry, ScenarioConfig};
    use crate::kinematics::initial_upa_layout;
    use crate::ratecalc::{mse_matrix, refresh_slot};
    use crate::numerics::frobenius_norm;
    use nalgebra::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(seed: u64) -> (ScenarioConfig, ChannelGeometry, Vec<Position2D>, Vec<Position2D>) {
        let cfg = ScenarioConfig::default();
        let geom = sample_geometry(&cfg, seed).unwrap();
        let tx = initial_upa_layout(cfg.n_tx, &cfg).unwrap();
        let rx = initial_upa_layout(cfg.n_rx, &cfg).unwrap();
        (cfg, geom, tx, rx)
    }

    fn slot_vars(
        cfg: &ScenarioConfig,
        geom: &ChannelGeometry,
        tx: &[Position2D],
        rx: &[Position2D],
    ) -> (CMat, CMat, CMat) {
        let h = crate::channel::assemble_channel(tx, rx, geom, cfg.wavelength).unwrap();
        refresh_slot(&h, cfg.power, cfg.noise_var, cfg.n_tx).unwrap()
    }

    fn direct_weighted_mse(
        cfg: &ScenarioConfig,
        geom: &ChannelGeometry,
        tx: &[Position2D],
        rx: &[Position2D],
        q: &CMat,
        u: &CMat,
        w: &CMat,
    ) -> f64 {
        let h = crate::channel::assemble_channel(tx, rx, geom, cfg.wavelength).unwrap();
        let e = mse_matrix(&h, q, u, cfg.noise_var).unwrap();
        trace_re(&(w * e))
    }

    fn random_point(rng: &mut ChaCha20Rng, cfg: &ScenarioConfig) -> Position2D {
        Position2D::new(
            rng.gen_range(0.0..cfg.region_side),
            rng.gen_range(0.0..cfg.region_side),
        )
    }

    #[test]
    fn decomposition_matches_direct_evaluation_tx() {
        let (cfg, geom, tx, rx) = setup(21);
        let (q, u, w) = slot_vars(&cfg, &geom, &tx, &rx);
        let ctx = SlotContext {
            geometry: &geom,
            tx_positions: &tx,
            rx_positions: &rx,
            q: &q,
            u: &u,
            w: &w,
            noise_var: cfg.noise_var,
            wavelength: cfg.wavelength,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(210);
        for k in 0..cfg.n_tx {
            let coeffs = slot_coefficients(&ctx, Side::Tx, k).unwrap();
            for _ in 0..50 {
                let probe = random_point(&mut rng, &cfg);
                let mut tx2 = tx.clone();
                tx2[k] = probe;
                let want = direct_weighted_mse(&cfg, &geom, &tx2, &rx, &q, &u, &w);
                let got = h3_value(
                    &coeffs,
                    probe,
                    &geom.tx_elevations,
                    &geom.tx_azimuths,
                    cfg.wavelength,
                );
                assert!((got - want).abs() < 1e-8, "element {k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn decomposition_matches_direct_evaluation_rx() {
        let (cfg, geom, tx, rx) = setup(22);
        let (q, u, w) = slot_vars(&cfg, &geom, &tx, &rx);
        let ctx = SlotContext {
            geometry: &geom,
            tx_positions: &tx,
            rx_positions: &rx,
            q: &q,
            u: &u,
            w: &w,
            noise_var: cfg.noise_var,
            wavelength: cfg.wavelength,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(220);
        for l in 0..cfg.n_rx {
            let coeffs = slot_coefficients(&ctx, Side::Rx, l).unwrap();
            for _ in 0..50 {
                let probe = random_point(&mut rng, &cfg);
                let mut rx2 = rx.clone();
                rx2[l] = probe;
                let want = direct_weighted_mse(&cfg, &geom, &tx, &rx2, &q, &u, &w);
                let got = h3_value(
                    &coeffs,
                    probe,
                    &geom.rx_elevations,
                    &geom.rx_azimuths,
                    cfg.wavelength,
                );
                assert!((got - want).abs() < 1e-8, "element {l}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_paths_give_position_independent_decomposition() {
        let (cfg, mut geom, tx, rx) = setup(23);
        geom.path_response.fill(Complex::new(0.0, 0.0));
        let q = CMat::identity(cfg.n_tx, cfg.n_tx).scale(cfg.power / cfg.n_tx as f64);
        let u = CMat::zeros(cfg.n_rx, cfg.n_tx);
        let w = CMat::identity(cfg.n_tx, cfg.n_tx);
        let ctx = SlotContext {
            geometry: &geom,
            tx_positions: &tx,
            rx_positions: &rx,
            q: &q,
            u: &u,
            w: &w,
            noise_var: cfg.noise_var,
            wavelength: cfg.wavelength,
        };
        let coeffs = slot_coefficients(&ctx, Side::Tx, 0).unwrap();
        assert!(frobenius_norm(&coeffs.b_mat) < 1e-14);
        assert!(coeffs.d_vec.iter().all(|z| z.norm() < 1e-14));
        // tr(W E) = tr(I) with U = 0.
        assert!((coeffs.const_term - cfg.n_tx as f64).abs() < 1e-12);
    }

    #[test]
    fn single_tx_element_has_pure_filter_linear_term() {
        let cfg = ScenarioConfig {
            n_tx: 1,
            n_rx: 1,
            l_tx: 2,
            l_rx: 2,
            ..ScenarioConfig::default()
        };
        let geom = sample_geometry(&cfg, 7).unwrap();
        let tx = initial_upa_layout(1, &cfg).unwrap();
        let rx = initial_upa_layout(1, &cfg).unwrap();
        let (q, u, w) = slot_vars(&cfg, &geom, &tx, &rx);
        let ctx = SlotContext {
            geometry: &geom,
            tx_positions: &tx,
            rx_positions: &rx,
            q: &q,
            u: &u,
            w: &w,
            noise_var: cfg.noise_var,
            wavelength: cfg.wavelength,
        };
        let coeffs = slot_coefficients(&ctx, Side::Tx, 0).unwrap();
        // No interference: d = -alpha.
        let sigma = cfg.noise_var.sqrt();
        let f = field_response_matrix(&rx, Side::Rx, &geom, cfg.wavelength);
        let q_sqrt = psd_sqrt(&q).unwrap();
        let alpha = (geom.path_response.adjoint() * f * &u * &w * &q_sqrt).scale(1.0 / sigma);
        let want = -alpha.column(0).into_owned();
        let diff: f64 = coeffs
            .d_vec
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn eta_reduces_to_d_for_scalar_b() {
        let l = 3;
        let d = CVec::from_fn(l, |i, _| Complex::new(i as f64 + 1.0, -0.5));
        let coeffs = SlotCoefficients {
            b_mat: CMat::identity(l, l).scale(2.5),
            d_vec: d.clone(),
            phi_scale: 2.5,
            const_term: 0.0,
        };
        let elev = vec![0.3, 1.1, 2.0];
        let azim = vec![0.2, 0.9, 2.5];
        let e = eta(&coeffs, Position2D::new(0.01, 0.02), &elev, &azim, 0.04);
        let diff: f64 = e.iter().zip(d.iter()).map(|(a, b)| (a - b).norm()).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn majorization_probe_and_tangency() {
        let (cfg, geom, tx, rx) = setup(24);
        let (q, u, w) = slot_vars(&cfg, &geom, &tx, &rx);
        let ctx = SlotContext {
            geometry: &geom,
            tx_positions: &tx,
            rx_positions: &rx,
            q: &q,
            u: &u,
            w: &w,
            noise_var: cfg.noise_var,
            wavelength: cfg.wavelength,
        };
        let coeffs = slot_coefficients(&ctx, Side::Tx, 1).unwrap();
        let anchor = tx[1];
        let e = eta(&coeffs, anchor, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
        let gamma2 = majorization_constant(
            &coeffs,
            anchor,
            &geom.tx_elevations,
            &geom.tx_azimuths,
            cfg.wavelength,
        );
        let mut rng = ChaCha20Rng::seed_from_u64(240);
        for _ in 0..200 {
            let probe = random_point(&mut rng, &cfg);
            let h3 = h3_value(&coeffs, probe, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
            let bound = tau_value(&e, probe, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength)
                + gamma2;
            assert!(h3 <= bound + 1e-9, "{h3} > {bound}");
        }
        // Equality at the expansion point.
        let h3 = h3_value(&coeffs, anchor, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
        let bound = tau_value(&e, anchor, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength)
            + gamma2;
        assert!((h3 - bound).abs() < 1e-9);
    }

    #[test]
    fn phi_identity_for_unit_modulus_vectors() {
        // g^H (lam I) g = L lam for any position.
        let (cfg, geom, _, _) = setup(25);
        let mut rng = ChaCha20Rng::seed_from_u64(250);
        for _ in 0..20 {
            let p = random_point(&mut rng, &cfg);
            let g = field_response_vector(p, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
            let quad: f64 = g.iter().map(|z| z.norm_sqr()).sum();
            assert!((quad - cfg.l_tx as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_trivial_and_single_path() {
        let zero = CVec::zeros(2);
        let (g, h, c) = surrogate_derivatives(&zero, Position2D::new(0.0, 0.0), &[0.1, 0.2], &[0.3, 0.4], 0.04);
        assert_eq!(g, [0.0, 0.0]);
        assert_eq!(h, [[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(c, 0.0);
        // Single path at theta = pi/2, phi = 0, eta = 1, q = 0: kappa = 0.
        let lam = 0.04;
        let e = CVec::from_element(1, Complex::new(1.0, 0.0));
        let (g, h, _) = surrogate_derivatives(
            &e,
            Position2D::new(0.0, 0.0),
            &[std::f64::consts::FRAC_PI_2],
            &[0.0],
            lam,
        );
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        let want = -8.0 * std::f64::consts::PI.powi(2) / (lam * lam);
        assert!((h[0][0] - want).abs() < 1e-6 * want.abs());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (cfg, geom, _, _) = setup(26);
        let mut rng = ChaCha20Rng::seed_from_u64(260);
        let e = CVec::from_fn(cfg.l_tx, |_, _| {
            Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let elev = geom.tx_elevations.clone();
        let azim = geom.tx_azimuths.clone();
        let lam = cfg.wavelength;
        let f = |q: Position2D| tau_value(&e, q, &elev, &azim, lam);
        for _ in 0..20 {
            let q = random_point(&mut rng, &cfg);
            let (grad, hess, curv) = surrogate_derivatives(&e, q, &elev, &azim, lam);
            let step = 1e-6 * lam;
            let gx = (f(Position2D::new(q.x + step, q.y)) - f(Position2D::new(q.x - step, q.y)))
                / (2.0 * step);
            let gy = (f(Position2D::new(q.x, q.y + step)) - f(Position2D::new(q.x, q.y - step)))
                / (2.0 * step);
            let scale = grad[0].abs().max(grad[1].abs()).max(1.0);
            assert!((grad[0] - gx).abs() < 1e-5 * scale, "{} vs {gx}", grad[0]);
            assert!((grad[1] - gy).abs() < 1e-5 * scale, "{} vs {gy}", grad[1]);
            // Larger step for the second difference to keep roundoff down.
            let hstep = 1e-4 * lam;
            let hxx = (f(Position2D::new(q.x + hstep, q.y)) - 2.0 * f(q)
                + f(Position2D::new(q.x - hstep, q.y)))
                / (hstep * hstep);
            let hscale = hess[0][0].abs().max(1.0);
            assert!((hess[0][0] - hxx).abs() < 1e-3 * hscale);
            // Curvature dominates the Hessian spectrum.
            let tr = hess[0][0] + hess[1][1];
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let max_eig = tr / 2.0 + disc;
            assert!(curv >= max_eig - 1e-9 * curv.abs().max(1.0));
        }
    }

    #[test]
    fn curvature_dominates_hessian_at_many_points() {
        let (cfg, geom, _, _) = setup(27);
        let mut rng = ChaCha20Rng::seed_from_u64(270);
        let e = CVec::from_fn(cfg.l_tx, |_, _| {
            Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        for _ in 0..1000 {
            let q = random_point(&mut rng, &cfg);
            let (_, hess, curv) =
                surrogate_derivatives(&e, q, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
            // 2x2 eigencheck of curv I - H.
            let a = curv - hess[0][0];
            let d = curv - hess[1][1];
            let b = -hess[0][1];
            let tr = a + d;
            let det = a * d - b * b;
            assert!(tr >= -1e-9 && det >= -1e-6 * curv * curv);
        }
    }

    #[test]
    fn surrogate_majorizes_and_is_tangent() {
        let (cfg, geom, _, _) = setup(28);
        let mut rng = ChaCha20Rng::seed_from_u64(280);
        let e = CVec::from_fn(cfg.l_tx, |_, _| {
            Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let anchor = random_point(&mut rng, &cfg);
        let s = build_surrogate(&e, anchor, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
        let t_anchor = tau_value(&e, anchor, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
        assert!((s.majorized_value(anchor) - t_anchor).abs() < 1e-9);
        for _ in 0..500 {
            let probe = random_point(&mut rng, &cfg);
            let t = tau_value(&e, probe, &geom.tx_elevations, &geom.tx_azimuths, cfg.wavelength);
            assert!(s.majorized_value(probe) >= t - 1e-9);
        }
        // Flat surrogate for eta = 0.
        let s0 = build_surrogate(
            &CVec::zeros(cfg.l_tx),
            anchor,
            &geom.tx_elevations,
            &geom.tx_azimuths,
            cfg.wavelength,
        );
        assert_eq!(s0.curvature, 0.0);
        assert_eq!(s0.linear, [0.0, 0.0]);
    }

    #[test]
    fn half_space_axis_aligned_and_inner() {
        let d = 0.02;
        let hs = linearize_separation(Position2D::new(d, 0.0), Position2D::new(0.0, 0.0), d).unwrap();
        assert!((hs.normal[0] - 1.0).abs() < 1e-12 && hs.normal[1].abs() < 1e-12);
        assert!(hs.slack(Position2D::new(d, 0.0)).abs() < 1e-12);
        assert!(hs.slack(Position2D::new(d - 1e-6, 0.0)) < 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(290);
        let prev = Position2D::new(0.05, 0.03);
        let fixed = Position2D::new(0.02, 0.02);
        let hs = linearize_separation(prev, fixed, d).unwrap();
        for _ in 0..100 {
            let q = Position2D::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
            if hs.slack(q) >= 0.0 {
                assert!(q.distance(&fixed) >= d - 1e-12);
            }
        }
    }

    #[test]
    fn half_space_rejects_coincident_points() {
        let p = Position2D::new(0.01, 0.01);
        assert!(linearize_separation(p, p, 0.02).is_err());
    }
}
