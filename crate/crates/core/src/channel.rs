//! Field-response channel model.
//!
//! The MIMO channel is `H = F^H * Sigma * G`, where the columns of `G` and
//! `F` are per-element field response vectors determined by the element
//! positions and the quasi-static multipath geometry.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtfaError, Result};
use crate::numerics::{is_finite, CMat, CVec};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Tx,
    Rx,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position2D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// All physical and algorithmic scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    pub l_tx: usize,
    pub l_rx: usize,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// Side length A of the square movement region.
    pub region_side: f64,
    /// Minimum inter-element distance D.
    pub min_separation: f64,
    /// Transmit power budget P.
    pub power: f64,
    /// Receiver noise variance sigma^2.
    pub noise_var: f64,
    pub v_max: f64,
    pub a_max: f64,
    /// Slot duration delta_tau in seconds.
    pub slot_len: f64,
    /// N: slots are sampled at indices 0..=N (N+1 samples).
    pub n_slots: usize,
    pub rician_k: f64,
    pub coherence_time: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let wavelength = SPEED_OF_LIGHT / 7.5e9;
        Self {
            n_tx: 2,
            n_rx: 2,
            l_tx: 5,
            l_rx: 5,
            wavelength,
            region_side: 3.0 * wavelength,
            min_separation: 0.5 * wavelength,
            // SNR of 10 dB with sigma^2 = 1.
            power: 10.0,
            noise_var: 1.0,
            v_max: 0.016,
            a_max: 0.6,
            slot_len: 0.01,
            n_slots: 50,
            rician_k: 0.0,
            coherence_time: 10.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wavelength", self.wavelength),
            ("region_side", self.region_side),
            ("min_separation", self.min_separation),
            ("power", self.power),
            ("noise_var", self.noise_var),
            ("slot_len", self.slot_len),
            ("coherence_time", self.coherence_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CtfaError::Config {
                    key: name.into(),
                    msg: format!("must be strictly positive, got {v}"),
                });
            }
        }
        for (name, v) in [("v_max", self.v_max), ("a_max", self.a_max)] {
            if v < 0.0 || !v.is_finite() {
                return Err(CtfaError::Config {
                    key: name.into(),
                    msg: format!("must be nonnegative, got {v}"),
                });
            }
        }
        if self.rician_k < 0.0 {
            return Err(CtfaError::Config {
                key: "rician_k".into(),
                msg: "must be nonnegative".into(),
            });
        }
        for (name, v) in [
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("l_tx", self.l_tx),
            ("l_rx", self.l_rx),
        ] {
            if v == 0 {
                return Err(CtfaError::Config {
                    key: name.into(),
                    msg: "must be at least 1".into(),
                });
            }
        }
        if self.l_tx.min(self.l_rx) < self.n_tx.max(self.n_rx) {
            return Err(CtfaError::Config {
                key: "l_tx/l_rx".into(),
                msg: format!(
                    "rich scattering requires min(L_t, L_r) >= max(N_t, N_r); got min {} < max {}",
                    self.l_tx.min(self.l_rx),
                    self.n_tx.max(self.n_rx)
                ),
            });
        }
        let per_row = (self.n_tx.max(self.n_rx) as f64).sqrt().ceil();
        if self.region_side < self.min_separation * per_row {
            return Err(CtfaError::Config {
                key: "region_side".into(),
                msg: "region too small for the initial layout at min separation".into(),
            });
        }
        Ok(())
    }

    /// Number of slot samples (N + 1).
    pub fn n_samples(&self) -> usize {
        self.n_slots + 1
    }
}

/// One quasi-static multipath realization: angle sets plus the path response
/// matrix Sigma linking the two region origins.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGeometry {
    pub tx_elevations: Vec<f64>,
    pub tx_azimuths: Vec<f64>,
    pub rx_elevations: Vec<f64>,
    pub rx_azimuths: Vec<f64>,
    /// Sigma, L_r x L_t.
    pub path_response: CMat,
    pub seed: u64,
}

impl ChannelGeometry {
    pub fn angles(&self, side: Side) -> (&[f64], &[f64]) {
        match side {
            Side::Tx => (&self.tx_elevations, &self.tx_azimuths),
            Side::Rx => (&self.rx_elevations, &self.rx_azimuths),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GeometryJson {
    seed: u64,
    tx_elevations: Vec<f64>,
    tx_azimuths: Vec<f64>,
    rx_elevations: Vec<f64>,
    rx_azimuths: Vec<f64>,
    sigma_rows: usize,
    sigma_cols: usize,
    /// Row-major (re, im) pairs.
    sigma: Vec<(f64, f64)>,
}

impl ChannelGeometry {
    pub fn to_json(&self) -> String {
        let s = &self.path_response;
        let mut sigma = Vec::with_capacity(s.nrows() * s.ncols());
        for r in 0..s.nrows() {
            for c in 0..s.ncols() {
                sigma.push((s[(r, c)].re, s[(r, c)].im));
            }
        }
        serde_json::to_string_pretty(&GeometryJson {
            seed: self.seed,
            tx_elevations: self.tx_elevations.clone(),
            tx_azimuths: self.tx_azimuths.clone(),
            rx_elevations: self.rx_elevations.clone(),
            rx_azimuths: self.rx_azimuths.clone(),
            sigma_rows: s.nrows(),
            sigma_cols: s.ncols(),
            sigma,
        })
        .expect("geometry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: GeometryJson = serde_json::from_str(text).map_err(|e| CtfaError::Config {
            key: "geometry".into(),
            msg: e.to_string(),
        })?;
        if g.sigma.len() != g.sigma_rows * g.sigma_cols {
            return Err(CtfaError::Config {
                key: "geometry.sigma".into(),
                msg: "entry count does not match declared shape".into(),
            });
        }
        let path_response = CMat::from_fn(g.sigma_rows, g.sigma_cols, |r, c| {
            let (re, im) = g.sigma[r * g.sigma_cols + c];
            Complex64::new(re, im)
        });
        Ok(Self {
            tx_elevations: g.tx_elevations,
            tx_azimuths: g.tx_azimuths,
            rx_elevations: g.rx_elevations,
            rx_azimuths: g.rx_azimuths,
            path_response,
            seed: g.seed,
        })
    }
}

/// Position-dependent propagation offset `x sin(theta) cos(phi) + y cos(theta)`.
pub fn propagation_offset(pos: Position2D, elevation: f64, azimuth: f64) -> f64 {
    pos.x * elevation.sin() * azimuth.cos() + pos.y * elevation.cos()
}

/// Per-path phase factors `exp(j 2 pi rho_p / lambda)` for one element.
pub fn field_response_vector(
    pos: Position2D,
    elevations: &[f64],
    azimuths: &[f64],
    wavelength: f64,
) -> CVec {
    debug_assert_eq!(elevations.len(), azimuths.len());
    CVec::from_iterator(
        elevations.len(),
        elevations.iter().zip(azimuths).map(|(&th, &ph)| {
            let phase = 2.0 * PI * propagation_offset(pos, th, ph) / wavelength;
            Complex64::from_polar(1.0, phase)
        }),
    )
}

/// Field response matrix for one side: column k is the response of element k.
pub fn field_response_matrix(
    positions: &[Position2D],
    side: Side,
    geometry: &ChannelGeometry,
    wavelength: f64,
) -> CMat {
    let (elev, azim) = geometry.angles(side);
    let cols: Vec<CVec> = positions
        .iter()
        .map(|&p| field_response_vector(p, elev, azim, wavelength))
        .collect();
    CMat::from_columns(&cols)
}

/// `H = F^H Sigma G`, shape N_r x N_t.
pub fn assemble_channel(
    tx_positions: &[Position2D],
    rx_positions: &[Position2D],
    geometry: &ChannelGeometry,
    wavelength: f64,
) -> Result<CMat> {
    let sigma = &geometry.path_response;
    if sigma.nrows() != geometry.rx_elevations.len() || sigma.ncols() != geometry.tx_elevations.len()
    {
        return Err(CtfaError::DimensionMismatch(format!(
            "Sigma is {}x{} but geometry has L_r={} L_t={}",
            sigma.nrows(),
            sigma.ncols(),
            geometry.rx_elevations.len(),
            geometry.tx_elevations.len()
        )));
    }
    let g = field_response_matrix(tx_positions, Side::Tx, geometry, wavelength);
    let f = field_response_matrix(rx_positions, Side::Rx, geometry, wavelength);
    let h = f.adjoint() * sigma * g;
    if !is_finite(&h) {
        return Err(CtfaError::Contract("assemble_channel: non-finite result".into()));
    }
    Ok(h)
}

// Stream tags for the sub-streams of one geometry draw. One sub-stream per
// random quantity keeps sampling reproducible independent of draw order.
const STREAM_TX_ELEV: u64 = 1;
const STREAM_TX_AZIM: u64 = 2;
const STREAM_RX_ELEV: u64 = 3;
const STREAM_RX_AZIM: u64 = 4;
const STREAM_SIGMA: u64 = 5;

fn stream(seed: u64, tag: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn uniform_angles(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.0..=PI)).collect()
}

/// Circularly symmetric complex Gaussian with variance `var`.
fn sample_cn(rng: &mut ChaCha20Rng, var: f64) -> Complex64 {
    // Box-Muller; each of re/im has variance var/2.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt() * (var / 2.0).sqrt();
    Complex64::new(r * (2.0 * PI * u2).cos(), r * (2.0 * PI * u2).sin())
}

/// Draw a diagonal-Sigma geometry: angles i.i.d. uniform on [0, pi], path
/// gains Rician-split complex Gaussians. Deterministic given the seed.
pub fn sample_geometry(config: &ScenarioConfig, seed: u64) -> Result<ChannelGeometry> {
    if config.l_tx != config.l_rx {
        return Err(CtfaError::UnsupportedModel(
            "diagonal Sigma sampling requires l_tx == l_rx".into(),
        ));
    }
    let l = config.l_tx;
    let tx_elevations = uniform_angles(&mut stream(seed, STREAM_TX_ELEV), l);
    let tx_azimuths = uniform_angles(&mut stream(seed, STREAM_TX_AZIM), l);
    let rx_elevations = uniform_angles(&mut stream(seed, STREAM_RX_ELEV), l);
    let rx_azimuths = uniform_angles(&mut stream(seed, STREAM_RX_AZIM), l);

    let k = config.rician_k;
    let mut rng = stream(seed, STREAM_SIGMA);
    let mut sigma = CMat::zeros(l, l);
    for i in 0..l {
        let var = if k == 0.0 {
            1.0 / l as f64
        } else if i == 0 {
            k / (k + 1.0)
        } else {
            1.0 / ((k + 1.0) * (l as f64 - 1.0))
        };
        sigma[(i, i)] = sample_cn(&mut rng, var);
    }
    Ok(ChannelGeometry {
        tx_elevations,
        tx_azimuths,
        rx_elevations,
        rx_azimuths,
        path_response: sigma,
        seed,
    })
}
