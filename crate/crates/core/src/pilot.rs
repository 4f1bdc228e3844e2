//! Random analog combiners and compressed pilot observations.
//!
//! With unit pilots, slot `p` on subcarrier `k` observes
//! `y[p,k] = W[p] (h[k] + n̄[p,k])` where `n̄ ~ CN(0, σ² I_N)`. Stacking the
//! `P` slots gives `Y[k] = W̄ h[k] + N[k]`, a `P·N_RF`-dimensional measurement
//! of the `N`-dimensional channel.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::cmatrix::{dot, CMatrix};
use crate::error::{Error, Result};
use crate::rng::complex_normal;

/// `P` analog combiners of size `N_RF x N`, stored stacked in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerSet {
    slots: usize,
    n_rf: usize,
    stacked: CMatrix,
}

impl CombinerSet {
    pub fn from_stacked(slots: usize, n_rf: usize, stacked: CMatrix) -> Result<Self> {
        if slots == 0 || n_rf == 0 || stacked.rows() != slots * n_rf || stacked.cols() == 0 {
            return Err(Error::Dimension(format!(
                "stacked combiner is {}x{}, expected {}x N",
                stacked.rows(),
                stacked.cols(),
                slots * n_rf
            )));
        }
        Ok(Self { slots, n_rf, stacked })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn n_rf(&self) -> usize {
        self.n_rf
    }

    pub fn n_antennas(&self) -> usize {
        self.stacked.cols()
    }

    /// Rows of the stacked matrix, `P · N_RF`.
    pub fn measurements(&self) -> usize {
        self.stacked.rows()
    }

    /// `W̄`, shape `(P·N_RF) x N`.
    pub fn stacked(&self) -> &CMatrix {
        &self.stacked
    }

    /// Rows of `W[p]` (0-based slot index).
    pub fn slot_rows(&self, p: usize) -> impl Iterator<Item = &[Complex64]> {
        (p * self.n_rf..(p + 1) * self.n_rf).map(move |r| self.stacked.row(r))
    }
}

/// Draws unit-modulus combiners `(1/√N_RF) · exp(j 2π u)`, `u ~ U(0, 1)`.
pub fn draw_combiner<R: Rng + ?Sized>(rng: &mut R, slots: usize, n_rf: usize, n: usize) -> Result<CombinerSet> {
    if slots == 0 || n_rf == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "combiner dimensions must be positive, got P={slots} N_RF={n_rf} N={n}"
        )));
    }
    let amp = 1.0 / (n_rf as f64).sqrt();
    let data = (0..slots * n_rf * n)
        .map(|_| {
            let u: f64 = rng.random();
            Complex64::from_polar(amp, 2.0 * PI * u)
        })
        .collect();
    CombinerSet::from_stacked(slots, n_rf, CMatrix::from_vec(slots * n_rf, n, data)?)
}

/// Received pilots, one row per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    /// `K x (P·N_RF)`.
    pub y: CMatrix,
    pub sigma2: f64,
    pub snr_db: Option<f64>,
}

/// Noise variance giving a post-combining SNR of `snr_db`:
/// `σ² = mean_k ‖W̄ h[k]‖² / (‖W̄‖_F² · 10^{snr/10})`.
///
/// `‖W̄‖_F² σ²` is the expected energy of the stacked combined noise `N[k]`.
pub fn snr_to_sigma2(snr_db: f64, h: &CMatrix, combiner: &CombinerSet) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("SNR must be finite, got {snr_db}")));
    }
    let signal = mean_combined_energy(h, combiner)?;
    Ok(signal / (combiner.stacked().norm_sqr() * 10f64.powf(snr_db / 10.0)))
}

fn mean_combined_energy(h: &CMatrix, combiner: &CombinerSet) -> Result<f64> {
    check_dims(h, combiner)?;
    let w = combiner.stacked();
    let mut total = 0.0;
    for k in 0..h.rows() {
        for r in 0..w.rows() {
            total += dot(w.row(r), h.row(k)).norm_sqr();
        }
    }
    Ok(total / h.rows() as f64)
}

fn check_dims(h: &CMatrix, combiner: &CombinerSet) -> Result<()> {
    if h.cols() != combiner.n_antennas() {
        return Err(Error::Dimension(format!(
            "channel has {} antennas, combiner expects {}",
            h.cols(),
            combiner.n_antennas()
        )));
    }
    Ok(())
}

/// Observes channel `h` (`K x N`) through every slot with colored noise `W[p] n̄`.
///
/// Noise is drawn subcarrier by subcarrier, slot by slot, element by element.
/// With `sigma2 == 0` no draws are consumed.
pub fn observe<R: Rng + ?Sized>(
    combiner: &CombinerSet,
    h: &CMatrix,
    sigma2: f64,
    rng: &mut R,
) -> Result<PilotObservation> {
    check_dims(h, combiner)?;
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let m = combiner.measurements();
    let n = combiner.n_antennas();
    let mut y = CMatrix::zeros(h.rows(), m);
    let mut noisy = Vec::with_capacity(n);
    for k in 0..h.rows() {
        for p in 0..combiner.slots() {
            noisy.clear();
            if sigma2 > 0.0 {
                noisy.extend(h.row(k).iter().map(|&hq| hq + complex_normal(rng, sigma2)));
            } else {
                noisy.extend_from_slice(h.row(k));
            }
            for (i, row) in combiner.slot_rows(p).enumerate() {
                y.row_mut(k)[p * combiner.n_rf() + i] = dot(row, &noisy);
            }
        }
    }
    Ok(PilotObservation { y, sigma2, snr_db: None })
}

/// [`observe`] at the noise level [`snr_to_sigma2`] assigns to `snr_db`.
pub fn observe_at_snr<R: Rng + ?Sized>(
    combiner: &CombinerSet,
    h: &CMatrix,
    snr_db: f64,
    rng: &mut R,
) -> Result<PilotObservation> {
    let sigma2 = snr_to_sigma2(snr_db, h, combiner)?;
    let mut obs = observe(combiner, h, sigma2, rng)?;
    obs.snr_db = Some(snr_db);
    Ok(obs)
}
