//! Near-field spherical-wave channel synthesis over OFDM subcarriers.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::geometry::ArrayLayout;
use crate::rng::{complex_normal, uniform};
use crate::SPEED_OF_LIGHT;

/// OFDM carrier plan and LoS path-loss factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarrierConfig {
    /// Carrier frequency `f_c` in Hz.
    pub f_c: f64,
    /// Bandwidth `B` in Hz.
    pub bandwidth: f64,
    /// Number of subcarriers `K`.
    pub subcarriers: usize,
    /// Path-loss factor `Q` in dB per meter (signed).
    pub path_loss_q: f64,
}

impl Default for CarrierConfig {
    fn default() -> Self {
        Self { f_c: 28e9, bandwidth: 500e6, subcarriers: 64, path_loss_q: -0.00045 }
    }
}

impl CarrierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.f_c > self.bandwidth / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "carrier needs f_c > B/2 > 0, got f_c={} B={}",
                self.f_c, self.bandwidth
            )));
        }
        if self.subcarriers == 0 {
            return Err(Error::InvalidParameter("carrier needs at least one subcarrier".into()));
        }
        if !self.path_loss_q.is_finite() {
            return Err(Error::InvalidParameter("path-loss factor must be finite".into()));
        }
        Ok(())
    }

    /// Frequency of subcarrier `k` (1-based): `f_c - B/2 + (k-1) B / K`.
    pub fn subcarrier_freq(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.subcarriers {
            return Err(Error::IndexOutOfRange { index: k, len: self.subcarriers });
        }
        Ok(self.freq0(k - 1))
    }

    fn freq0(&self, k0: usize) -> f64 {
        self.f_c - self.bandwidth / 2.0 + k0 as f64 * self.bandwidth / self.subcarriers as f64
    }

    /// All subcarrier frequencies in order.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.subcarriers).map(|k0| self.freq0(k0)).collect()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }
}

/// User position in the array plane (`z = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UePosition {
    pub r: f64,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl UePosition {
    pub fn from_polar(r: f64, theta: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) || !theta.is_finite() {
            return Err(Error::InvalidParameter(format!("UE radius must be positive, got r={r}")));
        }
        Ok(Self { r, theta, x: r * theta.cos(), y: r * theta.sin() })
    }

    /// Polar form of a Cartesian point; fails at the origin.
    pub fn from_cartesian(x: f64, y: f64) -> Result<Self> {
        let r = x.hypot(y);
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::DegeneratePosition);
        }
        Ok(Self { r, theta: y.atan2(x), x, y })
    }
}

/// One NLoS scatterer with its per-subcarrier complex gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatterer {
    pub r: f64,
    pub phi: f64,
    pub gains: Vec<Complex64>,
}

/// Scatterer placement and gain statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    /// Cluster count is drawn uniformly from `clusters_min..=clusters_max`.
    pub clusters_min: u32,
    pub clusters_max: u32,
    pub scatterers_per_cluster: u32,
    pub r_min: f64,
    pub r_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    /// Variance of the NLoS gains; 1.0 reproduces `CN(0, 1)`.
    pub nlos_power: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            clusters_min: 1,
            clusters_max: 3,
            scatterers_per_cluster: 4,
            r_min: 0.1,
            r_max: 10.0,
            phi_min: -PI / 2.0,
            phi_max: 0.0,
            nlos_power: 1.0,
        }
    }
}

impl SceneConfig {
    /// Scene without scatterers.
    pub fn los_only() -> Self {
        Self { clusters_min: 0, clusters_max: 0, ..Self::default() }
    }

    pub fn is_los_only(&self) -> bool {
        self.clusters_max == 0 || self.scatterers_per_cluster == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters_min > self.clusters_max {
            return Err(Error::InvalidParameter("clusters_min exceeds clusters_max".into()));
        }
        if !(self.r_min > 0.0 && self.r_max >= self.r_min) {
            return Err(Error::InvalidParameter("scatterer radius range must satisfy 0 < min <= max".into()));
        }
        if !(self.phi_max >= self.phi_min) {
            return Err(Error::InvalidParameter("scatterer angle range is inverted".into()));
        }
        if !(self.nlos_power >= 0.0 && self.nlos_power.is_finite()) {
            return Err(Error::InvalidParameter("NLoS power must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-subcarrier LoS and NLoS channels for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `K x N`.
    pub h_los: CMatrix,
    pub h_nlos: CMatrix,
    /// `h_los + h_nlos`, entry by entry.
    pub h: CMatrix,
    pub ue: UePosition,
    pub clusters: Vec<Vec<Scatterer>>,
}

/// Spherical-wave distance from a source at `(r, phi)` to the element at `x_q`.
pub fn element_distance(r: f64, phi: f64, x_q: f64) -> Result<f64> {
    let arg = r * r + x_q * x_q - 2.0 * r * x_q * phi.cos();
    if arg < -1e-15 {
        return Err(Error::NegativeDistance(arg));
    }
    Ok(arg.max(0.0).sqrt())
}

fn distance_unchecked(r: f64, cos_phi: f64, x_q: f64) -> f64 {
    (r * r + x_q * x_q - 2.0 * r * x_q * cos_phi).max(0.0).sqrt()
}

/// Near-field response `exp(-j 2π f r_q / c)` of every element at `positions`.
pub fn steering_vector(positions: &[f64], r: f64, phi: f64, f: f64) -> Vec<Complex64> {
    let cos_phi = phi.cos();
    let wavenumber = 2.0 * PI * f / SPEED_OF_LIGHT;
    positions.iter().map(|&x| Complex64::from_polar(1.0, -wavenumber * distance_unchecked(r, cos_phi, x))).collect()
}

/// LoS amplitude `(1 / 4πR) · 10^{Q R / 10}`; identical on every subcarrier.
pub fn los_gain(r: f64, q: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("LoS distance must be positive, got {r}")));
    }
    Ok(1.0 / (4.0 * PI * r) * 10f64.powf(q * r / 10.0))
}

/// LoS channel matrix (`K x N`) of a source at `(r, phi)`.
pub fn los_channel(layout: &ArrayLayout, r: f64, phi: f64, carrier: &CarrierConfig) -> Result<CMatrix> {
    let gain = los_gain(r, carrier.path_loss_q)?;
    let n = layout.n_elements();
    let mut h = CMatrix::zeros(carrier.subcarriers, n);
    for (k, f) in carrier.frequencies().into_iter().enumerate() {
        let a = steering_vector(layout.positions(), r, phi, f);
        for (dst, ak) in h.row_mut(k).iter_mut().zip(a) {
            *dst = ak * gain;
        }
    }
    Ok(h)
}

/// Draws clustered scatterers with i.i.d. `CN(0, nlos_power)` gains per subcarrier.
pub fn sample_scatterers<R: Rng + ?Sized>(rng: &mut R, scene: &SceneConfig, subcarriers: usize) -> Vec<Vec<Scatterer>> {
    let n_clusters = if scene.clusters_max == scene.clusters_min {
        scene.clusters_min
    } else {
        rng.random_range(scene.clusters_min..=scene.clusters_max)
    };
    (0..n_clusters)
        .map(|_| {
            (0..scene.scatterers_per_cluster)
                .map(|_| {
                    let r = uniform(rng, scene.r_min, scene.r_max);
                    let phi = uniform(rng, scene.phi_min, scene.phi_max);
                    let gains = (0..subcarriers).map(|_| complex_normal(rng, scene.nlos_power)).collect();
                    Scatterer { r, phi, gains }
                })
                .collect()
        })
        .collect()
}

/// Assembles LoS, NLoS and total channels for every subcarrier.
pub fn synthesize_channel(
    layout: &ArrayLayout,
    ue: UePosition,
    clusters: Vec<Vec<Scatterer>>,
    carrier: &CarrierConfig,
) -> Result<ChannelRealization> {
    carrier.validate()?;
    let k_count = carrier.subcarriers;
    let n = layout.n_elements();
    for s in clusters.iter().flatten() {
        if s.gains.len() != k_count {
            return Err(Error::Dimension(format!(
                "scatterer carries {} gains for {k_count} subcarriers",
                s.gains.len()
            )));
        }
        if !(s.r > 0.0) {
            return Err(Error::InvalidParameter(format!("scatterer distance must be positive, got {}", s.r)));
        }
    }
    let h_los = los_channel(layout, ue.r, ue.theta, carrier)?;
    let mut h_nlos = CMatrix::zeros(k_count, n);
    let freqs = carrier.frequencies();
    for s in clusters.iter().flatten() {
        for (k, &f) in freqs.iter().enumerate() {
            let a = steering_vector(layout.positions(), s.r, s.phi, f);
            let g = s.gains[k];
            for (dst, ak) in h_nlos.row_mut(k).iter_mut().zip(a) {
                *dst += g * ak;
            }
        }
    }
    let h_data = h_los.data().iter().zip(h_nlos.data()).map(|(a, b)| a + b).collect();
    let h = CMatrix::from_vec(k_count, n, h_data)?;
    Ok(ChannelRealization { h_los, h_nlos, h, ue, clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_moa, build_na, half_wavelength};
    use crate::rng::rng_from_seed;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn subcarrier_frequencies() {
        let cfg = CarrierConfig::default();
        assert_eq!(cfg.subcarrier_freq(1).unwrap(), 28e9 - 250e6);
        assert_eq!(cfg.subcarrier_freq(64).unwrap(), 28e9 - 250e6 + 63.0 * 500e6 / 64.0);
        assert_eq!(cfg.subcarrier_freq(33).unwrap(), 28e9);
        assert!(matches!(cfg.subcarrier_freq(0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(cfg.subcarrier_freq(65), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn distance_special_cases() {
        let (r, x) = (5.0, 0.3);
        assert!((element_distance(r, PI / 2.0, x).unwrap() - (r * r + x * x).sqrt()).abs() < 1e-12);
        assert!((element_distance(r, 0.0, x).unwrap() - (r - x).abs()).abs() < 1e-12);
        assert!((element_distance(r, 0.0, r).unwrap()).abs() < 1e-7);
        assert!((element_distance(5.0, PI / 3.0, 0.3).unwrap() - 23.59f64.sqrt()).abs() < 1e-12);
        assert!((23.59f64.sqrt() - 4.8570).abs() < 1e-4);
    }

    #[test]
    fn los_gain_values() {
        assert!((los_gain(1.0, 0.0).unwrap() - 0.079_577_47).abs() < 1e-8);
        assert!((los_gain(1.0, -0.00045).unwrap() - 0.079_569_226_4).abs() < 1e-10);
        assert!((los_gain(10.0, -0.00045).unwrap() - 0.007_949_505_9).abs() < 1e-10);
        assert!(los_gain(0.0, 0.0).is_err());
    }

    #[test]
    fn single_element_at_origin() {
        let layout = build_moa(1, 1, 1, 0.01).unwrap();
        assert_eq!(layout.positions(), &[0.0]);
        let a = steering_vector(layout.positions(), 3.0, 0.4, 28e9);
        let expected = Complex64::from_polar(1.0, -2.0 * PI * 28e9 * 3.0 / SPEED_OF_LIGHT);
        assert!((a[0] - expected).norm() < 1e-9);
    }

    #[test]
    fn pure_los_full_cycle_phase() {
        // f = c puts one full cycle in one meter, so h = 1/(4π).
        let layout = build_moa(1, 1, 1, 0.01).unwrap();
        let carrier = CarrierConfig { f_c: SPEED_OF_LIGHT + 0.5, bandwidth: 1.0, subcarriers: 1, path_loss_q: 0.0 };
        // f_1 = f_c - B/2 = c exactly
        assert_eq!(carrier.subcarrier_freq(1).unwrap(), SPEED_OF_LIGHT);
        let ue = UePosition::from_polar(1.0, 0.3).unwrap();
        let ch = synthesize_channel(&layout, ue, vec![], &carrier).unwrap();
        let h = ch.h.get(0, 0);
        assert!((h.re - 1.0 / (4.0 * PI)).abs() < 1e-12 && h.im.abs() < 1e-12, "{h}");
    }

    #[test]
    fn far_field_matches_plane_wave() {
        let f = 28e9;
        let layout = build_na(4, 124, half_wavelength(f)).unwrap();
        let r = 1e7;
        for &phi in &[-1.2, -0.6, -0.1, 0.7] {
            let a = steering_vector(layout.positions(), r, phi, f);
            let k = 2.0 * PI * f / SPEED_OF_LIGHT;
            for (&x, aq) in layout.positions().iter().zip(&a) {
                let plane = Complex64::from_polar(1.0, -k * (r - x * phi.cos()));
                let err = (aq * plane.conj()).arg().abs();
                assert!(err < 1e-3, "phase error {err} at x={x}");
            }
        }
    }

    #[test]
    fn scatterer_sampling() {
        let mut rng = rng_from_seed(3);
        let none = sample_scatterers(&mut rng, &SceneConfig::los_only(), 8);
        assert!(none.is_empty());
        let scene = SceneConfig { clusters_min: 2, clusters_max: 2, ..SceneConfig::default() };
        let two = sample_scatterers(&mut rng, &scene, 8);
        assert_eq!(two.iter().map(Vec::len).sum::<usize>(), 8);
        for s in two.iter().flatten() {
            assert!(s.r >= 0.1 && s.r <= 10.0);
            assert!(s.phi >= -PI / 2.0 && s.phi <= 0.0);
            assert_eq!(s.gains.len(), 8);
        }
        let a = sample_scatterers(&mut rng_from_seed(9), &SceneConfig::default(), 4);
        let b = sample_scatterers(&mut rng_from_seed(9), &SceneConfig::default(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn nlos_gain_variance_is_unity() {
        let mut rng = rng_from_seed(11);
        let scene =
            SceneConfig { clusters_min: 1, clusters_max: 1, scatterers_per_cluster: 1, ..SceneConfig::default() };
        let draws = 100_000;
        let subcarriers = 4;
        let mut power = vec![0.0; subcarriers];
        let mut mean = vec![Complex64::new(0.0, 0.0); subcarriers];
        for _ in 0..draws {
            let c = sample_scatterers(&mut rng, &scene, subcarriers);
            for (k, g) in c[0][0].gains.iter().enumerate() {
                power[k] += g.norm_sqr();
                mean[k] += g;
            }
        }
        for k in 0..subcarriers {
            let m = mean[k] / draws as f64;
            let var = power[k] / draws as f64 - m.norm_sqr();
            assert!((var - 1.0).abs() < 0.02, "subcarrier {k}: variance {var}");
        }
    }

    #[test]
    fn channel_composition() {
        let layout = build_na(3, 5, 0.005).unwrap();
        let carrier = CarrierConfig { subcarriers: 4, ..CarrierConfig::default() };
        let ue = UePosition::from_polar(4.0, -0.5).unwrap();
        let pure = synthesize_channel(&layout, ue, vec![], &carrier).unwrap();
        assert_eq!(pure.h, pure.h_los);
        let silent = vec![vec![Scatterer { r: 2.0, phi: -0.2, gains: vec![Complex64::new(0.0, 0.0); 4] }]];
        let ch = synthesize_channel(&layout, ue, silent, &carrier).unwrap();
        assert_eq!(ch.h, ch.h_los);
        let clusters = sample_scatterers(&mut rng_from_seed(5), &SceneConfig::default(), 4);
        let ch = synthesize_channel(&layout, ue, clusters, &carrier).unwrap();
        for i in 0..ch.h.data().len() {
            assert_eq!(ch.h.data()[i], ch.h_los.data()[i] + ch.h_nlos.data()[i]);
        }
        let bad = vec![vec![Scatterer { r: 2.0, phi: 0.0, gains: vec![Complex64::new(1.0, 0.0); 3] }]];
        assert!(synthesize_channel(&layout, ue, bad, &carrier).is_err());
    }

    proptest! {
        #[test]
        fn steering_is_unit_modulus(r in 0.1f64..100.0, phi in -PI..PI, f in 1e9f64..1e11) {
            let layout = build_na(4, 124, 0.005).unwrap();
            for a in steering_vector(layout.positions(), r, phi, f) {
                prop_assert!((a.norm() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn los_gain_decreases_with_distance(a in 0.01f64..50.0, b in 0.01f64..50.0, q in -0.01f64..=0.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(los_gain(near, q).unwrap() > los_gain(far, q).unwrap());
        }

        #[test]
        fn polar_and_cartesian_agree(r in 0.1f64..10.0, theta in -PI / 2.0..0.0) {
            let ue = UePosition::from_polar(r, theta).unwrap();
            prop_assert!((ue.x - r * theta.cos()).abs() <= 1e-12);
            prop_assert!((ue.y - r * theta.sin()).abs() <= 1e-12);
            let back = UePosition::from_cartesian(ue.x, ue.y).unwrap();
            prop_assert!((back.r - r).abs() < 1e-12 && (back.theta - theta).abs() < 1e-12);
        }
    }
}
