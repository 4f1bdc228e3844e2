//! Classical estimators: minimum-norm least squares and matched-filter grid search.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::{Complex32, Complex64};
#[allow(unused_imports)]
use num_traits::Float;

use crate::channel::{los_channel, steering_vector, CarrierConfig, UePosition};
use crate::cmatrix::{dot, CMatrix};
use crate::error::{Error, Result};
use crate::geometry::ArrayLayout;
use crate::pilot::CombinerSet;

/// Singular values below this make `W̄` unusable for least squares.
pub const RANK_TOL: f64 = 1e-10;

/// Minimum-norm solution `ĥ[k] = W̄ᴴ (W̄ W̄ᴴ)⁻¹ Y[k]`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// `N x M` pseudo-inverse.
    pinv: CMatrix,
}

impl LeastSquares {
    pub fn new(combiner: &CombinerSet) -> Result<Self> {
        let w = combiner.stacked().to_nalgebra();
        let (m, n) = w.shape();
        if m > n {
            return Err(Error::RankDeficient(0.0));
        }
        let sigma_min = w.clone().svd(false, false).singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        if !(sigma_min >= RANK_TOL) {
            return Err(Error::RankDeficient(sigma_min));
        }
        let wh = w.adjoint();
        let gram = &w * &wh;
        let inv = gram.cholesky().ok_or(Error::RankDeficient(sigma_min))?.inverse();
        let pinv: DMatrix<Complex64> = wh * inv;
        let data = (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| pinv[(r, c)]).collect();
        Ok(Self { pinv: CMatrix::from_vec(n, m, data)? })
    }

    pub fn pinv(&self) -> &CMatrix {
        &self.pinv
    }

    /// Row-wise estimate of a `K x M` observation, returning `K x N`.
    pub fn estimate(&self, y: &CMatrix) -> Result<CMatrix> {
        if y.cols() != self.pinv.cols() {
            return Err(Error::Dimension(format!(
                "observation has {} measurements, combiner has {}",
                y.cols(),
                self.pinv.cols()
            )));
        }
        let n = self.pinv.rows();
        let mut out = CMatrix::zeros(y.rows(), n);
        for k in 0..y.rows() {
            let row = self.pinv.matvec(y.row(k))?;
            out.row_mut(k).copy_from_slice(&row);
        }
        Ok(out)
    }
}

/// Polar search lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
}

impl Default for Grid {
    /// 60 log-spaced radii on `[0.1, 10]` m and 90 angles on `[-90°, 0°]`.
    fn default() -> Self {
        Self::log_polar(0.1, 10.0, 60, -PI / 2.0, 0.0, 90)
    }
}

impl Grid {
    pub fn log_polar(r_min: f64, r_max: f64, n_r: usize, theta_min: f64, theta_max: f64, n_theta: usize) -> Self {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return alloc::vec![a];
            }
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        };
        let radii = lin(r_min.ln(), r_max.ln(), n_r).into_iter().map(f64::exp).collect();
        Self { radii, angles: lin(theta_min, theta_max, n_theta) }
    }

    pub fn len(&self) -> usize {
        self.radii.len() * self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `g`, enumerated radius-major.
    pub fn point(&self, g: usize) -> (f64, f64) {
        (self.radii[g / self.angles.len()], self.angles[g % self.angles.len()])
    }
}

/// Exhaustive matched filter over a [`Grid`] of LoS hypotheses.
///
/// Scores `Σ_k |⟨W̄ a(r,θ,f_k), Y[k]⟩| / ‖W̄ a(r,θ,f_k)‖` with unit-normalized
/// atoms precomputed in 32-bit.
#[derive(Debug, Clone)]
pub struct GridSearch {
    grid: Grid,
    k: usize,
    m: usize,
    atoms: Vec<Complex32>,
}

impl GridSearch {
    pub fn new(grid: Grid, layout: &ArrayLayout, carrier: &CarrierConfig, combiner: &CombinerSet) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty);
        }
        if combiner.n_antennas() != layout.n_elements() {
            return Err(Error::Dimension(format!(
                "combiner expects {} antennas, layout has {}",
                combiner.n_antennas(),
                layout.n_elements()
            )));
        }
        let freqs = carrier.frequencies();
        let (k, m) = (freqs.len(), combiner.measurements());
        let w = combiner.stacked();
        let mut atoms = Vec::with_capacity(grid.len() * k * m);
        for g in 0..grid.len() {
            let (r, theta) = grid.point(g);
            for &f in &freqs {
                let a = steering_vector(layout.positions(), r, theta, f);
                let u = w.matvec(&a)?;
                let norm = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                atoms.extend(u.iter().map(|z| Complex32::new((z.re * inv) as f32, (z.im * inv) as f32)));
            }
        }
        Ok(Self { grid, k, m, atoms })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Objective value of grid point `g` for observation `y` (`K x M`).
    pub fn score(&self, g: usize, y: &[Complex32]) -> f64 {
        let block = &self.atoms[g * self.k * self.m..(g + 1) * self.k * self.m];
        let mut total = 0.0f64;
        for (atom, obs) in block.chunks(self.m).zip(y.chunks(self.m)) {
            let (mut re, mut im) = (0.0f32, 0.0f32);
            for (a, b) in atom.iter().zip(obs) {
                re += a.re * b.re + a.im * b.im;
                im += a.re * b.im - a.im * b.re;
            }
            total += f64::from(re).hypot(f64::from(im));
        }
        total
    }

    /// Best grid point; ties go to the smaller radius, then the smaller angle.
    pub fn locate(&self, y: &[Complex32]) -> Result<(f64, f64)> {
        if y.len() != self.k * self.m {
            return Err(Error::Dimension(format!("observation has {} entries, expected {}", y.len(), self.k * self.m)));
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for g in 0..self.grid.len() {
            let s = self.score(g, y);
            if s > best.1 {
                best = (g, s);
            }
        }
        Ok(self.grid.point(best.0))
    }

    pub fn locate_position(&self, y: &[Complex32]) -> Result<UePosition> {
        let (r, theta) = self.locate(y)?;
        UePosition::from_polar(r, theta)
    }
}

/// LoS channel implied by a located position.
pub fn grid_channel(pos: &UePosition, layout: &ArrayLayout, carrier: &CarrierConfig) -> Result<CMatrix> {
    los_channel(layout, pos.r, pos.theta, carrier)
}

/// Stacked measurement of a channel, `Y[k] = W̄ h[k]`.
pub fn combine(combiner: &CombinerSet, h: &CMatrix) -> Result<CMatrix> {
    let w = combiner.stacked();
    if h.cols() != w.cols() {
        return Err(Error::Dimension(format!("channel has {} antennas, combiner {}", h.cols(), w.cols())));
    }
    let mut y = CMatrix::zeros(h.rows(), w.rows());
    for k in 0..h.rows() {
        for r in 0..w.rows() {
            y.row_mut(k)[r] = dot(w.row(r), h.row(k));
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{half_wavelength, ArrayKind};
    use crate::pilot::{draw_combiner, observe_at_snr};
    use crate::rng::{complex_normal, rng_from_seed};
    use alloc::vec;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = rng_from_seed(seed);
        CMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap()
    }

    /// Gaussian elimination on the normal equations `(W̄W̄ᴴ) z = y`, then `ĥ = W̄ᴴ z`.
    #[allow(clippy::needless_range_loop)]
    fn brute_force(w: &CMatrix, y: &[Complex64]) -> Vec<Complex64> {
        let m = w.rows();
        let mut a: Vec<Vec<Complex64>> = (0..m)
            .map(|i| {
                let mut row: Vec<Complex64> =
                    (0..m).map(|j| w.row(i).iter().zip(w.row(j)).map(|(p, q)| p * q.conj()).sum()).collect();
                row.push(y[i]);
                row
            })
            .collect();
        for col in 0..m {
            let piv = (col..m).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
            a.swap(col, piv);
            for i in 0..m {
                if i != col {
                    let f = a[i][col] / a[col][col];
                    for j in col..=m {
                        let v = a[col][j];
                        a[i][j] -= f * v;
                    }
                }
            }
        }
        let z: Vec<Complex64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
        (0..w.cols()).map(|c| (0..m).map(|r| w.get(r, c).conj() * z[r]).sum()).collect()
    }

    fn combiner_from(w: CMatrix) -> CombinerSet {
        let rows = w.rows();
        CombinerSet::from_stacked(rows, 1, w).unwrap()
    }

    #[test]
    fn determined_system_recovers_exactly() {
        let w = rand_matrix(6, 6, 1);
        let ls = LeastSquares::new(&combiner_from(w.clone())).unwrap();
        let h = rand_matrix(3, 6, 2);
        let est = ls.estimate(&combine(&combiner_from(w), &h).unwrap()).unwrap();
        let err: f64 = est.data().iter().zip(h.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(err / h.norm_sqr().sqrt() < 1e-8);
    }

    #[test]
    fn matches_normal_equation_solver() {
        for seed in 0..10 {
            let (m, n) = (3 + seed as usize % 4, 9);
            let w = rand_matrix(m, n, 10 + seed);
            let y = rand_matrix(1, m, 20 + seed);
            let ls = LeastSquares::new(&combiner_from(w.clone())).unwrap();
            let est = ls.estimate(&y).unwrap();
            let oracle = brute_force(&w, y.row(0));
            let scale = oracle.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for (a, b) in est.row(0).iter().zip(&oracle) {
                assert!((a - b).norm() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn underdetermined_residual_vanishes_but_null_space_is_lost() {
        let mut rng = rng_from_seed(3);
        let comb = draw_combiner(&mut rng, 16, 4, 128).unwrap();
        let ls = LeastSquares::new(&comb).unwrap();
        let h = rand_matrix(2, 128, 4);
        let y = combine(&comb, &h).unwrap();
        let est = ls.estimate(&y).unwrap();
        let y2 = combine(&comb, &est).unwrap();
        let resid: f64 = y2.data().iter().zip(y.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(resid.sqrt() < 1e-9 * y.norm_sqr().sqrt());
        // The error equals the null-space component of h, so NMSE is that energy fraction.
        let err: f64 = est.data().iter().zip(h.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let nmse = err / h.norm_sqr();
        let w = comb.stacked().to_nalgebra();
        let proj = &w.adjoint() * (&w * w.adjoint()).try_inverse().unwrap() * &w;
        let hn = h.to_nalgebra().transpose();
        let null = &hn - &proj * &hn;
        let null_frac = null.norm_squared() / hn.norm_squared();
        assert!((nmse - null_frac).abs() < 1e-9);
        assert!(nmse > 0.3 && nmse < 0.7);
    }

    #[test]
    fn linear_in_observation() {
        let w = rand_matrix(4, 7, 5);
        let ls = LeastSquares::new(&combiner_from(w)).unwrap();
        let y = rand_matrix(2, 4, 6);
        let alpha = Complex64::new(-1.5, 0.25);
        let ya = CMatrix::from_vec(2, 4, y.data().iter().map(|z| z * alpha).collect()).unwrap();
        let (a, b) = (ls.estimate(&y).unwrap(), ls.estimate(&ya).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p * alpha - q).norm() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let mut w = rand_matrix(3, 5, 7);
        let first = w.row(0).to_vec();
        w.row_mut(1).copy_from_slice(&first);
        assert!(matches!(LeastSquares::new(&combiner_from(w)), Err(Error::RankDeficient(_))));
        assert!(LeastSquares::new(&combiner_from(rand_matrix(5, 3, 8))).is_err());
    }

    fn na_setup() -> (ArrayLayout, CarrierConfig, CombinerSet) {
        let carrier = CarrierConfig { subcarriers: 8, ..CarrierConfig::default() };
        let layout = ArrayKind::Na { inner: 4, outer: 124 }.build(half_wavelength(carrier.f_c)).unwrap();
        let comb = draw_combiner(&mut rng_from_seed(9), 16, 4, 128).unwrap();
        (layout, carrier, comb)
    }

    fn obs32(y: &CMatrix) -> Vec<Complex32> {
        y.data().iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
    }

    #[test]
    fn on_grid_noiseless_los_recovered_exactly() {
        let (layout, carrier, comb) = na_setup();
        let grid = Grid::log_polar(0.1, 10.0, 12, -PI / 2.0, 0.0, 15);
        let search = GridSearch::new(grid.clone(), &layout, &carrier, &comb).unwrap();
        for g in [0, 7, 40, 111, 179] {
            let (r, theta) = grid.point(g);
            let y = combine(&comb, &los_channel(&layout, r, theta, &carrier).unwrap()).unwrap();
            let y = obs32(&y);
            assert_eq!(search.locate(&y).unwrap(), (r, theta));
            // Brute force over the grid agrees with the selected point.
            let best = (0..grid.len()).map(|h| search.score(h, &y)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(search.score(g, &y), best);
        }
    }

    #[test]
    fn objective_matches_independent_scorer() {
        let (layout, carrier, comb) = na_setup();
        let grid = Grid::log_polar(0.5, 5.0, 3, -1.2, -0.2, 4);
        let search = GridSearch::new(grid.clone(), &layout, &carrier, &comb).unwrap();
        let y = rand_matrix(8, 64, 11);
        let y32 = obs32(&y);
        let y64: Vec<Complex64> = y32.iter().map(|z| Complex64::new(z.re.into(), z.im.into())).collect();
        for g in 0..grid.len() {
            let (r, theta) = grid.point(g);
            let mut expected = 0.0;
            for (k, f) in carrier.frequencies().into_iter().enumerate() {
                let u = comb.stacked().matvec(&steering_vector(layout.positions(), r, theta, f)).unwrap();
                let inner: Complex64 = u.iter().zip(&y64[k * 64..(k + 1) * 64]).map(|(a, b)| a.conj() * b).sum();
                expected += inner.norm() / u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            }
            assert!((search.score(g, &y32) - expected).abs() < 1e-4 * expected);
        }
    }

    #[test]
    fn single_point_grid_and_ties() {
        let (layout, carrier, comb) = na_setup();
        let grid = Grid { radii: vec![2.0], angles: vec![-0.3] };
        let search = GridSearch::new(grid, &layout, &carrier, &comb).unwrap();
        assert_eq!(search.locate(&vec![Complex32::new(1.0, 0.0); 8 * 64]).unwrap(), (2.0, -0.3));
        // All-zero observation: every score ties at 0, so the first point wins.
        let grid = Grid { radii: vec![1.0, 2.0], angles: vec![-0.5, -0.1] };
        let search = GridSearch::new(grid, &layout, &carrier, &comb).unwrap();
        assert_eq!(search.locate(&vec![Complex32::new(0.0, 0.0); 8 * 64]).unwrap(), (1.0, -0.5));
        assert!(GridSearch::new(Grid { radii: vec![], angles: vec![0.0] }, &layout, &carrier, &comb).is_err());
    }

    #[test]
    fn grid_error_shrinks_with_snr() {
        let (layout, carrier, comb) = na_setup();
        let search =
            GridSearch::new(Grid::log_polar(0.1, 10.0, 20, -PI / 2.0, 0.0, 30), &layout, &carrier, &comb).unwrap();
        let mut err = [0.0; 2];
        for i in 0..64u64 {
            let mut rng = rng_from_seed(100 + i);
            let pos =
                UePosition::from_polar(0.5 + 9.0 * (i as f64 / 64.0), -1.4 * ((i * 7 % 64) as f64 / 64.0)).unwrap();
            let h = los_channel(&layout, pos.r, pos.theta, &carrier).unwrap();
            for (slot, snr) in [-10.0, 20.0].into_iter().enumerate() {
                let y = observe_at_snr(&comb, &h, snr, &mut rng).unwrap().y;
                let est = search.locate_position(&obs32(&y)).unwrap();
                err[slot] += (est.x - pos.x).hypot(est.y - pos.y);
            }
        }
        assert!(err[0] >= err[1], "{err:?}");
    }
}
