//! Linear antenna layouts: compact (CA), uniform sparse (USA), modular (MOA)
//! and two-level nested (NA) arrays.
//!
//! Positions are generated on an integer-or-real lattice in units of the base
//! spacing `d`, then translated so the aperture midpoint sits at the origin.
//! Working in lattice units first keeps the aperture bit-identical to the
//! closed forms `(N-1)d`, `(N-1)ηd`, `[(N1-1)Γ + (M1-1)]d` and
//! `[N2(N1+1) - 1]d`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrayKind {
    /// Compact array, spacing `d`.
    Ca { n: u32 },
    /// Uniform sparse array, spacing `eta * d`.
    Usa { n: u32, eta: f64 },
    /// `modules` modules of `per_module` elements; module origins `gamma * d` apart.
    Moa { modules: u32, per_module: u32, gamma: u32 },
    /// Inner `{m d : m = 1..=inner}` plus outer `{n (inner+1) d : n = 1..=outer}`.
    Na { inner: u32, outer: u32 },
}

impl ArrayKind {
    pub fn element_count(&self) -> usize {
        match *self {
            ArrayKind::Ca { n } | ArrayKind::Usa { n, .. } => n as usize,
            ArrayKind::Moa { modules, per_module, .. } => modules as usize * per_module as usize,
            ArrayKind::Na { inner, outer } => inner as usize + outer as usize,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ArrayKind::Ca { .. } => "CA",
            ArrayKind::Usa { .. } => "USA",
            ArrayKind::Moa { .. } => "MOA",
            ArrayKind::Na { .. } => "NA",
        }
    }

    /// Builds the layout for this kind with base spacing `d`.
    pub fn build(&self, d: f64) -> Result<ArrayLayout> {
        match *self {
            ArrayKind::Ca { n } => build_ca(n, d),
            ArrayKind::Usa { n, eta } => build_usa(n, d, eta),
            ArrayKind::Moa { modules, per_module, gamma } => build_moa(modules, per_module, gamma, d),
            ArrayKind::Na { inner, outer } => build_na(inner, outer, d),
        }
    }
}

/// A centered linear array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayLayout {
    kind: ArrayKind,
    d: f64,
    positions: Vec<f64>,
    aperture: f64,
}

impl ArrayLayout {
    pub fn kind(&self) -> ArrayKind {
        self.kind
    }

    /// Base spacing in meters.
    pub fn spacing(&self) -> f64 {
        self.d
    }

    /// Element x-coordinates in meters, strictly increasing.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn n_elements(&self) -> usize {
        self.positions.len()
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    /// Fraunhofer distance `2 D² / λ` at frequency `f`.
    pub fn rayleigh_distance(&self, f: f64) -> f64 {
        let lambda = SPEED_OF_LIGHT / f;
        2.0 * self.aperture * self.aperture / lambda
    }
}

/// Half of the carrier wavelength.
pub fn half_wavelength(f_c: f64) -> f64 {
    SPEED_OF_LIGHT / f_c / 2.0
}

fn check_spacing(d: f64) -> Result<()> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidParameter(format!("spacing d must be positive, got {d}")));
    }
    Ok(())
}

fn centered(kind: ArrayKind, d: f64, mut units: Vec<f64>) -> ArrayLayout {
    units.sort_by(|a, b| a.total_cmp(b));
    let mid = (units[0] + units[units.len() - 1]) / 2.0;
    let positions: Vec<f64> = units.iter().map(|u| (u - mid) * d).collect();
    let aperture = positions[positions.len() - 1] - positions[0];
    ArrayLayout { kind, d, positions, aperture }
}

pub fn build_ca(n: u32, d: f64) -> Result<ArrayLayout> {
    check_spacing(d)?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("CA needs at least 2 elements, got {n}")));
    }
    let units = (0..n).map(f64::from).collect();
    Ok(centered(ArrayKind::Ca { n }, d, units))
}

pub fn build_usa(n: u32, d: f64, eta: f64) -> Result<ArrayLayout> {
    check_spacing(d)?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("USA needs at least 2 elements, got {n}")));
    }
    if !(eta.is_finite() && eta >= 1.0) {
        return Err(Error::InvalidParameter(format!("USA sparsity eta must be >= 1, got {eta}")));
    }
    let units = (0..n).map(|i| f64::from(i) * eta).collect();
    Ok(centered(ArrayKind::Usa { n, eta }, d, units))
}

pub fn build_moa(modules: u32, per_module: u32, gamma: u32, d: f64) -> Result<ArrayLayout> {
    check_spacing(d)?;
    if modules == 0 || per_module == 0 {
        return Err(Error::InvalidParameter(format!(
            "MOA needs positive module and element counts, got {modules}x{per_module}"
        )));
    }
    if gamma < per_module {
        return Err(Error::InvalidParameter(format!(
            "MOA module spacing gamma={gamma} is below the module size {per_module}; modules would overlap"
        )));
    }
    let units = (0..modules).flat_map(|n| (0..per_module).map(move |m| f64::from(n * gamma + m))).collect();
    Ok(centered(ArrayKind::Moa { modules, per_module, gamma }, d, units))
}

pub fn build_na(inner: u32, outer: u32, d: f64) -> Result<ArrayLayout> {
    check_spacing(d)?;
    if inner == 0 || outer == 0 {
        return Err(Error::InvalidParameter(format!("NA needs positive inner and outer counts, got {inner}+{outer}")));
    }
    let inner_units = (1..=inner).map(f64::from);
    let outer_units = (1..=outer).map(|n| f64::from(n * (inner + 1)));
    let units = inner_units.chain(outer_units).collect();
    Ok(centered(ArrayKind::Na { inner, outer }, d, units))
}
