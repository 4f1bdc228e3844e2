//! Deterministic end-to-end sample generation and dataset splitting.
//!
//! Sample `i` of a dataset draws everything from its own generator seeded with
//! `derive_seed(master, i)`, in this order: UE radius, UE angle, SNR,
//! scatterers, observation noise. The combiner shared by the whole dataset is
//! drawn from `derive_seed(master, u64::MAX)`. Generation runs in 64-bit
//! arithmetic; the stored arrays are rounded to 32-bit at the end.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::{Complex32, Complex64};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;

use crate::channel::{sample_scatterers, synthesize_channel, CarrierConfig, SceneConfig, UePosition};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::geometry::{half_wavelength, ArrayKind, ArrayLayout};
use crate::pilot::{draw_combiner, observe, snr_to_sigma2, CombinerSet};
use crate::rng::{derive_seed, rng_from_seed, uniform};

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub array: ArrayKind,
    /// Base element spacing in meters.
    pub spacing: f64,
    pub carrier: CarrierConfig,
    pub scene: SceneConfig,
    /// Pilot slots `P`.
    pub slots: u32,
    /// RF chains `N_RF`.
    pub n_rf: u32,
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Per-sample SNR is drawn uniformly from this dB range.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// When false, observations are noiseless and `snr_db` is stored as +inf.
    pub noise: bool,
    /// Draw a fresh combiner for every sample instead of one per dataset.
    pub per_sample_combiner: bool,
    pub samples: u64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let carrier = CarrierConfig::default();
        Self {
            array: ArrayKind::Na { inner: 4, outer: 124 },
            spacing: half_wavelength(carrier.f_c),
            carrier,
            scene: SceneConfig::default(),
            slots: 16,
            n_rf: 4,
            r_min: 0.1,
            r_max: 10.0,
            theta_min: -PI / 2.0,
            theta_max: 0.0,
            snr_min_db: 0.0,
            snr_max_db: 20.0,
            noise: true,
            per_sample_combiner: false,
            samples: 20_000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.carrier.validate()?;
        self.scene.validate()?;
        if !(self.r_min > 0.0 && self.r_max >= self.r_min && self.r_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "UE radius range must satisfy 0 < r_min <= r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if !(self.theta_max >= self.theta_min) {
            return Err(Error::InvalidParameter("UE angle range is inverted".into()));
        }
        if self.noise
            && !(self.snr_min_db.is_finite() && self.snr_max_db >= self.snr_min_db && self.snr_max_db.is_finite())
        {
            return Err(Error::InvalidParameter("SNR range must be finite and ordered".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        if self.slots == 0 || self.n_rf == 0 {
            return Err(Error::InvalidParameter("P and N_RF must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<ArrayLayout> {
        self.array.build(self.spacing)
    }

    /// Measurements per subcarrier, `P · N_RF`.
    pub fn measurements(&self) -> usize {
        self.slots as usize * self.n_rf as usize
    }

    /// The dataset-wide combiner.
    pub fn shared_combiner(&self) -> Result<CombinerSet> {
        let n = self.array.element_count();
        draw_combiner(&mut rng_from_seed(derive_seed(self.seed, u64::MAX)), self.slots as usize, self.n_rf as usize, n)
    }

    /// Combiner used by the sample whose derived seed is `sample_seed`.
    pub fn sample_combiner(&self, sample_seed: u64) -> Result<CombinerSet> {
        if self.per_sample_combiner {
            let n = self.array.element_count();
            draw_combiner(
                &mut rng_from_seed(derive_seed(sample_seed, u64::MAX)),
                self.slots as usize,
                self.n_rf as usize,
                n,
            )
        } else {
            self.shared_combiner()
        }
    }
}

/// One training example. Arrays are row-major `[subcarrier][column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub ue: UePosition,
    pub snr_db: f64,
    pub sigma2: f64,
    /// Subcarriers `K`.
    pub k: usize,
    /// Measurements per subcarrier `P · N_RF`.
    pub m: usize,
    /// Antennas `N`.
    pub n: usize,
    /// `K x M` received pilots.
    pub y: Vec<Complex32>,
    /// `K x N` channels.
    pub h_los: Vec<Complex32>,
    pub h_nlos: Vec<Complex32>,
    pub h: Vec<Complex32>,
}

impl SampleRecord {
    pub fn position(&self) -> [f64; 2] {
        [self.ue.x, self.ue.y]
    }

    pub fn y_matrix(&self) -> CMatrix {
        widen(self.k, self.m, &self.y)
    }

    pub fn h_matrix(&self) -> CMatrix {
        widen(self.k, self.n, &self.h)
    }

    pub fn h_los_matrix(&self) -> CMatrix {
        widen(self.k, self.n, &self.h_los)
    }

    /// Checks array lengths, `h = h_los + h_nlos`, and polar/Cartesian agreement.
    pub fn validate(&self) -> Result<()> {
        let kn = self.k * self.n;
        if self.y.len() != self.k * self.m || self.h.len() != kn || self.h_los.len() != kn || self.h_nlos.len() != kn {
            return Err(Error::Dimension(format!("sample {:#x} has inconsistent array lengths", self.seed)));
        }
        for ((h, a), b) in self.h.iter().zip(&self.h_los).zip(&self.h_nlos) {
            if *h != a + b {
                return Err(Error::Dimension(format!("sample {:#x}: h != h_los + h_nlos", self.seed)));
            }
        }
        let ue = UePosition::from_polar(self.ue.r, self.ue.theta)?;
        if (ue.x - self.ue.x).abs() > 1e-12 || (ue.y - self.ue.y).abs() > 1e-12 {
            return Err(Error::Dimension(format!("sample {:#x}: position fields disagree", self.seed)));
        }
        Ok(())
    }
}

fn widen(rows: usize, cols: usize, data: &[Complex32]) -> CMatrix {
    let wide = data.iter().map(|z| Complex64::new(f64::from(z.re), f64::from(z.im))).collect();
    CMatrix::from_vec(rows, cols, wide).expect("record dimensions validated on construction")
}

fn narrow(data: &[Complex64]) -> Vec<Complex32> {
    data.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
}

/// Precomputed layout and shared combiner for one [`GenConfig`].
#[derive(Debug, Clone)]
pub struct SampleGenerator {
    cfg: GenConfig,
    layout: ArrayLayout,
    combiner: CombinerSet,
}

impl SampleGenerator {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let combiner = cfg.shared_combiner()?;
        Ok(Self { cfg, layout, combiner })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ArrayLayout {
        &self.layout
    }

    pub fn combiner(&self) -> &CombinerSet {
        &self.combiner
    }

    /// Generates sample `index`; a pure function of `(cfg, index)`.
    pub fn sample(&self, index: u64) -> Result<SampleRecord> {
        let cfg = &self.cfg;
        let seed = derive_seed(cfg.seed, index);
        let mut rng = rng_from_seed(seed);
        let r = uniform(&mut rng, cfg.r_min, cfg.r_max);
        let theta = uniform(&mut rng, cfg.theta_min, cfg.theta_max);
        let snr_db = if cfg.noise { uniform(&mut rng, cfg.snr_min_db, cfg.snr_max_db) } else { f64::INFINITY };
        let clusters = sample_scatterers(&mut rng, &cfg.scene, cfg.carrier.subcarriers);
        let ue = UePosition::from_polar(r, theta)?;
        let channel = synthesize_channel(&self.layout, ue, clusters, &cfg.carrier)?;

        let own;
        let combiner = if cfg.per_sample_combiner {
            own = cfg.sample_combiner(seed)?;
            &own
        } else {
            &self.combiner
        };
        let sigma2 = if cfg.noise { snr_to_sigma2(snr_db, &channel.h, combiner)? } else { 0.0 };
        let obs = observe(combiner, &channel.h, sigma2, &mut rng)?;

        let h_los = narrow(channel.h_los.data());
        let h_nlos = narrow(channel.h_nlos.data());
        let h = h_los.iter().zip(&h_nlos).map(|(a, b)| a + b).collect();
        Ok(SampleRecord {
            seed,
            ue,
            snr_db,
            sigma2,
            k: cfg.carrier.subcarriers,
            m: combiner.measurements(),
            n: self.layout.n_elements(),
            y: narrow(obs.y.data()),
            h_los,
            h_nlos,
            h,
        })
    }
}

/// Convenience wrapper around [`SampleGenerator::sample`].
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<SampleRecord> {
    SampleGenerator::new(*cfg)?.sample(index)
}

/// A generated dataset with the context needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub layout: ArrayLayout,
    pub combiner: CombinerSet,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    /// Generates `cfg.samples` records sequentially.
    pub fn generate(cfg: GenConfig) -> Result<Self> {
        let generator = SampleGenerator::new(cfg)?;
        let records = (0..cfg.samples).map(|i| generator.sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(generator, records))
    }

    pub fn from_parts(generator: SampleGenerator, records: Vec<SampleRecord>) -> Self {
        let SampleGenerator { cfg, layout, combiner } = generator;
        Self { config: cfg, layout, combiner, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// New dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            combiner: self.combiner.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Deterministic shuffled partition into train / validation / test.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Self, Self, Self)> {
        let [a, b, c] = split_indices(self.len(), fractions, seed)?;
        Ok((self.subset(&a), self.subset(&b), self.subset(&c)))
    }
}

/// Shuffles `0..n` with `seed` and cuts it at the rounded fraction boundaries.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}
