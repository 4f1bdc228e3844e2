//! SNR sweeps over a fixed set of test channels.
//!
//! Every SNR point redraws observation noise from a seed that depends only on
//! `(seed, snr index, sample index)`, so all methods see the same noisy
//! observation of the same channel.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_complex::{Complex32, Complex64};

use crate::baselines::{GridSearch, LeastSquares};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::metrics::{nmse_single, position_error, to_db};
use crate::pilot::observe_at_snr;
use crate::pipeline::{SystemModel, TwoStage};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sample::SampleRecord;

/// What a method produced for one observation.
#[derive(Debug, Clone, Default)]
pub struct Estimate {
    pub position: Option<[f64; 2]>,
    pub channel: Option<CMatrix>,
}

/// A positioning and/or channel estimator evaluated by [`sweep`].
pub trait Estimator: Sync {
    fn label(&self) -> &str;

    /// `truth` is only for the oracle; real methods must look at `y` alone.
    fn estimate(&self, y: &[Complex32], truth: &SampleRecord) -> Result<Estimate>;
}

/// Returns the ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle;

impl Estimator for Oracle {
    fn label(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, _y: &[Complex32], truth: &SampleRecord) -> Result<Estimate> {
        Ok(Estimate { position: Some(truth.position()), channel: Some(truth.h_matrix()) })
    }
}

/// Minimum-norm least squares channel estimate.
#[derive(Debug, Clone)]
pub struct LsEstimator {
    pub ls: LeastSquares,
    pub k: usize,
    pub m: usize,
}

impl LsEstimator {
    pub fn new(system: &SystemModel) -> Result<Self> {
        Ok(Self { ls: LeastSquares::new(&system.combiner)?, k: system.subcarriers(), m: system.measurements() })
    }
}

impl Estimator for LsEstimator {
    fn label(&self) -> &str {
        "ls"
    }

    fn estimate(&self, y: &[Complex32], _truth: &SampleRecord) -> Result<Estimate> {
        let y = CMatrix::from_vec(self.k, self.m, widen(y))?;
        Ok(Estimate { position: None, channel: Some(self.ls.estimate(&y)?) })
    }
}

/// Matched-filter grid positioning.
impl Estimator for GridSearch {
    fn label(&self) -> &str {
        "grid"
    }

    fn estimate(&self, y: &[Complex32], _truth: &SampleRecord) -> Result<Estimate> {
        let p = self.locate_position(y)?;
        Ok(Estimate { position: Some([p.x, p.y]), channel: None })
    }
}

impl Estimator for TwoStage {
    fn label(&self) -> &str {
        "cpmamba"
    }

    fn estimate(&self, y: &[Complex32], _truth: &SampleRecord) -> Result<Estimate> {
        let (p, h) = self.infer(y)?;
        Ok(Estimate { position: Some([p.x, p.y]), channel: Some(h) })
    }
}

/// Stage 2 fed with the true position; isolates the channel network.
#[derive(Debug, Clone, Copy)]
pub struct OraclePrior<'a>(pub &'a TwoStage);

impl Estimator for OraclePrior<'_> {
    fn label(&self) -> &str {
        "cpmamba-oracle-pos"
    }

    fn estimate(&self, y: &[Complex32], truth: &SampleRecord) -> Result<Estimate> {
        let (_, h) = self.0.reconstruct(truth.ue, y)?;
        Ok(Estimate { position: None, channel: Some(h) })
    }
}

/// Errors of one method on one sample; `None` where the method has no output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub position_error: Option<f64>,
    pub nmse: Option<f64>,
}

/// One CSV row: a method at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub snr_db: f64,
    /// NaN when the method does not position.
    pub mpe_m: f64,
    /// NaN when the method does not estimate the channel.
    pub nmse: f64,
    pub n: usize,
}

pub const CSV_HEADER: &str = "method,snr_db,mpe_m,nmse,nmse_db,n";

impl ReportRow {
    pub fn nmse_db(&self) -> f64 {
        if self.nmse.is_nan() {
            f64::NAN
        } else {
            to_db(self.nmse)
        }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.method, self.snr_db, self.mpe_m, self.nmse, self.nmse_db(), self.n)
    }
}

fn widen(v: &[Complex32]) -> Vec<Complex64> {
    v.iter().map(|z| Complex64::new(f64::from(z.re), f64::from(z.im))).collect()
}

fn narrow(v: &[Complex64]) -> Vec<Complex32> {
    v.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
}

/// Seed of the noise drawn for sample `index` at SNR point `snr_index`.
pub fn noise_seed(seed: u64, snr_index: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, snr_index as u64), index as u64)
}

/// Fresh observation of `record`'s channel at `snr_db`.
pub fn observe_record(record: &SampleRecord, system: &SystemModel, snr_db: f64, seed: u64) -> Result<Vec<Complex32>> {
    let h = CMatrix::from_vec(record.k, record.n, widen(&record.h))?;
    let obs = observe_at_snr(&system.combiner, &h, snr_db, &mut rng_from_seed(seed))?;
    Ok(narrow(obs.y.data()))
}

/// Scores every method on one sample at one SNR point.
pub fn evaluate_sample(
    methods: &[&dyn Estimator],
    record: &SampleRecord,
    system: &SystemModel,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<Outcome>> {
    let y = observe_record(record, system, snr_db, seed)?;
    let truth = widen(&record.h);
    methods
        .iter()
        .map(|m| {
            let est = m.estimate(&y, record)?;
            let position_error = est.position.map(|p| position_error(p, record.position()));
            let nmse = match &est.channel {
                Some(h) => Some(nmse_single(h.data(), &truth)?),
                None => None,
            };
            Ok(Outcome { position_error, nmse })
        })
        .collect()
}

/// Sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub snrs_db: Vec<f64>,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snrs_db.is_empty() {
            return Err(Error::Config("SNR list is empty".into()));
        }
        if let Some(s) = self.snrs_db.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("SNR {s} is not finite")));
        }
        Ok(())
    }
}

/// Reduces per-sample outcomes (`outcomes[snr][sample][method]`) to report rows
/// in `(snr, method)` order. Sums run in sample order.
pub fn assemble(methods: &[&dyn Estimator], snrs_db: &[f64], outcomes: &[Vec<Vec<Outcome>>]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(snrs_db.len() * methods.len());
    for (&snr, per_sample) in snrs_db.iter().zip(outcomes) {
        let n = per_sample.len();
        if n == 0 {
            return Err(Error::Empty);
        }
        for (j, m) in methods.iter().enumerate() {
            let mean = |f: &dyn Fn(&Outcome) -> Option<f64>| -> f64 {
                let mut sum = 0.0;
                for o in per_sample {
                    match f(&o[j]) {
                        Some(v) => sum += v,
                        None => return f64::NAN,
                    }
                }
                sum / n as f64
            };
            rows.push(ReportRow {
                method: m.label().into(),
                snr_db: snr,
                mpe_m: mean(&|o| o.position_error),
                nmse: mean(&|o| o.nmse),
                n,
            });
        }
    }
    Ok(rows)
}

/// Runs every method at every SNR on `records`; rows ordered `(snr, method)`.
pub fn sweep(
    records: &[SampleRecord],
    system: &SystemModel,
    methods: &[&dyn Estimator],
    cfg: &SweepConfig,
) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    if records.is_empty() || methods.is_empty() {
        return Err(Error::Empty);
    }
    let mut outcomes = Vec::with_capacity(cfg.snrs_db.len());
    for (s, &snr) in cfg.snrs_db.iter().enumerate() {
        let per_sample = records
            .iter()
            .enumerate()
            .map(|(i, r)| evaluate_sample(methods, r, system, snr, noise_seed(cfg.seed, s, i)))
            .collect::<Result<Vec<_>>>()?;
        outcomes.push(per_sample);
    }
    assemble(methods, &cfg.snrs_db, &outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::Grid;
    use crate::channel::{CarrierConfig, SceneConfig};
    use crate::geometry::ArrayKind;
    use crate::pipeline::{position_net_config, Model, Scales};
    use crate::sample::{Dataset, GenConfig};

    fn setup(samples: u64) -> (Dataset, SystemModel) {
        let cfg = GenConfig {
            array: ArrayKind::Na { inner: 2, outer: 6 },
            carrier: CarrierConfig { subcarriers: 8, ..CarrierConfig::default() },
            scene: SceneConfig::los_only(),
            slots: 2,
            n_rf: 4,
            samples,
            seed: 3,
            ..GenConfig::default()
        };
        let ds = Dataset::generate(cfg).unwrap();
        let system = SystemModel::from_dataset(&ds).unwrap();
        (ds, system)
    }

    #[test]
    fn oracle_is_perfect_and_row_count_matches() {
        let (ds, system) = setup(6);
        let ls = LsEstimator::new(&system).unwrap();
        let methods: [&dyn Estimator; 2] = [&Oracle, &ls];
        let cfg = SweepConfig { snrs_db: alloc::vec![-10.0, 0.0, 20.0], seed: 1 };
        let rows = sweep(&ds.records, &system, &methods, &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        for row in rows.iter().filter(|r| r.method == "oracle") {
            assert_eq!((row.mpe_m, row.nmse, row.n), (0.0, 0.0, 6));
            assert_eq!(row.nmse_db(), f64::NEG_INFINITY);
        }
        for row in rows.iter().filter(|r| r.method == "ls") {
            assert!(row.mpe_m.is_nan());
            assert!(row.nmse > 0.0);
        }
        assert_eq!(rows[0].csv_line(), "oracle,-10,0,0,-inf,6");
    }

    #[test]
    fn noise_shared_across_methods_and_runs() {
        let (ds, system) = setup(3);
        let a = observe_record(&ds.records[1], &system, 5.0, noise_seed(9, 2, 1)).unwrap();
        let b = observe_record(&ds.records[1], &system, 5.0, noise_seed(9, 2, 1)).unwrap();
        let c = observe_record(&ds.records[1], &system, 5.0, noise_seed(9, 2, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(noise_seed(9, 1, 2), noise_seed(9, 2, 1));
    }

    #[test]
    fn ls_nmse_falls_with_snr() {
        let (ds, system) = setup(16);
        let ls = LsEstimator::new(&system).unwrap();
        let methods: [&dyn Estimator; 1] = [&ls];
        let cfg = SweepConfig { snrs_db: alloc::vec![-10.0, 30.0], seed: 4 };
        let rows = sweep(&ds.records, &system, &methods, &cfg).unwrap();
        assert!(rows[1].nmse < rows[0].nmse);
    }

    #[test]
    fn grid_and_two_stage_rows() {
        let (ds, system) = setup(4);
        let grid = GridSearch::new(
            Grid::log_polar(0.1, 10.0, 8, -1.5, 0.0, 8),
            &system.layout,
            &system.carrier,
            &system.combiner,
        )
        .unwrap();
        let scales = Scales::from_records(&ds.records, system.r_max).unwrap();
        let mut net = position_net_config(&system);
        net.stages = 2;
        net.c0 = 2;
        net.d_state = 2;
        let pipeline = TwoStage::new(system.clone(), scales, Model::init(net, 0).unwrap(), None).unwrap();
        let oracle_prior = OraclePrior(&pipeline);
        let methods: [&dyn Estimator; 3] = [&grid, &pipeline, &oracle_prior];
        let rows = sweep(&ds.records, &system, &methods, &SweepConfig { snrs_db: alloc::vec![10.0], seed: 0 }).unwrap();
        assert!(rows[0].mpe_m.is_finite() && rows[0].nmse.is_nan());
        assert!(rows[1].mpe_m.is_finite() && rows[1].nmse.is_finite());
        // Pure LoS scenes: the true-position prior is the channel itself.
        assert!(rows[2].nmse < 1e-10);
    }

    #[test]
    fn empty_inputs_rejected() {
        let (ds, system) = setup(1);
        let methods: [&dyn Estimator; 1] = [&Oracle];
        let empty = SweepConfig { snrs_db: alloc::vec![], seed: 0 };
        assert!(matches!(sweep(&ds.records, &system, &methods, &empty), Err(Error::Config(_))));
        let cfg = SweepConfig { snrs_db: alloc::vec![0.0], seed: 0 };
        assert_eq!(sweep(&[], &system, &methods, &cfg), Err(Error::Empty));
    }
}
