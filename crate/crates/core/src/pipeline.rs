//! Two-stage positioning and channel reconstruction.
//!
//! Stage 1 maps the pilot observation to UE coordinates. The coordinates fix
//! a geometric LoS channel, which stage 2 refines into the full channel:
//! `ĥ = h̃_LoS(Ĉ) + s_h · net₂(h̃_LoS, Ĉ [, W̄⁺(Y − W̄ h̃_LoS)])`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::{Complex32, Complex64};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;

use crate::autodiff::{Adam, AdamConfig, Bindings, ParamStore, Tape, Tensor, Var};
use crate::baselines::{combine, LeastSquares};
use crate::channel::{los_channel, CarrierConfig, UePosition};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::geometry::ArrayLayout;
use crate::net::{CpMamba, HeadKind, NetConfig};
use crate::pilot::CombinerSet;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sample::{Dataset, SampleRecord};

/// Physical context shared by every sample of a dataset.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub layout: ArrayLayout,
    pub carrier: CarrierConfig,
    pub combiner: CombinerSet,
    pub r_min: f64,
    pub r_max: f64,
}

impl SystemModel {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.config.per_sample_combiner {
            return Err(Error::Config("the estimators need one combiner shared by the whole dataset".into()));
        }
        Ok(Self {
            layout: ds.layout.clone(),
            carrier: ds.config.carrier,
            combiner: ds.combiner.clone(),
            r_min: ds.config.r_min,
            r_max: ds.config.r_max,
        })
    }

    pub fn subcarriers(&self) -> usize {
        self.carrier.subcarriers
    }

    pub fn measurements(&self) -> usize {
        self.combiner.measurements()
    }

    pub fn antennas(&self) -> usize {
        self.layout.n_elements()
    }
}

/// Normalization constants, fixed on the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales {
    /// RMS magnitude of observation entries.
    pub y: f64,
    /// RMS magnitude of LoS channel entries.
    pub h_los: f64,
    /// RMS magnitude of full channel entries.
    pub h: f64,
    /// Coordinates are divided by this.
    pub r_max: f64,
}

fn rms<'a>(values: impl Iterator<Item = &'a Complex32>) -> f64 {
    let (mut total, mut count) = (0.0f64, 0usize);
    for z in values {
        total += f64::from(z.norm_sqr());
        count += 1;
    }
    (total / count.max(1) as f64).sqrt()
}

impl Scales {
    pub fn from_records(records: &[SampleRecord], r_max: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty);
        }
        let s = Self {
            y: rms(records.iter().flat_map(|r| r.y.iter())),
            h_los: rms(records.iter().flat_map(|r| r.h_los.iter())),
            h: rms(records.iter().flat_map(|r| r.h.iter())),
            r_max,
        };
        if !(s.y > 0.0 && s.h_los > 0.0 && s.h > 0.0 && r_max > 0.0) {
            return Err(Error::ZeroNorm);
        }
        Ok(s)
    }
}

fn widen(z: &Complex32) -> Complex64 {
    Complex64::new(f64::from(z.re), f64::from(z.im))
}

fn planes(values: &[Complex64], scale: f64) -> impl Iterator<Item = f32> + '_ {
    let inv = 1.0 / scale;
    let re = values.iter().map(move |z| (z.re * inv) as f32);
    let im = values.iter().map(move |z| (z.im * inv) as f32);
    re.chain(im)
}

/// Stage-1 input `[2, K, M]`: real and imaginary planes of `Y / s_y`.
pub fn position_input(y: &[Complex32], k: usize, m: usize, scales: &Scales) -> Result<Tensor<f32>> {
    let inv = 1.0 / scales.y;
    let re = y.iter().map(|z| (f64::from(z.re) * inv) as f32);
    let im = y.iter().map(|z| (f64::from(z.im) * inv) as f32);
    Tensor::new(&[2, k, m], re.chain(im).collect())
}

/// LoS channel of a position, through the same code path as data generation.
pub fn los_from_position(pos: &UePosition, layout: &ArrayLayout, carrier: &CarrierConfig) -> Result<CMatrix> {
    los_channel(layout, pos.r, pos.theta, carrier)
}

/// LoS channel of raw coordinates; the origin is rejected.
pub fn los_from_coordinates(c: [f64; 2], layout: &ArrayLayout, carrier: &CarrierConfig) -> Result<CMatrix> {
    los_from_position(&UePosition::from_cartesian(c[0], c[1])?, layout, carrier)
}

/// Position for a network output, with the radius clamped to at least `r_min`.
pub fn clamp_position(c: [f64; 2], r_min: f64) -> Result<UePosition> {
    let r = c[0].hypot(c[1]);
    if !r.is_finite() {
        return Err(Error::DegeneratePosition);
    }
    if r >= r_min {
        return UePosition::from_cartesian(c[0], c[1]);
    }
    UePosition::from_polar(r_min, c[1].atan2(c[0]))
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: CpMamba,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let (net, params) = CpMamba::init(config, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    fn forward_frozen(&self, input: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(input);
        let y = self.net.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Stage-1 network configuration for a system: input `[2, K, P·N_RF]`.
pub fn position_net_config(system: &SystemModel) -> NetConfig {
    NetConfig::new(HeadKind::Position, 2, system.subcarriers(), system.measurements())
}

/// Stage-2 network configuration: input `[4, K, N]`, or `[6, K, N]` with least-squares planes.
pub fn channel_net_config(system: &SystemModel, ls_input: bool) -> NetConfig {
    let mut c =
        NetConfig::new(HeadKind::Channel, if ls_input { 6 } else { 4 }, system.subcarriers(), system.antennas());
    c.ls_gain = ls_input;
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Batch size `V`; clamped to the training-set size.
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// A trace row is kept every this many steps, starting at step 0.
    pub report_every: usize,
    /// Stop once a batch loss falls below this value.
    pub target_loss: Option<f64>,
    /// Stop once a batch loss falls below this fraction of the first batch loss.
    pub target_ratio: Option<f64>,
    /// Stage 2 only: build the LoS prior from true instead of predicted positions.
    pub oracle_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 1e-3,
            steps: 1000,
            seed: 0,
            report_every: 10,
            target_loss: None,
            target_ratio: None,
            oracle_positions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || self.report_every == 0
            || !(self.lr > 0.0 && self.lr.is_finite())
            || self.target_ratio.is_some_and(|r| !(r > 0.0 && r <= 1.0))
        {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Loss trace of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(step, batch loss)` pairs.
    pub trace: Vec<(usize, f64)>,
    pub steps_run: usize,
    pub final_loss: f64,
}

/// Epoch-wise shuffled batches; a short tail at the end of an epoch is skipped.
struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self { n, batch: batch.min(n), seed, epoch: 0, order: Vec::new(), pos: 0 };
        b.reshuffle();
        b
    }

    fn epoch_seed(&self) -> u64 {
        derive_seed(self.seed, self.epoch)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = rng_from_seed(self.epoch_seed());
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> (&[usize], u64) {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let start = self.pos;
        self.pos += self.batch;
        (&self.order[start..start + self.batch], self.epoch_seed())
    }
}

/// Mini-batch Adam over per-sample losses; gradients are summed in batch order.
fn train_loop<F>(model: &mut Model, n: usize, cfg: &TrainConfig, mut sample_loss: F) -> Result<TrainReport>
where
    F: FnMut(&mut Tape<f32>, &CpMamba, &Bindings, usize) -> Result<Var>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Empty);
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut batcher = Batcher::new(n, cfg.batch, cfg.seed);
    let mut trace = Vec::new();
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let (indices, batch_seed) = batcher.next();
        let indices = indices.to_vec();
        let mut acc: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0f64;
        for &i in &indices {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let loss = sample_loss(&mut tape, &model.net, &p, i)?;
            tape.backward(loss)?;
            loss_sum += f64::from(tape.value(loss).item());
            for (a, g) in acc.iter_mut().zip(model.params.gradients(&tape, &p)) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
        }
        let v = indices.len() as f64;
        let loss = loss_sum / v;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_seed });
        }
        let inv = 1.0 / v as f32;
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        if step % cfg.report_every == 0 {
            trace.push((step, loss));
        }
        final_loss = loss;
        steps_run = step + 1;
        let first = trace.first().map_or(loss, |t| t.1);
        if cfg.target_loss.is_some_and(|t| loss < t) || cfg.target_ratio.is_some_and(|r| loss < r * first) {
            break;
        }
        adam.step(&mut model.params, &acc)?;
    }
    Ok(TrainReport { trace, steps_run, final_loss })
}

fn check_position_model(model: &Model, system: &SystemModel) -> Result<()> {
    let c = model.config();
    if c.head != HeadKind::Position
        || c.in_ch != 2
        || c.height != system.subcarriers()
        || c.width != system.measurements()
    {
        return Err(Error::Config(format!(
            "positioning network expects [{}, {}, {}] with a position head; data is [2, {}, {}]",
            c.in_ch,
            c.height,
            c.width,
            system.subcarriers(),
            system.measurements()
        )));
    }
    Ok(())
}

fn check_channel_model(model: &Model, system: &SystemModel) -> Result<()> {
    let c = model.config();
    if c.head != HeadKind::Channel
        || !(c.in_ch == 4 || c.in_ch == 6)
        || c.height != system.subcarriers()
        || c.width != system.antennas()
    {
        return Err(Error::Config(format!(
            "channel network expects [{}, {}, {}] with a channel head; data is [4|6, {}, {}]",
            c.in_ch,
            c.height,
            c.width,
            system.subcarriers(),
            system.antennas()
        )));
    }
    Ok(())
}

fn check_record(r: &SampleRecord, system: &SystemModel) -> Result<()> {
    if r.k != system.subcarriers() || r.m != system.measurements() || r.n != system.antennas() {
        return Err(Error::Dimension(format!(
            "record is K={} M={} N={}, system is K={} M={} N={}",
            r.k,
            r.m,
            r.n,
            system.subcarriers(),
            system.measurements(),
            system.antennas()
        )));
    }
    Ok(())
}

/// Trains the positioning network on coordinate MSE in m².
pub fn train_stage1(
    model: &mut Model,
    records: &[SampleRecord],
    system: &SystemModel,
    scales: &Scales,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_position_model(model, system)?;
    records.iter().try_for_each(|r| check_record(r, system))?;
    let (k, m) = (system.subcarriers(), system.measurements());
    let r_max = scales.r_max as f32;
    train_loop(model, records.len(), cfg, |tape, net, p, i| {
        let rec = &records[i];
        let x = tape.constant(position_input(&rec.y, k, m, scales)?);
        let out = net.forward(tape, p, x)?;
        let pred = tape.scale(out, r_max);
        let target = tape.constant(Tensor::new(&[2], vec![rec.ue.x as f32, rec.ue.y as f32])?);
        let d = tape.sub(pred, target)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.sum(sq))
    })
}

/// Stage-1 prediction in meters (unclamped).
pub fn predict_coordinates(model: &Model, y: &[Complex32], system: &SystemModel, scales: &Scales) -> Result<[f64; 2]> {
    let out = model.forward_frozen(position_input(y, system.subcarriers(), system.measurements(), scales)?)?;
    Ok([f64::from(out.data()[0]) * scales.r_max, f64::from(out.data()[1]) * scales.r_max])
}

/// Everything stage 2 consumes for one observation.
#[derive(Debug, Clone)]
pub struct ChannelPrior {
    pub position: UePosition,
    pub h_los: CMatrix,
    /// `W̄⁺(Y − W̄ h̃_LoS)`, present when the network takes least-squares planes.
    pub ls_residual: Option<CMatrix>,
}

impl ChannelPrior {
    pub fn new(position: UePosition, y: &[Complex32], system: &SystemModel, ls: Option<&LeastSquares>) -> Result<Self> {
        let h_los = los_from_position(&position, &system.layout, &system.carrier)?;
        let ls_residual = match ls {
            Some(ls) => {
                let mut resid = combine(&system.combiner, &h_los)?;
                for (r, obs) in resid.data_mut().iter_mut().zip(y) {
                    *r = widen(obs) - *r;
                }
                Some(ls.estimate(&resid)?)
            }
            None => None,
        };
        Ok(Self { position, h_los, ls_residual })
    }

    /// Stage-2 input `[4|6, K, N]`.
    pub fn to_input(&self, scales: &Scales) -> Result<Tensor<f32>> {
        let (k, n) = (self.h_los.rows(), self.h_los.cols());
        let plane = k * n;
        let mut data: Vec<f32> = planes(self.h_los.data(), scales.h_los).collect();
        data.extend(core::iter::repeat_n((self.position.x / scales.r_max) as f32, plane));
        data.extend(core::iter::repeat_n((self.position.y / scales.r_max) as f32, plane));
        if let Some(ls) = &self.ls_residual {
            data.extend(planes(ls.data(), scales.h));
        }
        let ch = data.len() / plane;
        Tensor::new(&[ch, k, n], data)
    }
}

fn ls_for(model: &Model, system: &SystemModel) -> Result<Option<LeastSquares>> {
    if model.config().in_ch == 6 {
        Ok(Some(LeastSquares::new(&system.combiner)?))
    } else {
        Ok(None)
    }
}

/// Trains the channel network on `(1/V) Σ ‖h_i − ĥ_i‖²` with stage 1 frozen.
pub fn train_stage2(
    model: &mut Model,
    stage1: &Model,
    records: &[SampleRecord],
    system: &SystemModel,
    scales: &Scales,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_channel_model(model, system)?;
    if !cfg.oracle_positions {
        check_position_model(stage1, system)?;
    }
    records.iter().try_for_each(|r| check_record(r, system))?;
    let positions = records
        .iter()
        .map(|r| {
            if cfg.oracle_positions {
                Ok(r.ue)
            } else {
                clamp_position(predict_coordinates(stage1, &r.y, system, scales)?, system.r_min)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ls = ls_for(model, system)?;
    let (k, n) = (system.subcarriers(), system.antennas());
    let s_h2 = (scales.h * scales.h) as f32;
    train_loop(model, records.len(), cfg, |tape, net, p, i| {
        let rec = &records[i];
        let prior = ChannelPrior::new(positions[i], &rec.y, system, ls.as_ref())?;
        let x = tape.constant(prior.to_input(scales)?);
        let out = net.forward(tape, p, x)?;
        let resid: Vec<Complex64> = rec.h.iter().zip(prior.h_los.data()).map(|(h, l)| widen(h) - l).collect();
        let target = tape.constant(Tensor::new(&[2, k, n], planes(&resid, scales.h).collect())?);
        let d = tape.sub(out, target)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, s_h2))
    })
}

/// Frozen two-stage estimator.
#[derive(Debug, Clone)]
pub struct TwoStage {
    pub system: SystemModel,
    pub scales: Scales,
    pub stage1: Model,
    pub stage2: Option<Model>,
    ls: Option<LeastSquares>,
}

impl TwoStage {
    /// Validates that both networks fit the system before anything runs.
    pub fn new(system: SystemModel, scales: Scales, stage1: Model, stage2: Option<Model>) -> Result<Self> {
        check_position_model(&stage1, &system)?;
        let ls = match &stage2 {
            Some(m) => {
                check_channel_model(m, &system)?;
                ls_for(m, &system)?
            }
            None => None,
        };
        Ok(Self { system, scales, stage1, stage2, ls })
    }

    /// Position estimate and channel estimate (`K x N`) for observation `y`.
    pub fn infer(&self, y: &[Complex32]) -> Result<(UePosition, CMatrix)> {
        if y.len() != self.system.subcarriers() * self.system.measurements() {
            return Err(Error::Dimension(format!(
                "observation has {} entries, expected {}",
                y.len(),
                self.system.subcarriers() * self.system.measurements()
            )));
        }
        let c = predict_coordinates(&self.stage1, y, &self.system, &self.scales)?;
        let pos = clamp_position(c, self.system.r_min)?;
        self.reconstruct(pos, y)
    }

    /// Stage 2 alone, from a given position.
    pub fn reconstruct(&self, pos: UePosition, y: &[Complex32]) -> Result<(UePosition, CMatrix)> {
        let Some(stage2) = &self.stage2 else {
            return Ok((pos, los_from_position(&pos, &self.system.layout, &self.system.carrier)?));
        };
        let prior = ChannelPrior::new(pos, y, &self.system, self.ls.as_ref())?;
        let out = stage2.forward_frozen(prior.to_input(&self.scales)?)?;
        let plane = prior.h_los.rows() * prior.h_los.cols();
        let (re, im) = out.data().split_at(plane);
        let mut h = prior.h_los;
        for ((z, &a), &b) in h.data_mut().iter_mut().zip(re).zip(im) {
            *z += Complex64::new(f64::from(a), f64::from(b)) * self.scales.h;
        }
        Ok((pos, h))
    }
}
