//! Run configuration files and the shipped presets.
//!
//! A run file is TOML with the sections `gen`, `data`, `pos_net`, `ch_net`,
//! `pos_train`, `ch_train` and `eval`; every key is optional. A missing key is
//! taken from the preset (if one is named) or from the built-in default, and a
//! notice saying so is recorded. Unknown keys and sections are errors.

use std::f64::consts::PI;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use xlmimo_core::channel::{CarrierConfig, SceneConfig};
use xlmimo_core::geometry::{half_wavelength, ArrayKind};
use xlmimo_core::net::{NetConfig, Raster};
use xlmimo_core::pipeline::TrainConfig;
use xlmimo_core::sample::GenConfig;

use crate::error::{Error, Result};

macro_rules! section {
    ($(#[$m:meta])* $name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(#[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }
    };
}

section!(
    /// Dataset generation. `array` is one of `ca`, `usa`, `moa`, `na`.
    GenSection {
        array: String,
        n: u32,
        eta: f64,
        modules: u32,
        per_module: u32,
        gamma: u32,
        inner: u32,
        outer: u32,
        carrier_hz: f64,
        bandwidth_hz: f64,
        subcarriers: usize,
        path_loss_q: f64,
        slots: u32,
        n_rf: u32,
        clusters_min: u32,
        clusters_max: u32,
        scatterers: u32,
        nlos_power: f64,
        snr_min_db: f64,
        snr_max_db: f64,
        noise: bool,
        per_sample_combiner: bool,
        samples: u64,
        seed: u64,
    }
);

section!(
    /// Train/test partition shared by `train` and `eval`.
    DataSection {
        holdout: f64,
        split_seed: u64,
    }
);

section!(
    /// Network shape. `raster` is `row` or `column`; `d_tr = 0` picks the rank automatically.
    NetSection {
        stages: usize,
        c0: usize,
        d_state: usize,
        d_tr: usize,
        k_conv: usize,
        raster: String,
        mamba_residual: bool,
        ls_input: bool,
    }
);

section!(TrainSection {
    batch: usize,
    lr: f64,
    steps: usize,
    seed: u64,
    report_every: usize,
    target_loss: f64,
    target_ratio: f64,
    oracle_positions: bool,
});

section!(
    EvalSection {
        snrs_db: Vec<f64>,
        methods: Vec<String>,
        seed: u64,
        grid_radii: usize,
        grid_angles: usize,
    }
);

/// The file as written by the user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pos_net: NetSection,
    #[serde(default)]
    pub ch_net: NetSection,
    #[serde(default)]
    pub pos_train: TrainSection,
    #[serde(default)]
    pub ch_train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }
}

pub const PRESETS: [&str; 5] = ["ca-desk", "usa-desk", "moa-desk", "na-desk", "na-overfit"];

/// Desk-scale presets: the full 128-element arrays with a reduced subcarrier
/// count, sample count and network width. `na-overfit` memorizes 8 samples.
pub fn preset(name: &str) -> Result<RunConfigFile> {
    if name == "na-overfit" {
        return overfit_preset();
    }
    let gen = match name {
        "ca-desk" => GenSection { array: Some("ca".into()), n: Some(128), ..Default::default() },
        "usa-desk" => GenSection { array: Some("usa".into()), n: Some(128), eta: Some(2.0), ..Default::default() },
        "moa-desk" => GenSection {
            array: Some("moa".into()),
            modules: Some(16),
            per_module: Some(8),
            gamma: Some(9),
            ..Default::default()
        },
        "na-desk" => GenSection { array: Some("na".into()), inner: Some(4), outer: Some(124), ..Default::default() },
        _ => return Err(Error::Config(format!("unknown preset {name:?}; known presets: {}", PRESETS.join(", ")))),
    };
    let net = NetSection { stages: Some(3), c0: Some(4), d_state: Some(8), ..Default::default() };
    let train = TrainSection { lr: Some(3e-3), steps: Some(1500), report_every: Some(10), ..Default::default() };
    let f = RunConfigFile {
        preset: Some(name.into()),
        gen: GenSection { subcarriers: Some(16), samples: Some(1024), ..gen },
        pos_net: net.clone(),
        ch_net: net,
        pos_train: train.clone(),
        ch_train: train,
        ..Default::default()
    };
    Ok(f)
}

fn overfit_preset() -> Result<RunConfigFile> {
    let mut f = preset("na-desk")?;
    f.preset = Some("na-overfit".into());
    f.gen.samples = Some(8);
    f.gen.seed = Some(11);
    f.data.holdout = Some(0.0);
    f.ch_net.c0 = Some(8);
    let train = TrainSection { batch: Some(8), steps: Some(5000), report_every: Some(100), ..f.pos_train.clone() };
    f.pos_train = TrainSection { target_loss: Some(1e-3), ..train.clone() };
    f.ch_train = TrainSection { target_ratio: Some(0.1), lr: Some(5e-3), ..train };
    Ok(f)
}

/// Network settings applied on top of the shape the data dictates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSettings {
    pub stages: usize,
    pub c0: usize,
    pub d_state: usize,
    pub d_tr: Option<usize>,
    pub k_conv: usize,
    pub raster: Raster,
    pub mamba_residual: bool,
    /// Channel network only: feed least-squares residual planes.
    pub ls_input: bool,
}

impl NetSettings {
    pub fn apply(&self, mut c: NetConfig) -> NetConfig {
        c.stages = self.stages;
        c.c0 = self.c0;
        c.d_state = self.d_state;
        c.d_tr = self.d_tr;
        c.k_conv = self.k_conv;
        c.raster = self.raster;
        c.mamba_residual = self.mamba_residual;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub snrs_db: Vec<f64>,
    pub methods: Vec<String>,
    pub seed: u64,
    pub grid_radii: usize,
    pub grid_angles: usize,
}

pub const METHODS: [&str; 5] = ["oracle", "ls", "grid", "cpmamba", "cpmamba-oracle-pos"];

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub gen: GenConfig,
    pub holdout: f64,
    pub split_seed: u64,
    pub pos_net: NetSettings,
    pub ch_net: NetSettings,
    pub pos_train: TrainConfig,
    pub ch_train: TrainConfig,
    pub eval: EvalSettings,
    /// One line per key that was filled in from a preset or default.
    pub notices: Vec<String>,
}

struct Picker<'a> {
    preset: Option<&'a str>,
    notices: Vec<String>,
}

impl Picker<'_> {
    fn pick<T: Clone + Debug>(&mut self, key: &str, file: &Option<T>, preset: &Option<T>, default: T) -> T {
        if let Some(v) = file {
            return v.clone();
        }
        match (preset, self.preset) {
            (Some(v), Some(name)) => {
                self.notices.push(format!("{key} not set, using {v:?} from preset {name}"));
                v.clone()
            }
            _ => {
                self.notices.push(format!("{key} not set, using default {default:?}"));
                default
            }
        }
    }
}

fn array_kind(p: &mut Picker, f: &GenSection, b: &GenSection) -> Result<ArrayKind> {
    let kind = p.pick("gen.array", &f.array, &b.array, "na".to_string());
    Ok(match kind.as_str() {
        "ca" => ArrayKind::Ca { n: p.pick("gen.n", &f.n, &b.n, 128) },
        "usa" => ArrayKind::Usa { n: p.pick("gen.n", &f.n, &b.n, 128), eta: p.pick("gen.eta", &f.eta, &b.eta, 2.0) },
        "moa" => ArrayKind::Moa {
            modules: p.pick("gen.modules", &f.modules, &b.modules, 16),
            per_module: p.pick("gen.per_module", &f.per_module, &b.per_module, 8),
            gamma: p.pick("gen.gamma", &f.gamma, &b.gamma, 9),
        },
        "na" => ArrayKind::Na {
            inner: p.pick("gen.inner", &f.inner, &b.inner, 4),
            outer: p.pick("gen.outer", &f.outer, &b.outer, 124),
        },
        other => return Err(Error::Config(format!("gen.array must be ca, usa, moa or na, got {other:?}"))),
    })
}

fn gen_config(p: &mut Picker, f: &GenSection, b: &GenSection) -> Result<GenConfig> {
    let d = GenConfig::default();
    let array = array_kind(p, f, b)?;
    let carrier = CarrierConfig {
        f_c: p.pick("gen.carrier_hz", &f.carrier_hz, &b.carrier_hz, d.carrier.f_c),
        bandwidth: p.pick("gen.bandwidth_hz", &f.bandwidth_hz, &b.bandwidth_hz, d.carrier.bandwidth),
        subcarriers: p.pick("gen.subcarriers", &f.subcarriers, &b.subcarriers, d.carrier.subcarriers),
        path_loss_q: p.pick("gen.path_loss_q", &f.path_loss_q, &b.path_loss_q, d.carrier.path_loss_q),
    };
    let s = SceneConfig::default();
    let scene = SceneConfig {
        clusters_min: p.pick("gen.clusters_min", &f.clusters_min, &b.clusters_min, s.clusters_min),
        clusters_max: p.pick("gen.clusters_max", &f.clusters_max, &b.clusters_max, s.clusters_max),
        scatterers_per_cluster: p.pick("gen.scatterers", &f.scatterers, &b.scatterers, s.scatterers_per_cluster),
        nlos_power: p.pick("gen.nlos_power", &f.nlos_power, &b.nlos_power, s.nlos_power),
        ..s
    };
    let cfg = GenConfig {
        array,
        spacing: half_wavelength(carrier.f_c),
        carrier,
        scene,
        slots: p.pick("gen.slots", &f.slots, &b.slots, d.slots),
        n_rf: p.pick("gen.n_rf", &f.n_rf, &b.n_rf, d.n_rf),
        snr_min_db: p.pick("gen.snr_min_db", &f.snr_min_db, &b.snr_min_db, d.snr_min_db),
        snr_max_db: p.pick("gen.snr_max_db", &f.snr_max_db, &b.snr_max_db, d.snr_max_db),
        noise: p.pick("gen.noise", &f.noise, &b.noise, d.noise),
        per_sample_combiner: p.pick("gen.per_sample_combiner", &f.per_sample_combiner, &b.per_sample_combiner, false),
        samples: p.pick("gen.samples", &f.samples, &b.samples, d.samples),
        seed: p.pick("gen.seed", &f.seed, &b.seed, d.seed),
        r_min: 0.1,
        r_max: 10.0,
        theta_min: -PI / 2.0,
        theta_max: 0.0,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn net_settings(p: &mut Picker, key: &str, f: &NetSection, b: &NetSection, ls_default: bool) -> Result<NetSettings> {
    let raster = match p.pick(&format!("{key}.raster"), &f.raster, &b.raster, "row".to_string()).as_str() {
        "row" => Raster::RowMajor,
        "column" => Raster::ColumnMajor,
        other => return Err(Error::Config(format!("{key}.raster must be row or column, got {other:?}"))),
    };
    let d_tr = p.pick(&format!("{key}.d_tr"), &f.d_tr, &b.d_tr, 0);
    Ok(NetSettings {
        stages: p.pick(&format!("{key}.stages"), &f.stages, &b.stages, 4),
        c0: p.pick(&format!("{key}.c0"), &f.c0, &b.c0, 16),
        d_state: p.pick(&format!("{key}.d_state"), &f.d_state, &b.d_state, 16),
        d_tr: (d_tr > 0).then_some(d_tr),
        k_conv: p.pick(&format!("{key}.k_conv"), &f.k_conv, &b.k_conv, 4),
        raster,
        mamba_residual: p.pick(&format!("{key}.mamba_residual"), &f.mamba_residual, &b.mamba_residual, true),
        ls_input: if ls_default { p.pick(&format!("{key}.ls_input"), &f.ls_input, &b.ls_input, true) } else { false },
    })
}

fn train_config(p: &mut Picker, key: &str, f: &TrainSection, b: &TrainSection) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch: p.pick(&format!("{key}.batch"), &f.batch, &b.batch, d.batch),
        lr: p.pick(&format!("{key}.lr"), &f.lr, &b.lr, d.lr),
        steps: p.pick(&format!("{key}.steps"), &f.steps, &b.steps, d.steps),
        seed: p.pick(&format!("{key}.seed"), &f.seed, &b.seed, d.seed),
        report_every: p.pick(&format!("{key}.report_every"), &f.report_every, &b.report_every, d.report_every),
        target_loss: f.target_loss.or(b.target_loss),
        target_ratio: f.target_ratio.or(b.target_ratio),
        oracle_positions: p.pick(&format!("{key}.oracle_positions"), &f.oracle_positions, &b.oracle_positions, false),
    };
    cfg.validate().map_err(|e| Error::Config(format!("{key}: {e}")))?;
    Ok(cfg)
}

impl RunConfig {
    /// Resolves a file against its preset and the built-in defaults.
    pub fn resolve(file: &RunConfigFile) -> Result<Self> {
        Self::resolve_with(file, None)
    }

    /// As [`RunConfig::resolve`]; a `preset` argument replaces the file's own.
    pub fn resolve_with(file: &RunConfigFile, preset_override: Option<&str>) -> Result<Self> {
        let name = preset_override.map(str::to_owned).or_else(|| file.preset.clone());
        let base = match &name {
            Some(n) => preset(n)?,
            None => RunConfigFile::default(),
        };
        let mut p = Picker { preset: name.as_deref(), notices: Vec::new() };
        let gen = gen_config(&mut p, &file.gen, &base.gen)?;
        let holdout = p.pick("data.holdout", &file.data.holdout, &base.data.holdout, 0.2);
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::Config(format!("data.holdout must lie in [0, 1), got {holdout}")));
        }
        let split_seed = p.pick("data.split_seed", &file.data.split_seed, &base.data.split_seed, 0);
        let pos_net = net_settings(&mut p, "pos_net", &file.pos_net, &base.pos_net, false)?;
        if file.pos_net.ls_input.is_some() {
            return Err(Error::Config("pos_net.ls_input only applies to the channel network".into()));
        }
        let ch_net = net_settings(&mut p, "ch_net", &file.ch_net, &base.ch_net, true)?;
        let pos_train = train_config(&mut p, "pos_train", &file.pos_train, &base.pos_train)?;
        let ch_train = train_config(&mut p, "ch_train", &file.ch_train, &base.ch_train)?;
        let e = &file.eval;
        let b = &base.eval;
        let eval = EvalSettings {
            snrs_db: p.pick("eval.snrs_db", &e.snrs_db, &b.snrs_db, vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0]),
            methods: p.pick("eval.methods", &e.methods, &b.methods, vec!["ls".into(), "grid".into(), "cpmamba".into()]),
            seed: p.pick("eval.seed", &e.seed, &b.seed, 0),
            grid_radii: p.pick("eval.grid_radii", &e.grid_radii, &b.grid_radii, 60),
            grid_angles: p.pick("eval.grid_angles", &e.grid_angles, &b.grid_angles, 90),
        };
        check_methods(&eval.methods)?;
        let notices = p.notices;
        Ok(Self { preset: name.clone(), gen, holdout, split_seed, pos_net, ch_net, pos_train, ch_train, eval, notices })
    }

    /// A file that resolves back to this configuration without any notices.
    pub fn to_file(&self) -> RunConfigFile {
        let g = &self.gen;
        let mut gen = GenSection::default();
        match g.array {
            ArrayKind::Ca { n } => {
                gen.array = Some("ca".into());
                gen.n = Some(n);
            }
            ArrayKind::Usa { n, eta } => {
                gen.array = Some("usa".into());
                gen.n = Some(n);
                gen.eta = Some(eta);
            }
            ArrayKind::Moa { modules, per_module, gamma } => {
                gen.array = Some("moa".into());
                gen.modules = Some(modules);
                gen.per_module = Some(per_module);
                gen.gamma = Some(gamma);
            }
            ArrayKind::Na { inner, outer } => {
                gen.array = Some("na".into());
                gen.inner = Some(inner);
                gen.outer = Some(outer);
            }
        }
        gen.carrier_hz = Some(g.carrier.f_c);
        gen.bandwidth_hz = Some(g.carrier.bandwidth);
        gen.subcarriers = Some(g.carrier.subcarriers);
        gen.path_loss_q = Some(g.carrier.path_loss_q);
        gen.slots = Some(g.slots);
        gen.n_rf = Some(g.n_rf);
        gen.clusters_min = Some(g.scene.clusters_min);
        gen.clusters_max = Some(g.scene.clusters_max);
        gen.scatterers = Some(g.scene.scatterers_per_cluster);
        gen.nlos_power = Some(g.scene.nlos_power);
        gen.snr_min_db = Some(g.snr_min_db);
        gen.snr_max_db = Some(g.snr_max_db);
        gen.noise = Some(g.noise);
        gen.per_sample_combiner = Some(g.per_sample_combiner);
        gen.samples = Some(g.samples);
        gen.seed = Some(g.seed);
        let net = |n: &NetSettings, ch: bool| NetSection {
            stages: Some(n.stages),
            c0: Some(n.c0),
            d_state: Some(n.d_state),
            d_tr: Some(n.d_tr.unwrap_or(0)),
            k_conv: Some(n.k_conv),
            raster: Some(match n.raster {
                Raster::RowMajor => "row".into(),
                Raster::ColumnMajor => "column".into(),
            }),
            mamba_residual: Some(n.mamba_residual),
            ls_input: ch.then_some(n.ls_input),
        };
        let train = |t: &TrainConfig| TrainSection {
            batch: Some(t.batch),
            lr: Some(t.lr),
            steps: Some(t.steps),
            seed: Some(t.seed),
            report_every: Some(t.report_every),
            target_loss: t.target_loss,
            target_ratio: t.target_ratio,
            oracle_positions: Some(t.oracle_positions),
        };
        RunConfigFile {
            preset: None,
            gen,
            data: DataSection { holdout: Some(self.holdout), split_seed: Some(self.split_seed) },
            pos_net: net(&self.pos_net, false),
            ch_net: net(&self.ch_net, true),
            pos_train: train(&self.pos_train),
            ch_train: train(&self.ch_train),
            eval: EvalSection {
                snrs_db: Some(self.eval.snrs_db.clone()),
                methods: Some(self.eval.methods.clone()),
                seed: Some(self.eval.seed),
                grid_radii: Some(self.eval.grid_radii),
                grid_angles: Some(self.eval.grid_angles),
            },
        }
    }
}

pub fn check_methods(methods: &[String]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::Config("method list is empty".into()));
    }
    for m in methods {
        if !METHODS.contains(&m.as_str()) {
            return Err(Error::Config(format!("unknown method {m:?}; known methods: {}", METHODS.join(", "))));
        }
    }
    Ok(())
}
