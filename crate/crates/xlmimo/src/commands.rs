//! The `gen`, `train`, `eval` and `plot` commands as library calls.
//!
//! Each command takes a resolved [`RunConfig`] and explicit paths, writes its
//! artifacts, and reports progress to a caller-supplied sink.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use xlmimo_core::baselines::{Grid, GridSearch};
use xlmimo_core::pipeline::{
    channel_net_config, position_net_config, train_stage1, train_stage2, Model, Scales, SystemModel, TrainReport,
    TwoStage,
};
use xlmimo_core::sample::{split_indices, Dataset, SampleRecord};
use xlmimo_core::sweep::{
    assemble, evaluate_sample, noise_seed, Estimator, LsEstimator, Oracle, OraclePrior, ReportRow,
};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{check_methods, RunConfig, RunConfigFile};
use crate::dataset_io;
use crate::error::{Error, Result};
use crate::report;

/// Loads a run file (if any) and resolves it against a preset.
pub fn load_config(path: Option<&Path>, preset: Option<&str>) -> Result<RunConfig> {
    let file = match path {
        Some(p) => RunConfigFile::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfigFile::default(),
    };
    RunConfig::resolve_with(&file, preset)
}

/// `out` with its extension replaced by `suffix` (which includes the dot).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn say(log: &mut dyn Write, msg: &str) {
    let _ = writeln!(log, "{msg}");
}

/// Text manifest: what ran, identifying hashes, and the resolved configuration.
pub fn manifest(command: &str, cfg: &RunConfig, facts: &[(&str, String)]) -> String {
    let mut s = format!("# xlmimo run manifest\ncommand = {command}\n");
    for (k, v) in facts {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str("\n# resolved configuration\n");
    s.push_str(&cfg.to_file().to_toml());
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub config_hash: String,
    pub file_hash: String,
    pub samples: usize,
}

pub fn gen(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<GenSummary> {
    let g = &cfg.gen;
    let layout = g.layout()?;
    let config_hash = dataset_io::config_hash(g)?;
    say(log, &format!("config hash {config_hash}"));
    say(
        log,
        &format!(
            "{} array: {} elements, aperture {:.4} m ({:.0} d), K={} subcarriers, M={} measurements",
            g.array.label(),
            layout.n_elements(),
            layout.aperture(),
            layout.aperture() / layout.spacing(),
            g.carrier.subcarriers,
            g.measurements()
        ),
    );
    if g.scene.is_los_only() {
        say(log, "scene: pure LoS (no scattering clusters)");
    }
    let ds = dataset_io::generate(*g)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = dataset_io::write(&ds, out)?;
    let file_hash = dataset_io::hex_digest(&bytes);
    say(log, &format!("wrote {} samples to {} (sha256 {file_hash})", ds.len(), out.display()));
    let facts =
        [("config_hash", config_hash.clone()), ("file_sha256", file_hash.clone()), ("seed", g.seed.to_string())];
    write_text(&sibling(out, ".manifest.txt"), &manifest("gen", cfg, &facts))?;
    Ok(GenSummary { config_hash, file_hash, samples: ds.len() })
}

/// Train and held-out partitions of a dataset, as fixed by the `data` section.
pub fn partition(ds: &Dataset, cfg: &RunConfig) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if cfg.holdout == 0.0 {
        return Ok((ds.records.clone(), ds.records.clone()));
    }
    let [train, _, test] = split_indices(ds.len(), [1.0 - cfg.holdout, 0.0, cfg.holdout], cfg.split_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train), pick(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pos,
    Ch,
}

pub fn train(
    cfg: &RunConfig,
    data: &Path,
    stage: Stage,
    pos_ckpt: Option<&Path>,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if stage == Stage::Ch && pos_ckpt.is_none() {
        return Err(Error::Config("--stage ch needs the positioning checkpoint given by --pos-ckpt".into()));
    }
    let ds = dataset_io::read(data)?;
    let system = SystemModel::from_dataset(&ds)?;
    let (records, _) = partition(&ds, cfg)?;
    if records.is_empty() {
        return Err(Error::Config("training partition is empty".into()));
    }
    let (report, ckpt, tcfg) = match stage {
        Stage::Pos => {
            let tcfg = cfg.pos_train;
            let scales = Scales::from_records(&records, system.r_max)?;
            let mut model = Model::init(cfg.pos_net.apply(position_net_config(&system)), tcfg.seed)?;
            say(
                log,
                &format!("stage 1: {} parameters, {} training samples", model.config().param_count(), records.len()),
            );
            let report = train_stage1(&mut model, &records, &system, &scales, &tcfg)?;
            (report, Checkpoint { model, scales }, tcfg)
        }
        Stage::Ch => {
            let stage1 = checkpoint::read(pos_ckpt.expect("checked above"))?;
            let tcfg = cfg.ch_train;
            let mut model = Model::init(cfg.ch_net.apply(channel_net_config(&system, cfg.ch_net.ls_input)), tcfg.seed)?;
            // Fails early if the positioning network does not fit this data.
            TwoStage::new(system.clone(), stage1.scales, stage1.model.clone(), Some(model.clone()))?;
            say(
                log,
                &format!("stage 2: {} parameters, {} training samples", model.config().param_count(), records.len()),
            );
            let report = train_stage2(&mut model, &stage1.model, &records, &system, &stage1.scales, &tcfg)?;
            (report, Checkpoint { model, scales: stage1.scales }, tcfg)
        }
    };
    say(log, &format!("{} steps, final batch loss {:.6e}", report.steps_run, report.final_loss));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::write(&ckpt, out)?;
    write_text(&sibling(out, ".loss.csv"), &report::loss_csv(&report))?;
    let data_hash = dataset_io::hex_digest(&fs::read(data).map_err(|e| Error::io(data, e))?);
    let facts = [
        ("stage", format!("{stage:?}").to_lowercase()),
        ("dataset", data.display().to_string()),
        ("dataset_sha256", data_hash),
        ("config_hash", dataset_io::config_hash(&ds.config)?),
        ("train_seed", tcfg.seed.to_string()),
        ("split_seed", cfg.split_seed.to_string()),
        ("steps_run", report.steps_run.to_string()),
    ];
    write_text(&sibling(out, ".manifest.txt"), &manifest("train", cfg, &facts))?;
    Ok(report)
}

/// Runs the sweep with samples scored in parallel and reduced in index order.
pub fn sweep_parallel(
    records: &[SampleRecord],
    system: &SystemModel,
    methods: &[&dyn Estimator],
    snrs_db: &[f64],
    seed: u64,
) -> Result<Vec<ReportRow>> {
    if records.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut outcomes = Vec::with_capacity(snrs_db.len());
    for (s, &snr) in snrs_db.iter().enumerate() {
        let per_sample = records
            .par_iter()
            .enumerate()
            .map(|(i, r)| evaluate_sample(methods, r, system, snr, noise_seed(seed, s, i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        outcomes.push(per_sample);
    }
    Ok(assemble(methods, snrs_db, &outcomes)?)
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    pos_ckpt: Option<&Path>,
    ch_ckpt: Option<&Path>,
    out: &Path,
    log: &mut dyn Write,
) -> Result<Vec<ReportRow>> {
    let e = &cfg.eval;
    check_methods(&e.methods)?;
    let ds = dataset_io::read(data)?;
    let system = SystemModel::from_dataset(&ds)?;
    let (_, test) = partition(&ds, cfg)?;
    let needs = |m: &str| e.methods.iter().any(|x| x == m);

    let ls = if needs("ls") { Some(LsEstimator::new(&system)?) } else { None };
    let grid = if needs("grid") {
        let g = Grid::log_polar(system.r_min, system.r_max, e.grid_radii, -PI / 2.0, 0.0, e.grid_angles);
        Some(GridSearch::new(g, &system.layout, &system.carrier, &system.combiner)?)
    } else {
        None
    };
    let pipeline = if needs("cpmamba") || needs("cpmamba-oracle-pos") {
        let p = pos_ckpt.ok_or_else(|| Error::Config("cpmamba methods need --pos-ckpt".into()))?;
        let stage1 = checkpoint::read(p)?;
        let stage2 = match ch_ckpt {
            Some(c) => {
                let ck = checkpoint::read(c)?;
                if ck.scales != stage1.scales {
                    return Err(Error::Config("the two checkpoints were trained with different normalization".into()));
                }
                Some(ck.model)
            }
            None if needs("cpmamba-oracle-pos") => {
                return Err(Error::Config("cpmamba-oracle-pos needs --ch-ckpt".into()));
            }
            None => {
                say(log, "no --ch-ckpt given: cpmamba reports the LoS prior as its channel estimate");
                None
            }
        };
        Some(TwoStage::new(system.clone(), stage1.scales, stage1.model, stage2)?)
    } else {
        None
    };
    let oracle_prior = pipeline.as_ref().map(OraclePrior);

    let mut methods: Vec<&dyn Estimator> = Vec::new();
    for m in &e.methods {
        methods.push(match m.as_str() {
            "oracle" => &Oracle,
            "ls" => ls.as_ref().expect("built above"),
            "grid" => grid.as_ref().expect("built above"),
            "cpmamba" => pipeline.as_ref().expect("built above"),
            "cpmamba-oracle-pos" => oracle_prior.as_ref().expect("built above"),
            other => unreachable!("method {other} passed validation"),
        });
    }
    say(log, &format!("evaluating {} methods at {} SNRs on {} samples", methods.len(), e.snrs_db.len(), test.len()));
    let rows = sweep_parallel(&test, &system, &methods, &e.snrs_db, e.seed)?;
    write_text(out, &report::metrics_csv(&rows))?;
    let facts = [
        ("dataset", data.display().to_string()),
        ("config_hash", dataset_io::config_hash(&ds.config)?),
        ("eval_seed", e.seed.to_string()),
        ("split_seed", cfg.split_seed.to_string()),
    ];
    write_text(&sibling(out, ".manifest.txt"), &manifest("eval", cfg, &facts))?;
    Ok(rows)
}

pub fn plot(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let rows = report::parse_metrics_csv(&text)?;
    write_text(out, &report::svg_plot(&rows)?)
}
