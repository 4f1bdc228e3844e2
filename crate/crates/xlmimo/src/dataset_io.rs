//! The XLMD dataset container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "XLMD" | version u32
//! config block   (fixed-order scalars, see `write_config`)
//! layout block   kind u8 | integer params u32.. | [eta f64 for USA] | d f64
//! combiner block slots u32 | n_rf u32 | n u32 | (re f32, im f32) row-major
//! count u64
//! records        seed u64 | r, theta, x, y, snr_db, sigma2 f64 | Y | h_los | h_nlos | h
//! ```
//!
//! Complex arrays are `[subcarrier][column]`, interleaved `f32` pairs.

use std::fs;
use std::path::Path;

use num_complex::Complex32;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use xlmimo_core::channel::{CarrierConfig, SceneConfig, UePosition};
use xlmimo_core::geometry::ArrayKind;
use xlmimo_core::sample::{Dataset, GenConfig, SampleGenerator, SampleRecord};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XLMD";
pub const VERSION: u32 = 1;

/// Generates `cfg.samples` records in parallel; the result equals the sequential one.
pub fn generate(cfg: GenConfig) -> Result<Dataset> {
    let generator = SampleGenerator::new(cfg)?;
    let records =
        (0..cfg.samples).into_par_iter().map(|i| generator.sample(i)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Dataset::from_parts(generator, records))
}

fn write_config(w: &mut Writer, c: &GenConfig) -> Result<()> {
    w.f64(c.spacing);
    w.f64(c.carrier.f_c);
    w.f64(c.carrier.bandwidth);
    w.len_u32(c.carrier.subcarriers)?;
    w.f64(c.carrier.path_loss_q);
    w.u32(c.scene.clusters_min);
    w.u32(c.scene.clusters_max);
    w.u32(c.scene.scatterers_per_cluster);
    for v in [c.scene.r_min, c.scene.r_max, c.scene.phi_min, c.scene.phi_max, c.scene.nlos_power] {
        w.f64(v);
    }
    w.u32(c.slots);
    w.u32(c.n_rf);
    for v in [c.r_min, c.r_max, c.theta_min, c.theta_max, c.snr_min_db, c.snr_max_db] {
        w.f64(v);
    }
    w.u8(c.noise.into());
    w.u8(c.per_sample_combiner.into());
    w.u64(c.samples);
    w.u64(c.seed);
    Ok(())
}

fn read_config(r: &mut Reader, array: ArrayKind) -> Result<GenConfig> {
    let spacing = r.f64("spacing")?;
    let carrier = CarrierConfig {
        f_c: r.f64("f_c")?,
        bandwidth: r.f64("bandwidth")?,
        subcarriers: r.u32("subcarriers")? as usize,
        path_loss_q: r.f64("path loss")?,
    };
    let scene = SceneConfig {
        clusters_min: r.u32("clusters")?,
        clusters_max: r.u32("clusters")?,
        scatterers_per_cluster: r.u32("scatterers")?,
        r_min: r.f64("scene")?,
        r_max: r.f64("scene")?,
        phi_min: r.f64("scene")?,
        phi_max: r.f64("scene")?,
        nlos_power: r.f64("scene")?,
    };
    Ok(GenConfig {
        array,
        spacing,
        carrier,
        scene,
        slots: r.u32("slots")?,
        n_rf: r.u32("n_rf")?,
        r_min: r.f64("ue range")?,
        r_max: r.f64("ue range")?,
        theta_min: r.f64("ue range")?,
        theta_max: r.f64("ue range")?,
        snr_min_db: r.f64("snr range")?,
        snr_max_db: r.f64("snr range")?,
        noise: r.bool("noise flag")?,
        per_sample_combiner: r.bool("combiner flag")?,
        samples: r.u64("sample count")?,
        seed: r.u64("seed")?,
    })
}

fn write_layout(w: &mut Writer, kind: ArrayKind, d: f64) {
    match kind {
        ArrayKind::Ca { n } => {
            w.u8(0);
            w.u32(n);
        }
        ArrayKind::Usa { n, eta } => {
            w.u8(1);
            w.u32(n);
            w.f64(eta);
        }
        ArrayKind::Moa { modules, per_module, gamma } => {
            w.u8(2);
            w.u32(modules);
            w.u32(per_module);
            w.u32(gamma);
        }
        ArrayKind::Na { inner, outer } => {
            w.u8(3);
            w.u32(inner);
            w.u32(outer);
        }
    }
    w.f64(d);
}

fn read_layout(r: &mut Reader) -> Result<(ArrayKind, f64)> {
    let kind = match r.u8("array kind")? {
        0 => ArrayKind::Ca { n: r.u32("array")? },
        1 => ArrayKind::Usa { n: r.u32("array")?, eta: r.f64("array")? },
        2 => ArrayKind::Moa { modules: r.u32("array")?, per_module: r.u32("array")?, gamma: r.u32("array")? },
        3 => ArrayKind::Na { inner: r.u32("array")?, outer: r.u32("array")? },
        t => return Err(Error::Dimension(format!("unknown array kind tag {t}"))),
    };
    Ok((kind, r.f64("array spacing")?))
}

/// Bytes of the configuration and layout blocks; hashing them identifies a [`GenConfig`].
pub fn config_bytes(cfg: &GenConfig) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    write_config(&mut w, cfg)?;
    write_layout(&mut w, cfg.array, cfg.spacing);
    Ok(w.buf)
}

/// Hex SHA-256 of [`config_bytes`].
pub fn config_hash(cfg: &GenConfig) -> Result<String> {
    Ok(hex_digest(&config_bytes(cfg)?))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn narrow(v: &[num_complex::Complex64]) -> Vec<Complex32> {
    v.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
}

/// Serializes a dataset.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    write_config(&mut w, &ds.config)?;
    write_layout(&mut w, ds.layout.kind(), ds.layout.spacing());
    let c = &ds.combiner;
    w.len_u32(c.slots())?;
    w.len_u32(c.n_rf())?;
    w.len_u32(c.n_antennas())?;
    w.complex(&narrow(c.stacked().data()));
    w.u64(ds.records.len() as u64);
    for rec in &ds.records {
        w.u64(rec.seed);
        for v in [rec.ue.r, rec.ue.theta, rec.ue.x, rec.ue.y, rec.snr_db, rec.sigma2] {
            w.f64(v);
        }
        w.complex(&rec.y);
        w.complex(&rec.h_los);
        w.complex(&rec.h_nlos);
        w.complex(&rec.h);
    }
    Ok(w.buf)
}

/// Parses a dataset, checking every header block against the stored configuration.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let mut cfg = read_config(&mut r, ArrayKind::Ca { n: 1 })?;
    let (kind, d) = read_layout(&mut r)?;
    if d.to_bits() != cfg.spacing.to_bits() {
        return Err(Error::Dimension(format!("layout spacing {d} disagrees with configured spacing {}", cfg.spacing)));
    }
    cfg.array = kind;
    let generator = SampleGenerator::new(cfg)?;

    let (slots, n_rf, n) = (r.u32("combiner")? as usize, r.u32("combiner")? as usize, r.u32("combiner")? as usize);
    let expected = generator.combiner();
    if (slots, n_rf, n) != (expected.slots(), expected.n_rf(), expected.n_antennas()) {
        return Err(Error::Dimension(format!(
            "combiner block is {slots}x{n_rf}x{n}, configuration implies {}x{}x{}",
            expected.slots(),
            expected.n_rf(),
            expected.n_antennas()
        )));
    }
    let stored = r.complex(slots * n_rf * n, "combiner block")?;
    if stored != narrow(expected.stacked().data()) {
        return Err(Error::Dimension("combiner block does not match the one drawn from the configuration".into()));
    }

    let count = r.u64("sample count")?;
    let (k, m) = (cfg.carrier.subcarriers, cfg.measurements());
    let record_bytes = 8 + 6 * 8 + 8 * (k * m + 3 * k * n);
    let needed = u128::from(count) * record_bytes as u128;
    if (r.remaining() as u128) < needed {
        return Err(Error::Truncated(format!("{count} records need {needed} bytes, {} present", r.remaining())));
    }
    if r.remaining() as u128 > needed {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {count} records",
            r.remaining() as u128 - needed
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let seed = r.u64("record")?;
        let mut s = [0.0; 6];
        for v in &mut s {
            *v = r.f64("record")?;
        }
        let rec = SampleRecord {
            seed,
            ue: UePosition { r: s[0], theta: s[1], x: s[2], y: s[3] },
            snr_db: s[4],
            sigma2: s[5],
            k,
            m,
            n,
            y: r.complex(k * m, "observation")?,
            h_los: r.complex(k * n, "LoS channel")?,
            h_nlos: r.complex(k * n, "NLoS channel")?,
            h: r.complex(k * n, "channel")?,
        };
        rec.validate().map_err(|e| Error::Dimension(e.to_string()))?;
        records.push(rec);
    }
    Ok(Dataset::from_parts(generator, records))
}

pub fn write(ds: &Dataset, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(ds)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
