//! The XLMW model checkpoint.
//!
//! ```text
//! magic "XLMW" | version u32
//! network block  stages, c0, in_ch, height, width u32 | head u8 | d_state u32
//!                | d_tr u32 (0 = automatic) | k_conv u32 | raster u8 | residual u8 | ls_gain u8
//! scales block   y, h_los, h, r_max f64
//! count u32, then per parameter:
//!                name_len u32 | name bytes | ndim u32 | dims u32.. | values f32..
//! ```
//!
//! Loading rebuilds the network from the stored block and then requires every
//! stored tensor to match a parameter of that network by name and shape.

use std::fs;
use std::path::Path;

use xlmimo_core::autodiff::Tensor;
use xlmimo_core::net::{HeadKind, NetConfig, Raster};
use xlmimo_core::pipeline::{Model, Scales};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"XLMW";
pub const VERSION: u32 = 1;

/// A trained network and the normalization it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub scales: Scales,
}

fn write_net(w: &mut Writer, c: &NetConfig) -> Result<()> {
    for v in [c.stages, c.c0, c.in_ch, c.height, c.width] {
        w.len_u32(v)?;
    }
    w.u8(match c.head {
        HeadKind::Position => 0,
        HeadKind::Channel => 1,
    });
    w.len_u32(c.d_state)?;
    w.len_u32(c.d_tr.unwrap_or(0))?;
    w.len_u32(c.k_conv)?;
    w.u8(match c.raster {
        Raster::RowMajor => 0,
        Raster::ColumnMajor => 1,
    });
    w.u8(c.mamba_residual.into());
    w.u8(c.ls_gain.into());
    Ok(())
}

fn read_net(r: &mut Reader) -> Result<NetConfig> {
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("network block")? as usize;
    }
    let head = match r.u8("head kind")? {
        0 => HeadKind::Position,
        1 => HeadKind::Channel,
        t => return Err(Error::Dimension(format!("unknown head kind tag {t}"))),
    };
    let mut c = NetConfig::new(head, dims[2], dims[3], dims[4]);
    c.stages = dims[0];
    c.c0 = dims[1];
    c.d_state = r.u32("d_state")? as usize;
    c.d_tr = match r.u32("d_tr")? {
        0 => None,
        v => Some(v as usize),
    };
    c.k_conv = r.u32("k_conv")? as usize;
    c.raster = match r.u8("raster")? {
        0 => Raster::RowMajor,
        1 => Raster::ColumnMajor,
        t => return Err(Error::Dimension(format!("unknown raster tag {t}"))),
    };
    c.mamba_residual = r.bool("residual flag")?;
    c.ls_gain = r.bool("ls_gain flag")?;
    Ok(c)
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    write_net(&mut w, ckpt.model.config())?;
    let s = &ckpt.scales;
    for v in [s.y, s.h_los, s.h, s.r_max] {
        w.f64(v);
    }
    w.len_u32(ckpt.model.params.len())?;
    for (name, t) in ckpt.model.params.iter() {
        w.len_u32(name.len())?;
        w.bytes(name.as_bytes());
        w.len_u32(t.shape().len())?;
        for &d in t.shape() {
            w.len_u32(d)?;
        }
        for &v in t.data() {
            w.f32(v);
        }
    }
    Ok(w.buf)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let config = read_net(&mut r)?;
    let scales = Scales { y: r.f64("scales")?, h_los: r.f64("scales")?, h: r.f64("scales")?, r_max: r.f64("scales")? };
    let mut model = Model::init(config, 0).map_err(|e| Error::Dimension(format!("stored network is invalid: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::Dimension(format!(
            "checkpoint holds {count} tensors, the stored network has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| Error::Dimension("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("shape")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Dimension("tensor too large".into()))?, &name)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Dimension(format!("network has no parameter named {name}")))?;
        if seen[id.index()] {
            return Err(Error::Dimension(format!("parameter {name} stored twice")));
        }
        seen[id.index()] = true;
        let t = Tensor::new(&shape, values)?;
        model.params.set(&name, t).map_err(|e| Error::Dimension(e.to_string()))?;
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint { model, scales })
}

pub fn write(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
