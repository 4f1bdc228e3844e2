//! U-shaped convolutional network with selective state-space layers.
//!
//! Encoder block 1 is two same-padded 3x3 conv+silu layers. Blocks 2..S
//! halve the resolution with a stride-2 conv, apply a second conv, then run a
//! Mamba layer over the feature map flattened to a `[H·W, C]` sequence. The
//! decoder mirrors the encoder with nearest-neighbour upsampling, skip
//! concatenation and two conv+silu layers per block.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Global mean pool and an affine map to two coordinates.
    Position,
    /// 1x1 conv to two planes (real and imaginary part).
    Channel,
}

/// Order in which a feature map is flattened into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Raster {
    /// Row (subcarrier) outer, column inner.
    RowMajor,
    /// Column outer, row inner.
    ColumnMajor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub stages: usize,
    pub c0: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub head: HeadKind,
    pub d_state: usize,
    /// Rank of the step-size projection; `None` uses `ceil(width/16)`.
    pub d_tr: Option<usize>,
    pub k_conv: usize,
    pub raster: Raster,
    /// Adds the Mamba input back onto its output inside encoder blocks.
    pub mamba_residual: bool,
    /// Channel head only: adds a learned multiple of input planes 4 and 5 to the output.
    pub ls_gain: bool,
}

impl NetConfig {
    pub fn new(head: HeadKind, in_ch: usize, height: usize, width: usize) -> Self {
        Self {
            stages: 4,
            c0: 16,
            in_ch,
            height,
            width,
            head,
            d_state: 16,
            d_tr: None,
            k_conv: 4,
            raster: Raster::RowMajor,
            mamba_residual: true,
            ls_gain: false,
        }
    }

    pub fn width_at(&self, stage: usize) -> usize {
        self.c0 << stage
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.stages < 2 {
            return bad(format!("stages must be >= 2, got {}", self.stages));
        }
        if self.c0 == 0 || self.in_ch == 0 || self.d_state == 0 || self.k_conv == 0 || self.d_tr == Some(0) {
            return bad(format!("zero-sized network dimension in {self:?}"));
        }
        let div = 1usize << (self.stages - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return bad(format!(
                "input {}x{} not divisible by 2^{} for {} stages",
                self.height,
                self.width,
                self.stages - 1,
                self.stages
            ));
        }
        if self.ls_gain && (self.head != HeadKind::Channel || self.in_ch < 6) {
            return bad("ls_gain needs a channel head with at least 6 input planes".into());
        }
        Ok(())
    }

    fn mamba_config(&self, width: usize) -> MambaConfig {
        let mut m = MambaConfig::new(width);
        m.d_state = self.d_state;
        m.k_conv = self.k_conv;
        if let Some(r) = self.d_tr {
            m.d_tr = r;
        }
        m
    }

    /// Exact number of learned scalars.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let mut total = conv(self.in_ch, self.c0, 3) + conv(self.c0, self.c0, 3);
        for i in 1..self.stages {
            let (ci, co) = (self.width_at(i - 1), self.width_at(i));
            total += conv(ci, co, 3) + conv(co, co, 3) + self.mamba_config(co).param_count();
            total += conv(co + ci, ci, 3) + conv(ci, ci, 3);
        }
        total
            + match self.head {
                HeadKind::Position => self.c0 * 2 + 2,
                HeadKind::Channel => conv(self.c0, 2, 1) + usize::from(self.ls_gain),
            }
    }

    /// Multiply-add count of one forward pass.
    ///
    /// Convs count `2·C_in·kh·kw` per output element, matmuls `2mkn`, Mamba
    /// layers as in [`MambaConfig::flops`]. Biases, activations, pooling,
    /// upsampling and residual adds are not counted.
    pub fn flop_estimate(&self) -> u64 {
        let conv = |ci: usize, co: usize, k: usize, hw: usize| 2 * (ci * k * k * co * hw) as u64;
        let hw0 = self.height * self.width;
        let mut total = conv(self.in_ch, self.c0, 3, hw0) + conv(self.c0, self.c0, 3, hw0);
        for i in 1..self.stages {
            let (ci, co) = (self.width_at(i - 1), self.width_at(i));
            let hw = hw0 >> (2 * i);
            let hw_up = hw0 >> (2 * (i - 1));
            total += conv(ci, co, 3, hw) + conv(co, co, 3, hw) + self.mamba_config(co).flops(hw);
            total += conv(co + ci, ci, 3, hw_up) + conv(ci, ci, 3, hw_up);
        }
        total
            + match self.head {
                HeadKind::Position => 2 * (self.c0 * 2) as u64,
                HeadKind::Channel => conv(self.c0, 2, 1, hw0),
            }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new<T: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = ci * k * k;
        let w = store.add_uniform(&format!("{name}.w"), &[co, ci, k, k], fan_in, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[co], fan_in, rng)?;
        Ok(Self { w, b, stride })
    }

    fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, ci: usize, co: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[co, ci, 1, 1]))?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[co]))?;
        Ok(Self { w, b, stride: 1 })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride)
    }

    fn apply_silu<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        Ok(tape.silu(y))
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: Conv,
    conv2: Conv,
    mamba: Option<MambaBlock>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
enum Head {
    Position { w: ParamId, b: ParamId },
    Channel { conv: Conv, ls_gain: Option<ParamId> },
}

/// Parameter layout of a network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CpMamba {
    config: NetConfig,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Head,
}

impl CpMamba {
    /// Builds the network and draws its initial parameters from `seed`.
    ///
    /// Final layers start at zero, so a fresh position head outputs the
    /// origin and a fresh channel head outputs zero planes.
    pub fn init<T: Real>(config: NetConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let rng = &mut rng_from_seed(seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.stages);
        encoder.push(EncoderBlock {
            conv1: Conv::new(&mut store, "enc.0.conv1", config.in_ch, config.c0, 3, 1, rng)?,
            conv2: Conv::new(&mut store, "enc.0.conv2", config.c0, config.c0, 3, 1, rng)?,
            mamba: None,
        });
        for i in 1..config.stages {
            let (ci, co) = (config.width_at(i - 1), config.width_at(i));
            encoder.push(EncoderBlock {
                conv1: Conv::new(&mut store, &format!("enc.{i}.conv1"), ci, co, 3, 2, rng)?,
                conv2: Conv::new(&mut store, &format!("enc.{i}.conv2"), co, co, 3, 1, rng)?,
                mamba: Some(MambaBlock::new(config.mamba_config(co), &format!("mamba.{}", i - 1), &mut store, rng)?),
            });
        }
        let mut decoder = Vec::with_capacity(config.stages - 1);
        for i in (1..config.stages).rev() {
            let (ci, co) = (config.width_at(i - 1), config.width_at(i));
            decoder.push(DecoderBlock {
                conv1: Conv::new(&mut store, &format!("dec.{i}.conv1"), co + ci, ci, 3, 1, rng)?,
                conv2: Conv::new(&mut store, &format!("dec.{i}.conv2"), ci, ci, 3, 1, rng)?,
            });
        }
        let head = match config.head {
            HeadKind::Position => Head::Position {
                w: store.add("head.w", Tensor::zeros(&[config.c0, 2]))?,
                b: store.add("head.b", Tensor::zeros(&[2]))?,
            },
            HeadKind::Channel => Head::Channel {
                conv: Conv::zeroed(&mut store, "head", config.c0, 2)?,
                ls_gain: if config.ls_gain { Some(store.add("head.ls_gain", Tensor::zeros(&[1]))?) } else { None },
            },
        };
        Ok((Self { config, encoder, decoder, head }, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// `[in_ch, H, W]` to `[2]` (position head) or `[2, H, W]` (channel head).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, input: Var) -> Result<Var> {
        let c = &self.config;
        if tape.shape(input) != [c.in_ch, c.height, c.width] {
            return Err(Error::Shape {
                op: "cp_mamba",
                detail: format!("expected [{}, {}, {}], got {:?}", c.in_ch, c.height, c.width, tape.shape(input)),
            });
        }
        let mut skips = Vec::with_capacity(c.stages);
        let mut x = input;
        for block in &self.encoder {
            x = block.conv1.apply_silu(tape, p, x)?;
            x = block.conv2.apply_silu(tape, p, x)?;
            if let Some(m) = &block.mamba {
                x = self.sequence_layer(tape, p, m, x)?;
            }
            skips.push(x);
        }
        skips.pop();
        for block in &self.decoder {
            let up = tape.upsample2x(x)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = tape.concat(&[up, skip], 0)?;
            x = block.conv1.apply_silu(tape, p, cat)?;
            x = block.conv2.apply_silu(tape, p, x)?;
        }
        match &self.head {
            Head::Position { w, b } => {
                let pooled = tape.mean_pool_global(x)?;
                let row = tape.reshape(pooled, &[1, c.c0])?;
                let out = tape.matmul(row, p.var(*w))?;
                let out = tape.reshape(out, &[2])?;
                tape.add(out, p.var(*b))
            }
            Head::Channel { conv, ls_gain } => {
                let out = conv.apply(tape, p, x)?;
                let Some(g) = ls_gain else { return Ok(out) };
                let ls = tape.narrow(input, 0, 4, 2)?;
                let ls = tape.reshape(ls, &[2 * c.height * c.width, 1])?;
                let scaled = tape.mul(ls, p.var(*g))?;
                let scaled = tape.reshape(scaled, &[2, c.height, c.width])?;
                tape.add(out, scaled)
            }
        }
    }

    /// Flattens `[C, H, W]` to a `[H·W, C]` sequence, applies `m`, restores the layout.
    fn sequence_layer<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, m: &MambaBlock, x: Var) -> Result<Var> {
        let (ch, h, w) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2])
        };
        let planar = match self.config.raster {
            Raster::RowMajor => x,
            Raster::ColumnMajor => tape.swap_hw(x)?,
        };
        let flat = tape.reshape(planar, &[ch, h * w])?;
        let seq = tape.transpose(flat)?;
        let y = m.forward(tape, p, seq)?;
        let y = tape.transpose(y)?;
        let y = match self.config.raster {
            Raster::RowMajor => tape.reshape(y, &[ch, h, w])?,
            Raster::ColumnMajor => {
                let y = tape.reshape(y, &[ch, w, h])?;
                tape.swap_hw(y)?
            }
        };
        if self.config.mamba_residual {
            tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}
