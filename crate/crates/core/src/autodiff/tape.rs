//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops whose
//! inputs require gradients are recorded; [`Tape::backward`] then walks the
//! record in exact reverse order, accumulating adjoints additively.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Scale(Var, T),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    DwConv1d { input: Var, weight: Var, bias: Option<Var> },
    Upsample2x(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    MeanPool(Var),
    Mse(Var, Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SwapHw(Var),
    Narrow { input: Var, axis: usize, start: usize },
    SelectiveScan { x: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<T>, decay: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn dims(shape: &[usize]) -> alloc::string::String {
    format!("{shape:?}")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = {
            let t = &self.nodes[x.0].value;
            Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
        };
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{} cannot broadcast {}", dims(sa), dims(sb))));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let value = {
            let ta = &self.nodes[a.0].value;
            let tb = self.nodes[b.0].value.data();
            let inner = tb.len();
            let data =
                ta.data().chunks(inner.max(1)).flat_map(|blk| blk.iter().zip(tb).map(|(&x, &y)| f(x, y))).collect();
            Tensor::new(ta.shape(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a + b`, with `b` broadcast over the leading extents of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * kernels::sigmoid(v))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{} x {}", dims(sa), dims(sb))));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Same-padded 2-D convolution of `input[c_in,h,w]` with `weight[c_out,c_in,kh,kw]`.
    ///
    /// Kernels must have odd extents; stride 1 preserves `h x w`, stride `s`
    /// keeps every `s`-th output of the stride-1 result.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] || sw[2] % 2 == 0 || sw[3] % 2 == 0 || stride == 0 {
            return Err(shape_err("conv2d", format!("input {} weight {} stride {stride}", dims(si), dims(sw))));
        }
        let c_out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {} for {c_out} output channels", dims(self.shape(b)))));
            }
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], sw[2], sw[3], stride);
        let p = geom.out_len();
        let mut cols = vec![T::zero(); geom.patch_len() * p];
        im2col(&geom, self.value(input).data(), &mut cols);
        let mut out = vec![T::zero(); c_out * p];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        gemm_nn(c_out, geom.patch_len(), p, self.value(weight).data(), &cols, &mut out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&[c_out, geom.out_h, geom.out_w], out)?, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Causal depthwise convolution: `out[d,t] = b[d] + Σ_j w[d,j] x[d, t-(k-1)+j]`.
    pub fn depthwise_conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 2 || sw.len() != 2 || si[0] != sw[0] || sw[1] == 0 {
            return Err(shape_err("depthwise_conv1d", format!("input {} kernel {}", dims(si), dims(sw))));
        }
        let (d, l, k) = (si[0], si[1], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(shape_err("depthwise_conv1d", format!("bias {} for {d} channels", dims(self.shape(b)))));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); d * l];
        for c in 0..d {
            let xr = &x[c * l..(c + 1) * l];
            let wr = &w[c * k..(c + 1) * k];
            let b = bias.map_or(T::zero(), |b| self.value(b).data()[c]);
            for (t, o) in out[c * l..(c + 1) * l].iter_mut().enumerate() {
                let mut acc = b;
                for (j, &wj) in wr.iter().enumerate() {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc += wj * xr[src];
                    }
                }
                *o = acc;
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&[d, l], out)?, Op::DwConv1d { input, weight, bias }, rg))
    }

    /// Nearest-neighbour upsampling `[c,h,w] -> [c,2h,2w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("expected [c,h,w], got {}", dims(s))));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                let src_row = &src[(ch * h + y / 2) * w..][..w];
                let dst = &mut out[(ch * 2 * h + y) * 2 * w..][..2 * w];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src_row[xx / 2];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", format!("{} vs {} along axis {axis}", dims(s), dims(&base))));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Global average over the spatial extents: `[c,h,w] -> [c]`.
    pub fn mean_pool_global(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("mean_pool_global", format!("expected [c,h,w], got {}", dims(s))));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let scale = T::one() / T::from_f64(hw as f64);
        let out = self.value(x).data().chunks(hw).map(|p| kernels::sum(p) * scale).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::MeanPool(x), rg))
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", format!("{} vs {}", dims(self.shape(a)), dims(self.shape(b)))));
        }
        let diff: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let n = T::from_f64(diff.len().max(1) as f64);
        let v = kernels::dot(&diff, &diff) / n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Sum of all entries, a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = kernels::sum(self.value(x).data());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected rank 2, got {}", dims(s))));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose2d(r, c, self.value(x).data());
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    /// `[c,h,w] -> [c,w,h]`.
    pub fn swap_hw(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("swap_hw", format!("expected [c,h,w], got {}", dims(s))));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = self.value(x).data().chunks(h * w).flat_map(|p| transpose2d(h, w, p)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c, w, h], out)?, Op::SwapHw(x), rg))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", format!("{start}..{} of axis {axis} in {}", start + len, dims(&s))));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { input: x, axis, start }, rg))
    }

    /// Discretized selective scan over a sequence.
    ///
    /// Shapes: `x[L,D]`, `delta[L,D]` (positive steps), `a[D,N]`, `b[L,N]`,
    /// `c[L,N]`. Per channel `d`, starting from `s = 0`:
    /// `s_t = exp(Δ_t a_d) ⊙ s_{t-1} + Δ_t b_t x_t`, `y_t = ⟨c_t, s_t⟩`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (sx, sd, sa, sb, sc) = (self.shape(x), self.shape(delta), self.shape(a), self.shape(b), self.shape(c));
        let ok = sx.len() == 2
            && sd == sx
            && sa.len() == 2
            && sa[0] == sx[1]
            && sb.len() == 2
            && sb[0] == sx[0]
            && sb[1] == sa[1]
            && sc == sb;
        if !ok {
            return Err(shape_err(
                "selective_scan",
                format!("x {} delta {} a {} b {} c {}", dims(sx), dims(sd), dims(sa), dims(sb), dims(sc)),
            ));
        }
        let (l, d, n) = (sx[0], sx[1], sa[1]);
        let xv = self.value(x).data();
        let dv = self.value(delta).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let cv = self.value(c).data();
        let mut states = vec![T::zero(); l * d * n];
        let mut decay = vec![T::zero(); l * d * n];
        let mut y = vec![T::zero(); l * d];
        let mut s = vec![T::zero(); d * n];
        for t in 0..l {
            let bt = &bv[t * n..(t + 1) * n];
            let ct = &cv[t * n..(t + 1) * n];
            for ch in 0..d {
                let dt = dv[t * d + ch];
                let u = dt * xv[t * d + ch];
                let sd = &mut s[ch * n..(ch + 1) * n];
                let dec = &mut decay[(t * d + ch) * n..][..n];
                for j in 0..n {
                    let e = (dt * av[ch * n + j]).exp();
                    dec[j] = e;
                    sd[j] = e * sd[j] + bt[j] * u;
                }
                y[t * d + ch] = kernels::dot(ct, sd);
            }
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&s);
        }
        let rg = self.any_grad(&[x, delta, a, b, c]);
        let (states, decay) = if rg { (states, decay) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(Tensor::new(&[l, d], y)?, Op::SelectiveScan { x, delta, a, b, c, states, decay }, rg))
    }

    /// Populates gradients of `loss` with respect to every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&mut self, v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = Tensor::new(self.shape(v), data).expect("adjoint matches value shape");
        self.accumulate(v, g);
    }

    fn reduce_leading(g: &[T], inner: usize) -> Vec<T> {
        let mut out = vec![T::zero(); inner];
        for blk in g.chunks(inner.max(1)) {
            for (o, v) in out.iter_mut().zip(blk) {
                *o += *v;
            }
        }
        out
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let gd = g.data();
        // Split the borrow: the op is read while gradients of earlier nodes are written.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, gd, self.value(*b).data(), &mut ga);
                    self.accumulate_data(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, self.value(*a).data(), gd, &mut gb);
                    self.accumulate_data(*b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.accumulate_data(*a, gd.to_vec());
                if self.requires_grad(*b) {
                    let mut gb = Self::reduce_leading(gd, self.value(*b).numel());
                    gb.iter_mut().for_each(|v| *v *= sign);
                    self.accumulate_data(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let inner = self.value(*b).numel().max(1);
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = gd.chunks(inner).flat_map(|blk| blk.iter().zip(bv).map(|(&x, &y)| x * y)).collect();
                    self.accumulate_data(*a, ga);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    let gb = Self::reduce_leading(&prod, inner);
                    self.accumulate_data(*b, gb);
                }
            }
            Op::Exp(x) => {
                let out = self.nodes[i].value.data();
                let gx = gd.iter().zip(out).map(|(&g, &y)| g * y).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[i].value.data();
                let gx = gd.iter().zip(out).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Softplus(x) => {
                let gx = gd.iter().zip(self.value(*x).data()).map(|(&g, &v)| g * kernels::sigmoid(v)).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Silu(x) => {
                let gx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate_data(*x, gx);
            }
            Op::Scale(x, c) => {
                let gx = gd.iter().map(|&g| g * *c).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let c_out = self.shape(*weight)[0];
                let p = geom.out_len();
                let kk = geom.patch_len();
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let gb = gd.chunks(p).map(kernels::sum).collect();
                        self.accumulate_data(*b, gb);
                    }
                }
                if self.requires_grad(*weight) {
                    let mut cols = vec![T::zero(); kk * p];
                    im2col(geom, self.value(*input).data(), &mut cols);
                    let mut gw = vec![T::zero(); c_out * kk];
                    gemm_nt(c_out, p, kk, gd, &cols, &mut gw);
                    self.accumulate_data(*weight, gw);
                }
                if self.requires_grad(*input) {
                    let mut gcols = vec![T::zero(); kk * p];
                    gemm_tn(kk, c_out, p, self.value(*weight).data(), gd, &mut gcols);
                    let mut gx = vec![T::zero(); geom.c_in * geom.h * geom.w];
                    col2im(geom, &gcols, &mut gx);
                    self.accumulate_data(*input, gx);
                }
            }
            Op::DwConv1d { input, weight, bias } => {
                let (d, l) = (self.shape(*input)[0], self.shape(*input)[1]);
                let k = self.shape(*weight)[1];
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let gb = gd.chunks(l).map(kernels::sum).collect();
                        self.accumulate_data(*b, gb);
                    }
                }
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let mut gx = vec![T::zero(); d * l];
                let mut gw = vec![T::zero(); d * k];
                for c in 0..d {
                    for t in 0..l {
                        let go = gd[c * l + t];
                        for j in 0..k {
                            if let Some(src) = (t + j).checked_sub(k - 1) {
                                gx[c * l + src] += go * w[c * k + j];
                                gw[c * k + j] += go * x[c * l + src];
                            }
                        }
                    }
                }
                self.accumulate_data(*input, gx);
                self.accumulate_data(*weight, gw);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        let src = &gd[(ch * 2 * h + y) * 2 * w..][..2 * w];
                        let dst = &mut gx[(ch * h + y / 2) * w..][..w];
                        for (xx, &v) in src.iter().enumerate() {
                            dst[xx / 2] += v;
                        }
                    }
                }
                self.accumulate_data(*x, gx);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if self.requires_grad(*v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&gd[o * row + offset..o * row + offset + len]);
                        }
                        self.accumulate_data(*v, gv);
                    }
                    offset += len;
                }
            }
            Op::MeanPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let scale = T::one() / T::from_f64(hw as f64);
                let gx = gd.iter().flat_map(|&g| core::iter::repeat_n(g * scale, hw)).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(self.value(*a).numel().max(1) as f64);
                let coef = gd[0] * T::from_f64(2.0) / n;
                let diff: Vec<T> =
                    self.value(*a).data().iter().zip(self.value(*b).data()).map(|(&x, &y)| (x - y) * coef).collect();
                if self.requires_grad(*b) {
                    self.accumulate_data(*b, diff.iter().map(|&v| -v).collect());
                }
                self.accumulate_data(*a, diff);
            }
            Op::Sum(x) => {
                let gx = vec![gd[0]; self.value(*x).numel()];
                self.accumulate_data(*x, gx);
            }
            Op::Reshape(x) => self.accumulate_data(*x, gd.to_vec()),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let gx = transpose2d(s[1], s[0], gd);
                self.accumulate_data(*x, gx);
            }
            Op::SwapHw(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[1], s[2]);
                let gx = gd.chunks(h * w).flat_map(|p| transpose2d(w, h, p)).collect();
                self.accumulate_data(*x, gx);
            }
            Op::Narrow { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate_data(*input, gx);
            }
            Op::SelectiveScan { x, delta, a, b, c, states, decay } => {
                let (l, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*a)[1];
                let xv = self.value(*x).data();
                let dv = self.value(*delta).data();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cv = self.value(*c).data();
                let mut gx = vec![T::zero(); l * d];
                let mut gdelta = vec![T::zero(); l * d];
                let mut ga = vec![T::zero(); d * n];
                let mut gb = vec![T::zero(); l * n];
                let mut gc = vec![T::zero(); l * n];
                // adjoint of s_t carried backwards through the decay
                let mut gs = vec![T::zero(); d * n];
                for t in (0..l).rev() {
                    let bt = &bv[t * n..(t + 1) * n];
                    let ct = &cv[t * n..(t + 1) * n];
                    let st = &states[t * d * n..(t + 1) * d * n];
                    for ch in 0..d {
                        let gy = gd[t * d + ch];
                        let dt = dv[t * d + ch];
                        let xt = xv[t * d + ch];
                        let dec = &decay[(t * d + ch) * n..][..n];
                        let mut g_dt = T::zero();
                        let mut g_x = T::zero();
                        for j in 0..n {
                            let s_now = st[ch * n + j];
                            let s_prev = if t > 0 { states[((t - 1) * d + ch) * n + j] } else { T::zero() };
                            let gsj = gs[ch * n + j] + ct[j] * gy;
                            gc[t * n + j] += gy * s_now;
                            let carried = dec[j] * s_prev;
                            g_dt += gsj * (av[ch * n + j] * carried + bt[j] * xt);
                            ga[ch * n + j] += gsj * dt * carried;
                            gb[t * n + j] += gsj * dt * xt;
                            g_x += gsj * dt * bt[j];
                            gs[ch * n + j] = gsj * dec[j];
                        }
                        gdelta[t * d + ch] = g_dt;
                        gx[t * d + ch] = g_x;
                    }
                }
                self.accumulate_data(*x, gx);
                self.accumulate_data(*delta, gdelta);
                self.accumulate_data(*a, ga);
                self.accumulate_data(*b, gb);
                self.accumulate_data(*c, gc);
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

pub(crate) fn transpose2d<T: Copy>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        out.extend((0..rows).map(|r| src[r * cols + c]));
    }
    out
}
