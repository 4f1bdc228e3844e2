//! Selective state-space block.
//!
//! Dataflow for an input sequence `x[L, D]`:
//!
//! ```text
//! [x_b | z_b] = x · W_in                        (each half D_inner wide)
//! u   = silu(causal_dwconv(x_b))
//! δ   = u · W_δ,   Δ = softplus(δ · W_Δ + b_Δ)
//! B_t = u · W_B,   C_t = u · W_C,   A = -exp(a_log)
//! y_s = scan(u, Δ, A, B_t, C_t)
//! out = (y_s ⊙ sigmoid(z_b)) · W_out
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::autodiff::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_tr: usize,
    pub k_conv: usize,
}

impl MambaConfig {
    /// Defaults: `D_inner = 2D`, `d_state = 16`, `d_tr = ceil(D/16)`, `k_conv = 4`.
    pub fn new(d_model: usize) -> Self {
        Self { d_model, d_inner: 2 * d_model, d_state: 16, d_tr: d_model.div_ceil(16), k_conv: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.d_model, self.d_inner, self.d_state, self.d_tr, self.k_conv];
        if all.contains(&0) {
            return Err(Error::InvalidParameter(format!("mamba dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Number of learned scalars.
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner, self.d_state, self.d_tr, self.k_conv);
        d * 2 * di + di * k + di + di * r + r * di + di + 2 * di * n + di * n + di * d
    }

    /// Multiply-add accounting for a length-`l` sequence.
    ///
    /// Matmuls count `2mkn`, the depthwise conv `2k` per output, and each
    /// scan state update counts 6 (decay product, exponential, two multiplies,
    /// add, readout). Elementwise activations are not counted.
    pub fn flops(&self, l: usize) -> u64 {
        let (d, di, n, r, k) = (self.d_model, self.d_inner, self.d_state, self.d_tr, self.k_conv);
        let mm = |m: usize, kk: usize, nn: usize| 2 * (m * kk * nn) as u64;
        mm(l, d, 2 * di)
            + 2 * (l * di * k) as u64
            + mm(l, di, r)
            + mm(l, r, di)
            + 2 * mm(l, di, n)
            + 6 * (l * di * n) as u64
            + mm(l, di, d)
    }
}

/// Parameter handles of one block.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub config: MambaConfig,
    in_proj: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    delta_proj: ParamId,
    dt_w: ParamId,
    dt_b: ParamId,
    b_proj: ParamId,
    c_proj: ParamId,
    a_log: ParamId,
    out_proj: ParamId,
}

/// Inverse of softplus for `y > 0`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlock {
    /// Registers the block's parameters as `"{prefix}.{tensor}"`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: MambaConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let MambaConfig { d_model: d, d_inner: di, d_state: n, d_tr: r, k_conv: k } = config;
        let name = |t: &str| format!("{prefix}.{t}");
        let in_proj = store.add_uniform(&name("in_proj"), &[d, 2 * di], d, rng)?;
        let conv_w = store.add_uniform(&name("conv_w"), &[di, k], k, rng)?;
        let conv_b = store.add_uniform(&name("conv_b"), &[di], k, rng)?;
        let delta_proj = store.add_uniform(&name("delta_proj"), &[di, r], di, rng)?;
        let dt_w = store.add_uniform(&name("dt_w"), &[r, di], r, rng)?;
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_b = Tensor::from_fn(&[di], |_| T::from_f64(inv_softplus(rng.random_range(lo..hi).exp())));
        let dt_b = store.add(&name("dt_b"), dt_b)?;
        let b_proj = store.add_uniform(&name("b_proj"), &[di, n], di, rng)?;
        let c_proj = store.add_uniform(&name("c_proj"), &[di, n], di, rng)?;
        let log_span = if n > 1 { (n as f64).ln() / (n - 1) as f64 } else { 0.0 };
        let a_log = store.add(&name("a_log"), Tensor::from_fn(&[di, n], |i| T::from_f64((i % n) as f64 * log_span)))?;
        let out_proj = store.add_uniform(&name("out_proj"), &[di, d], di, rng)?;
        Ok(Self { config, in_proj, conv_w, conv_b, delta_proj, dt_w, dt_b, b_proj, c_proj, a_log, out_proj })
    }

    pub fn out_proj(&self) -> ParamId {
        self.out_proj
    }

    pub fn in_proj(&self) -> ParamId {
        self.in_proj
    }

    /// `x[L, D] -> [L, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.d_model {
            return Err(Error::Shape {
                op: "mamba",
                detail: format!("expected [L, {}], got {s:?}", self.config.d_model),
            });
        }
        let di = self.config.d_inner;
        let proj = tape.matmul(x, p.var(self.in_proj))?;
        let xb = tape.narrow(proj, 1, 0, di)?;
        let zb = tape.narrow(proj, 1, di, di)?;
        let xb_t = tape.transpose(xb)?;
        let conv = tape.depthwise_conv1d(xb_t, p.var(self.conv_w), Some(p.var(self.conv_b)))?;
        let conv = tape.transpose(conv)?;
        let u = tape.silu(conv);
        let delta = tape.matmul(u, p.var(self.delta_proj))?;
        let delta = tape.matmul(delta, p.var(self.dt_w))?;
        let delta = tape.add(delta, p.var(self.dt_b))?;
        let delta = tape.softplus(delta);
        let b = tape.matmul(u, p.var(self.b_proj))?;
        let c = tape.matmul(u, p.var(self.c_proj))?;
        let a = tape.exp(p.var(self.a_log));
        let a = tape.scale(a, -T::one());
        let ys = tape.selective_scan(u, delta, a, b, c)?;
        let gate = tape.sigmoid(zb);
        let yg = tape.mul(ys, gate)?;
        tape.matmul(yg, p.var(self.out_proj))
    }
}

/// Zero-order-hold style discretization: `Δ = softplus(δ)`, `Ā = exp(Δ a)`, `B̄ = Δ b`.
///
/// Shapes: `delta_raw[L, D]`, `a[D, N]`, `b[L, N]`; returns `Ā, B̄` as `[L, D, N]`.
pub fn discretize(delta_raw: &[f64], a: &[f64], b: &[f64], l: usize, d: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut abar = vec![0.0; l * d * n];
    let mut bbar = vec![0.0; l * d * n];
    for t in 0..l {
        for ch in 0..d {
            let dt = crate::autodiff::kernels::softplus(delta_raw[t * d + ch]);
            for j in 0..n {
                abar[(t * d + ch) * n + j] = (dt * a[ch * n + j]).exp();
                bbar[(t * d + ch) * n + j] = dt * b[t * n + j];
            }
        }
    }
    (abar, bbar)
}

/// Step-by-step reference recurrence: `s_t = Ā_t ⊙ s_{t-1} + B̄_t x_t`, `y_t = ⟨C_t, s_t⟩`.
pub fn reference_scan(x: &[f64], abar: &[f64], bbar: &[f64], c: &[f64], l: usize, d: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * d];
    for ch in 0..d {
        let mut s = vec![0.0; n];
        for t in 0..l {
            let mut acc = 0.0;
            for j in 0..n {
                let idx = (t * d + ch) * n + j;
                s[j] = abar[idx] * s[j] + bbar[idx] * x[t * d + ch];
                acc += c[t * n + j] * s[j];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::autodiff::kernels::softplus;
    use crate::rng::rng_from_seed;

    fn rand_vec(len: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn discretize_examples() {
        let (abar, bbar) = discretize(&[0.0], &[-1.0], &[3.0], 1, 1, 1);
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert!((bbar[0] - 3.0 * core::f64::consts::LN_2).abs() < 1e-15);
        let (abar, _) =
            discretize(&rand_vec(20, 1, -5.0, 5.0), &rand_vec(8, 2, -3.0, -0.01), &rand_vec(20, 3, -1.0, 1.0), 5, 4, 2);
        assert!(abar.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_b_gives_zero_output() {
        let (l, d, n) = (4, 2, 3);
        let (abar, bbar) =
            discretize(&rand_vec(l * d, 4, -1.0, 1.0), &rand_vec(d * n, 5, -2.0, -0.1), &vec![0.0; l * n], l, d, n);
        let y = reference_scan(&rand_vec(l * d, 6, -1.0, 1.0), &abar, &bbar, &rand_vec(l * n, 7, -1.0, 1.0), l, d, n);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let (d, n) = (2, 3);
        let dr = rand_vec(d, 8, -1.0, 1.0);
        let b = rand_vec(n, 9, -1.0, 1.0);
        let c = rand_vec(n, 10, -1.0, 1.0);
        let x = rand_vec(d, 11, -1.0, 1.0);
        let (abar, bbar) = discretize(&dr, &rand_vec(d * n, 12, -2.0, -0.1), &b, 1, d, n);
        let y = reference_scan(&x, &abar, &bbar, &c, 1, d, n);
        for ch in 0..d {
            let cb: f64 = (0..n).map(|j| c[j] * b[j]).sum();
            assert!((y[ch] - cb * softplus(dr[ch]) * x[ch]).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_decay_is_prefix_sum() {
        let (l, d, n) = (6, 2, 2);
        let x = rand_vec(l * d, 13, -1.0, 1.0);
        let bbar = rand_vec(l * d * n, 14, -1.0, 1.0);
        let c = rand_vec(l * n, 15, -1.0, 1.0);
        let y = reference_scan(&x, &vec![1.0; l * d * n], &bbar, &c, l, d, n);
        for ch in 0..d {
            for t in 0..l {
                let mut expected = 0.0;
                for j in 0..n {
                    let s: f64 = (0..=t).map(|tau| bbar[(tau * d + ch) * n + j] * x[tau * d + ch]).sum();
                    expected += c[t * n + j] * s;
                }
                assert!((y[t * d + ch] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_scan_matches_reference() {
        let (l, d, n) = (9, 3, 4);
        let x = rand_vec(l * d, 16, -1.0, 1.0);
        let dr = rand_vec(l * d, 17, -3.0, 2.0);
        let a = rand_vec(d * n, 18, -4.0, -0.05);
        let b = rand_vec(l * n, 19, -1.0, 1.0);
        let c = rand_vec(l * n, 20, -1.0, 1.0);
        let (abar, bbar) = discretize(&dr, &a, &b, l, d, n);
        let reference = reference_scan(&x, &abar, &bbar, &c, l, d, n);
        let mut tape = Tape::new();
        let t = |v: Vec<f64>, s: &[usize]| Tensor::new(s, v).unwrap();
        let vx = tape.constant(t(x, &[l, d]));
        let vd = tape.constant(t(dr.iter().map(|&v| softplus(v)).collect(), &[l, d]));
        let va = tape.constant(t(a, &[d, n]));
        let vb = tape.constant(t(b, &[l, n]));
        let vc = tape.constant(t(c, &[l, n]));
        let y = tape.selective_scan(vx, vd, va, vb, vc).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&reference) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-9), "{got} vs {want}");
        }
    }

    fn small_block(seed: u64) -> (ParamStore<f64>, MambaBlock) {
        let cfg = MambaConfig { d_model: 4, d_inner: 8, d_state: 3, d_tr: 1, k_conv: 3 };
        let mut store = ParamStore::new();
        let block = MambaBlock::new(cfg, "mamba.0", &mut store, &mut rng_from_seed(seed)).unwrap();
        (store, block)
    }

    fn run(store: &ParamStore<f64>, block: &MambaBlock, x: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vx = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, vx).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn output_shape_and_names() {
        let (store, block) = small_block(1);
        assert!(store.find("mamba.0.a_log").is_some());
        assert_eq!(store.numel(), block.config.param_count());
        let x = Tensor::new(&[6, 4], rand_vec(24, 21, -1.0, 1.0)).unwrap();
        assert_eq!(run(&store, &block, &x).len(), 24);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bad = tape.constant(Tensor::zeros(&[6, 5]));
        assert!(block.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn a_is_negative_and_log_spaced() {
        let (store, block) = small_block(2);
        let a_log = store.get(block.a_log).data();
        assert_eq!(&a_log[..3], &[0.0, 3f64.ln() / 2.0, 3f64.ln()]);
        assert!(a_log.iter().all(|v| (-v.exp()) < 0.0));
        let dt_b = store.get(block.dt_b).data();
        assert!(dt_b.iter().all(|&b| (1e-3..=1e-1).contains(&softplus(b))));
    }

    #[test]
    fn zero_projections_give_zero_output() {
        let (mut store, block) = small_block(3);
        store.get_mut(block.in_proj).data_mut().fill(0.0);
        store.get_mut(block.out_proj).data_mut().fill(0.0);
        let y = run(&store, &block, &Tensor::zeros(&[5, 4]));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_causal() {
        let (store, block) = small_block(4);
        let x = Tensor::new(&[8, 4], rand_vec(32, 22, -1.0, 1.0)).unwrap();
        let base = run(&store, &block, &x);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[5 * 4..6 * 4] {
            *v += 0.7;
        }
        let pert = run(&store, &block, &x2);
        assert_eq!(&base[..5 * 4], &pert[..5 * 4]);
        assert_ne!(&base[5 * 4..], &pert[5 * 4..]);

        // Tape gradients agree: output at t = 2 ignores inputs after it.
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let vx = tape.leaf(x);
        let y = block.forward(&mut tape, &p, vx).unwrap();
        let row = tape.narrow(y, 0, 2, 1).unwrap();
        let s = tape.sum(row);
        tape.backward(s).unwrap();
        let g = tape.grad(vx).unwrap().data();
        assert!(g[3 * 4..].iter().all(|&v| v == 0.0));
        assert!(g[..3 * 4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn block_gradient_check() {
        let (store, block) = small_block(5);
        let mut rng = rng_from_seed(30);
        let mut inputs: Vec<Tensor<f64>> =
            store.iter().map(|(_, t)| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0))).collect();
        inputs.push(Tensor::new(&[6, 4], rand_vec(24, 23, -1.0, 1.0)).unwrap());
        let w = Tensor::new(&[6, 4], rand_vec(24, 24, -1.0, 1.0)).unwrap();
        let err = max_rel_error(&inputs, 1e-5, |tape, vars| {
            let p = crate::autodiff::Bindings::from_vars(vars[..vars.len() - 1].to_vec());
            let y = block.forward(tape, &p, vars[vars.len() - 1])?;
            let wv = tape.constant(w.clone());
            let yw = tape.mul(y, wv)?;
            Ok(tape.sum(yw))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn long_sequence_stays_bounded_in_f32() {
        let (l, d, n) = (4096, 4, 8);
        let mut tape = Tape::<f32>::new();
        let t = |v: Vec<f64>, s: &[usize]| Tensor::new(s, v).unwrap().cast::<f32>();
        let x = tape.constant(t(rand_vec(l * d, 25, -1.0, 1.0), &[l, d]));
        let dt = tape.constant(t(rand_vec(l * d, 26, 0.0, 2.0), &[l, d]));
        let a = tape.constant(t(rand_vec(d * n, 27, -16.0, -1.0), &[d, n]));
        let b = tape.constant(t(rand_vec(l * n, 28, -1.0, 1.0), &[l, n]));
        let c = tape.constant(t(rand_vec(l * n, 29, -1.0, 1.0), &[l, n]));
        let y = tape.selective_scan(x, dt, a, b, c).unwrap();
        // |s| <= max Δ·|b|·|x| / (1 - max Ā) summed over n; a loose bound suffices.
        assert!(tape.value(y).data().iter().all(|v| v.is_finite() && v.abs() < 1e3));
    }
}
