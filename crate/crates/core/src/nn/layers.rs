//! Reusable layer building blocks: each struct registers its tensors in a
//! [`ParamStore`] at construction and replays the op on a [`Graph`] at
//! forward time.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{uniform_fan_in, zeros, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Fully connected layer; forward expects a column `(in, 1)`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, inp: usize, out: usize) -> Self {
        let w = ps.register(format!("{name}.w"), uniform_fan_in(rng, &[out, inp], inp));
        let b = ps.register(format!("{name}.b"), uniform_fan_in(rng, &[out], inp));
        Linear { w, b }
    }

    /// `x` is `(in, 1)`; returns `(out, 1)`.
    pub fn forward(&self, g: &mut Graph, bound: &super::params::Bound, x: Var) -> Var {
        let y = g.matmul(bound.var(self.w), x);
        g.add_bias_col(y, bound.var(self.b))
    }
}

/// 1-D convolution with stride 1 and "same" zero padding.
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan_in = c_in * k;
        let w = ps.register(format!("{name}.w"), uniform_fan_in(rng, &[c_out, c_in, k], fan_in));
        let b = ps.register(format!("{name}.b"), uniform_fan_in(rng, &[c_out], fan_in));
        Conv1d { w, b, pad: (k - 1) / 2 }
    }

    /// Zero-initialized variant; the surrounding residual path starts as identity.
    pub fn new_zeroed(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let w = ps.register(format!("{name}.w"), zeros(&[c_out, c_in, k]));
        let b = ps.register(format!("{name}.b"), zeros(&[c_out]));
        Conv1d { w, b, pad: (k - 1) / 2 }
    }

    pub fn forward(&self, g: &mut Graph, bound: &super::params::Bound, x: Var) -> Var {
        g.conv1d(x, bound.var(self.w), bound.var(self.b), self.pad)
    }
}

/// 1-D transposed convolution (stride and padding fixed at construction).
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k;
        let w = ps.register(format!("{name}.w"), uniform_fan_in(rng, &[c_in, c_out, k], fan_in));
        let b = ps.register(format!("{name}.b"), uniform_fan_in(rng, &[c_out], fan_in));
        ConvTranspose1d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &super::params::Bound, x: Var) -> Var {
        g.conv_transpose1d(x, bound.var(self.w), bound.var(self.b), self.stride, self.pad)
    }
}

/// Layer norm over the channel axis with learnable per-channel affine.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), super::params::ones(&[channels]));
        let beta = ps.register(format!("{name}.beta"), zeros(&[channels]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, bound: &super::params::Bound, x: Var) -> Var {
        g.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), LN_EPS)
    }
}

/// Group norm over `(c, l)` with learnable per-channel affine.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), super::params::ones(&[channels]));
        let beta = ps.register(format!("{name}.beta"), zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, bound: &super::params::Bound, x: Var) -> Var {
        g.group_norm(x, bound.var(self.gamma), bound.var(self.beta), self.groups, LN_EPS)
    }
}

/// Single LSTM cell; weights follow the usual `[i, f, g, o]` gate packing.
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let w_ih = ps.register(format!("{name}.w_ih"), uniform_fan_in(rng, &[4 * hidden, input], input));
        let w_hh = ps.register(format!("{name}.w_hh"), uniform_fan_in(rng, &[4 * hidden, hidden], hidden));
        let b = ps.register(format!("{name}.b"), uniform_fan_in(rng, &[4 * hidden], hidden));
        LstmCell { w_ih, w_hh, b, hidden }
    }

    /// One step; `x` is `(input, 1)`, state columns are `(hidden, 1)`.
    pub fn step(
        &self,
        g: &mut Graph,
        bound: &super::params::Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let hs = self.hidden;
        let gi = g.matmul(bound.var(self.w_ih), x);
        let gh = g.matmul(bound.var(self.w_hh), h);
        let s = g.add(gi, gh);
        let s = g.add_bias_col(s, bound.var(self.b));
        let i = g.slice(s, 0, 0, hs);
        let f = g.slice(s, 0, hs, 2 * hs);
        let gg = g.slice(s, 0, 2 * hs, 3 * hs);
        let o = g.slice(s, 0, 3 * hs, 4 * hs);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}

/// Single GRU cell with `[r, z, n]` gate packing.
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let w_ih = ps.register(format!("{name}.w_ih"), uniform_fan_in(rng, &[3 * hidden, input], input));
        let w_hh = ps.register(format!("{name}.w_hh"), uniform_fan_in(rng, &[3 * hidden, hidden], hidden));
        let b_ih = ps.register(format!("{name}.b_ih"), uniform_fan_in(rng, &[3 * hidden], hidden));
        let b_hh = ps.register(format!("{name}.b_hh"), uniform_fan_in(rng, &[3 * hidden], hidden));
        GruCell { w_ih, w_hh, b_ih, b_hh, hidden }
    }

    pub fn step(&self, g: &mut Graph, bound: &super::params::Bound, x: Var, h: Var) -> Var {
        let hs = self.hidden;
        let gi = g.matmul(bound.var(self.w_ih), x);
        let gi = g.add_bias_col(gi, bound.var(self.b_ih));
        let gh = g.matmul(bound.var(self.w_hh), h);
        let gh = g.add_bias_col(gh, bound.var(self.b_hh));
        let r_i = g.slice(gi, 0, 0, hs);
        let z_i = g.slice(gi, 0, hs, 2 * hs);
        let n_i = g.slice(gi, 0, 2 * hs, 3 * hs);
        let r_h = g.slice(gh, 0, 0, hs);
        let z_h = g.slice(gh, 0, hs, 2 * hs);
        let n_h = g.slice(gh, 0, 2 * hs, 3 * hs);
        let r = g.add(r_i, r_h);
        let r = g.sigmoid(r);
        let z = g.add(z_i, z_h);
        let z = g.sigmoid(z);
        let rn = g.mul(r, n_h);
        let n = g.add(n_i, rn);
        let n = g.tanh(n);
        // h' = (1 - z) * n + z * h
        let zn = g.mul(z, n);
        let n_minus = g.sub(n, zn);
        let zh = g.mul(z, h);
        g.add(n_minus, zh)
    }
}

/// Inverted dropout. The mask is drawn by the caller's RNG so training stays
/// deterministic under a fixed seed; eval mode is the identity.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut R) -> Var {
    if !training || rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = g.constant(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    g.mul(x, mask)
}
