//! Conditional 1D-UNet noise predictor.
//!
//! Estimates the noise inside a `(9, n)` tensor given the diffusion step
//! embedding and the semantic embedding. Two downsampling levels with skip
//! connections added back on the way up; every residual block is
//! conditioned on the step embedding (scale and shift) followed by a
//! semantic shift. Final convs of each residual block and the output head
//! start at zero so the network begins near the zero-noise function.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::nn::layers::{dropout, Conv1d, GroupNorm, Linear};
use crate::nn::params::{Bound, ParamStore};
use crate::nn::{Graph, Var};

pub const SIGNAL_CHANNELS: usize = 9;

/// Sinusoidal position encoding of a step index: half sines, half cosines,
/// frequencies log-spaced over four decades.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000.0_f64).ln() * exponent).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

/// Sinusoidal encoding followed by Linear -> SiLU -> Linear.
pub struct TimeMlp {
    pub l1: Linear,
    pub l2: Linear,
    pub dim: usize,
}

impl TimeMlp {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        let l1 = Linear::new(ps, rng, &format!("{name}.l1"), dim, dim);
        let l2 = Linear::new(ps, rng, &format!("{name}.l2"), dim, dim);
        TimeMlp { l1, l2, dim }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, t: usize) -> Var {
        let enc = sinusoidal_embedding(t, self.dim)
            .into_shape_with_order((self.dim, 1))
            .unwrap();
        let x = g.constant(enc.into_dyn());
        let h = self.l1.forward(g, bound, x);
        let h = g.silu(h);
        self.l2.forward(g, bound, h)
    }
}

/// One conditioned residual block:
/// GN -> SiLU -> Conv -> GN -> (time scale/shift) -> (+ semantic shift)
/// -> SiLU -> Dropout -> zero-init Conv, with an outer residual.
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv1d,
    gn2: GroupNorm,
    time_proj: Linear,
    sem_proj: Linear,
    conv2: Conv1d,
    channels: usize,
    dropout: f64,
}

impl ResBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
        time_dim: usize,
        sem_dim: usize,
        dropout: f64,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), channels, groups),
            conv1: Conv1d::new(ps, rng, &format!("{name}.conv1"), channels, channels, 3),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), channels, groups),
            time_proj: Linear::new(ps, rng, &format!("{name}.time"), time_dim, 2 * channels),
            sem_proj: Linear::new(ps, rng, &format!("{name}.sem"), sem_dim, channels),
            conv2: Conv1d::new_zeroed(ps, &format!("{name}.conv2"), channels, channels, 3),
            channels,
            dropout,
        }
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        e_t: Var,
        e_sem: Var,
        training: bool,
        rng: &mut R,
    ) -> Var {
        let c = self.channels;
        let h = self.gn1.forward(g, bound, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, bound, h);
        let h = self.gn2.forward(g, bound, h);

        // time conditioning: h * (1 + s_t) + b_t
        let tp = g.silu(e_t);
        let tp = self.time_proj.forward(g, bound, tp);
        let s_t = g.slice(tp, 0, 0, c);
        let s_t = g.reshape(s_t, &[c]);
        let b_t = g.slice(tp, 0, c, 2 * c);
        let b_t = g.reshape(b_t, &[c]);
        let s1 = g.add_scalar(s_t, 1.0);
        let h = g.scale_col(h, s1);
        let h = g.add_bias_col(h, b_t);

        // semantic conditioning applied after the time condition
        let sp = g.silu(e_sem);
        let sp = self.sem_proj.forward(g, bound, sp);
        let b_s = g.reshape(sp, &[c]);
        let h = g.add_bias_col(h, b_s);

        let h = g.silu(h);
        let h = dropout(g, h, self.dropout, training, rng);
        let h = self.conv2.forward(g, bound, h);
        g.add(x, h)
    }
}

/// Two residual blocks in sequence.
pub struct ResConvModule {
    blocks: Vec<ResBlock>,
}

impl ResConvModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        groups: usize,
        time_dim: usize,
        sem_dim: usize,
        dropout: f64,
    ) -> Self {
        let blocks = (0..2)
            .map(|i| {
                ResBlock::new(
                    ps,
                    rng,
                    &format!("{name}.block{i}"),
                    channels,
                    groups,
                    time_dim,
                    sem_dim,
                    dropout,
                )
            })
            .collect();
        ResConvModule { blocks }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        e_t: Var,
        e_sem: Var,
        training: bool,
        rng: &mut R,
    ) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, bound, h, e_t, e_sem, training, rng);
        }
        h
    }
}

/// The full UNet: stem, two encoder levels, bottleneck, mirrored decoder
/// with additive skips, normalized projection head.
pub struct UNet {
    pub n: usize,
    pub channels: usize,
    pub time_dim: usize,
    pub sem_dim: usize,
    pub t_max: usize,
    stem: Conv1d,
    time_mlp: TimeMlp,
    enc0: ResConvModule,
    enc1: ResConvModule,
    mid: ResConvModule,
    up1: Conv1d,
    dec1: ResConvModule,
    up0: Conv1d,
    dec0: ResConvModule,
    head_gn: GroupNorm,
    head_conv: Conv1d,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        n: usize,
        channels: usize,
        groups: usize,
        time_dim: usize,
        sem_dim: usize,
        dropout: f64,
        t_max: usize,
    ) -> Self {
        assert!(n % 4 == 0, "window length {n} must be divisible by 4");
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let mk = |ps: &mut ParamStore, rng: &mut R, name: &str| {
            ResConvModule::new(ps, rng, name, channels, groups, time_dim, sem_dim, dropout)
        };
        UNet {
            n,
            channels,
            time_dim,
            sem_dim,
            t_max,
            stem: Conv1d::new(ps, rng, "unet.stem", SIGNAL_CHANNELS, channels, 3),
            time_mlp: TimeMlp::new(ps, rng, "unet.time_mlp", time_dim),
            enc0: mk(ps, rng, "unet.enc0"),
            enc1: mk(ps, rng, "unet.enc1"),
            mid: mk(ps, rng, "unet.mid"),
            up1: Conv1d::new(ps, rng, "unet.up1", channels, channels, 3),
            dec1: mk(ps, rng, "unet.dec1"),
            up0: Conv1d::new(ps, rng, "unet.up0", channels, channels, 3),
            dec0: mk(ps, rng, "unet.dec0"),
            head_gn: GroupNorm::new(ps, "unet.head_gn", channels, groups),
            head_conv: Conv1d::new_zeroed(ps, "unet.head_conv", channels, SIGNAL_CHANNELS, 3),
        }
    }

    /// Predict the noise inside `h_t` `(9, n)`, conditioned on step `t`
    /// and the semantic column `e_sem` `(sem_dim, 1)`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h_t: Var,
        t: usize,
        e_sem: Var,
        training: bool,
        rng: &mut R,
    ) -> Var {
        assert_eq!(g.value(h_t).shape(), [SIGNAL_CHANNELS, self.n], "unet: bad input shape");
        assert!(t <= self.t_max, "step {t} out of range 0..={}", self.t_max);
        let e_t = self.time_mlp.forward(g, bound, t);

        let x0 = self.stem.forward(g, bound, h_t);
        let s0 = self.enc0.forward(g, bound, x0, e_t, e_sem, training, rng);
        let d1 = g.avg_pool2_time(s0);
        let s1 = self.enc1.forward(g, bound, d1, e_t, e_sem, training, rng);
        let d2 = g.avg_pool2_time(s1);
        let m = self.mid.forward(g, bound, d2, e_t, e_sem, training, rng);

        let u1 = g.upsample_nearest2(m);
        let u1 = self.up1.forward(g, bound, u1);
        let u1 = g.add(u1, s1);
        let u1 = self.dec1.forward(g, bound, u1, e_t, e_sem, training, rng);

        let u0 = g.upsample_nearest2(u1);
        let u0 = self.up0.forward(g, bound, u0);
        let u0 = g.add(u0, s0);
        let u0 = self.dec0.forward(g, bound, u0, e_t, e_sem, training, rng);

        let h = self.head_gn.forward(g, bound, u0);
        let h = g.silu(h);
        self.head_conv.forward(g, bound, h)
    }
}

/// Eval-mode noise prediction for a raw `(9, n)` array.
pub fn predict_noise_eval(
    unet: &UNet,
    params: &ParamStore,
    h_t: &Array2<f64>,
    t: usize,
    e_sem: &Array1<f64>,
) -> Array2<f64> {
    use rand::SeedableRng;
    let mut g = Graph::new(false);
    let bound = params.bind(&mut g);
    let x = g.constant(h_t.clone().into_dyn());
    let e = g.constant(
        e_sem
            .clone()
            .into_shape_with_order((e_sem.len(), 1))
            .unwrap()
            .into_dyn(),
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = unet.forward(&mut g, &bound, x, t, e, false, &mut rng);
    crate::nn::ops::to_array2(g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        use rand_distr::Distribution;
        let d = rand_distr::StandardNormal;
        Array2::from_shape_fn((r, c), |_| d.sample(rng))
    }

    fn tiny_unet(rng: &mut ChaCha8Rng) -> (ParamStore, UNet) {
        let mut ps = ParamStore::new();
        let unet = UNet::new(&mut ps, rng, 8, 8, 2, 8, 6, 0.1, 1000);
        (ps, unet)
    }

    #[test]
    fn sinusoid_at_zero_is_zeros_then_ones() {
        let e = sinusoidal_embedding(0, 128);
        for i in 0..64 {
            assert_eq!(e[i], 0.0, "sine part at t=0");
            assert_eq!(e[64 + i], 1.0, "cosine part at t=0");
        }
    }

    #[test]
    fn time_embedding_deterministic_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let mlp = TimeMlp::new(&mut ps, &mut rng, "t", 32);
        let run = |ps: &ParamStore, t: usize| {
            let mut g = Graph::new(false);
            let bound = ps.bind(&mut g);
            let v = mlp.forward(&mut g, &bound, t);
            g.value(v).clone()
        };
        let a = run(&ps, 17);
        let b = run(&ps, 17);
        assert_eq!(a, b);
        let c = run(&ps, 100);
        let d = run(&ps, 101);
        let dist = (&c - &d).mapv(f64::abs).sum();
        assert!(dist > 0.0, "adjacent steps must produce different embeddings");
    }

    #[test]
    fn resblock_zero_second_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let block = ResBlock::new(&mut ps, &mut rng, "rb", 8, 2, 8, 6, 0.1);
        // conv2 is zero-initialized by construction
        let x = randn2(&mut rng, 8, 8);
        let e_t = randn2(&mut rng, 8, 1);
        let e_s = randn2(&mut rng, 6, 1);
        let mut g = Graph::new(false);
        let bound = ps.bind(&mut g);
        let xv = g.constant(x.clone().into_dyn());
        let tv = g.constant(e_t.into_dyn());
        let sv = g.constant(e_s.into_dyn());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y = block.forward(&mut g, &bound, xv, tv, sv, false, &mut r);
        let diff = (g.value(y) - &x.into_dyn()).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "zero-init second conv must give identity, diff {diff}");
    }

    #[test]
    fn resblock_conditioning_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let block = ResBlock::new(&mut ps, &mut rng, "rb", 8, 2, 8, 6, 0.1);
        // give conv2 real weights so the conditioned path reaches the output
        *ps.get_mut(block.conv2.w) =
            crate::nn::params::uniform_fan_in(&mut rng, &[8, 8, 3], 24);
        let x = randn2(&mut rng, 8, 8);
        let e_t = randn2(&mut rng, 8, 1);
        let run = |ps: &ParamStore, e_s: &Array2<f64>| {
            let mut g = Graph::new(false);
            let bound = ps.bind(&mut g);
            let xv = g.constant(x.clone().into_dyn());
            let tv = g.constant(e_t.clone().into_dyn());
            let sv = g.constant(e_s.clone().into_dyn());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let y = block.forward(&mut g, &bound, xv, tv, sv, false, &mut r);
            g.value(y).clone()
        };
        let s1 = randn2(&mut rng, 6, 1);
        let s2 = randn2(&mut rng, 6, 1);
        let y1 = run(&ps, &s1);
        let y2 = run(&ps, &s2);
        assert!((&y1 - &y2).mapv(f64::abs).sum() > 1e-9, "semantic conditioning is dead");
        assert_eq!(y1.shape(), &[8, 8]);
    }

    #[test]
    fn unet_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ps, unet) = tiny_unet(&mut rng);
        let h = randn2(&mut rng, 9, 8);
        let e = ndarray::Array1::from_iter((0..6).map(|i| i as f64 * 0.1));
        let a = predict_noise_eval(&unet, &ps, &h, 500, &e);
        assert_eq!(a.dim(), (9, 8));
        let b = predict_noise_eval(&unet, &ps, &h, 500, &e);
        assert_eq!(a, b);
    }

    #[test]
    fn unet_full_size_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let unet = UNet::new(&mut ps, &mut rng, 40, 64, 8, 128, 128, 0.1, 1000);
        let h = randn2(&mut rng, 9, 40);
        let e = ndarray::Array1::zeros(128);
        let out = predict_noise_eval(&unet, &ps, &h, 1000, &e);
        assert_eq!(out.dim(), (9, 40));
    }

    #[test]
    fn unet_sem_conditioning_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut ps, unet) = tiny_unet(&mut rng);
        // wake up the zero-initialized convs so conditioning reaches the output
        for name in ["unet.enc0.block0.conv2.w", "unet.head_conv.w"] {
            let id = ps.id_of(name).unwrap();
            let shape = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = crate::nn::params::uniform_fan_in(&mut rng, &shape, 24);
        }
        let h = randn2(&mut rng, 9, 8);
        let e1 = ndarray::Array1::from_elem(6, 0.3);
        let e2 = ndarray::Array1::from_elem(6, -0.2);
        let a = predict_noise_eval(&unet, &ps, &h, 10, &e1);
        let b = predict_noise_eval(&unet, &ps, &h, 10, &e2);
        assert!((&a - &b).mapv(f64::abs).sum() > 1e-9);
    }
}
