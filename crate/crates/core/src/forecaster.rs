//! Hand-head forecasting heads, used only as a training signal.
//!
//! Maps the encoder's feature map to the next few frames. The hand branch
//! consumes the two hand joints' channels, the head branch the head
//! joint's; each is two 1D convolutions (kernel 3 then kernel 1) with a
//! layer norm and Tanh after the first and a Tanh after the second,
//! followed by adaptive average pooling to the forecast horizon. Head
//! columns are normalized to unit direction vectors.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::nn::layers::{Conv1d, LayerNorm};
use crate::nn::params::{Bound, ParamStore};
use crate::nn::{Graph, Var};

/// Direction used when a predicted head column collapses below 1e-8 and no
/// previous column is available.
pub const HEAD_FALLBACK: [f64; 3] = [0.0, 0.0, 1.0];
pub const HEAD_MIN_NORM: f64 = 1e-8;

pub struct Forecaster {
    pub dn: usize,
    channels: usize,
    hand_conv1: Conv1d,
    hand_ln: LayerNorm,
    hand_conv2: Conv1d,
    head_conv1: Conv1d,
    head_ln: LayerNorm,
    head_conv2: Conv1d,
}

impl Forecaster {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, channels: usize, dn: usize) -> Self {
        let hc = 2 * channels;
        Forecaster {
            dn,
            channels,
            hand_conv1: Conv1d::new(ps, rng, "forecaster.hand_conv1", hc, hc, 3),
            hand_ln: LayerNorm::new(ps, "forecaster.hand_ln", hc),
            hand_conv2: Conv1d::new(ps, rng, "forecaster.hand_conv2", hc, 6, 1),
            head_conv1: Conv1d::new(ps, rng, "forecaster.head_conv1", channels, channels, 3),
            head_ln: LayerNorm::new(ps, "forecaster.head_ln", channels),
            head_conv2: Conv1d::new(ps, rng, "forecaster.head_conv2", channels, 3, 1),
        }
    }

    /// `f_map` is `(channels, 3, l)` with joints `[head, left, right]`.
    /// Returns `(ha_future (6, dn), he_future (3, dn))`; `he_future`
    /// columns are unit vectors.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, f_map: Var) -> (Var, Var) {
        let c = self.channels;
        let shape = g.value(f_map).shape().to_vec();
        assert_eq!(shape[0], c, "forecaster: channel mismatch");
        assert_eq!(shape[1], 3, "forecaster: expected 3 joints");
        let l = shape[2];

        // hand branch: joints 1..3 stacked into channels
        let hands = g.slice(f_map, 1, 1, 3);
        let hands = g.reshape(hands, &[2 * c, l]);
        let h = self.hand_conv1.forward(g, bound, hands);
        let h = self.hand_ln.forward(g, bound, h);
        let h = g.tanh(h);
        let h = self.hand_conv2.forward(g, bound, h);
        let h = g.tanh(h);
        let ha = g.adaptive_avg_pool(h, self.dn);

        // head branch: joint 0
        let head = g.slice(f_map, 1, 0, 1);
        let head = g.reshape(head, &[c, l]);
        let e = self.head_conv1.forward(g, bound, head);
        let e = self.head_ln.forward(g, bound, e);
        let e = g.tanh(e);
        let e = self.head_conv2.forward(g, bound, e);
        let e = g.tanh(e);
        let e = g.adaptive_avg_pool(e, self.dn);
        let he = g.normalize_cols(e, HEAD_MIN_NORM, &HEAD_FALLBACK);

        (ha, he)
    }
}

/// Forecast output plus the degenerate-direction flags for each column.
pub struct ForecastOutput {
    pub ha_future: Array2<f64>,
    pub he_future: Array2<f64>,
    pub degenerate: Vec<bool>,
}

/// Eval-mode forecast from a raw feature map.
pub fn forecast_eval(
    forecaster: &Forecaster,
    params: &ParamStore,
    f_map: &Array3<f64>,
) -> ForecastOutput {
    let mut g = Graph::new(false);
    let bound = params.bind(&mut g);
    let f = g.constant(f_map.clone().into_dyn());
    let (ha, he) = forecaster.forward(&mut g, &bound, f);
    let ha_future = crate::nn::ops::to_array2(g.value(ha));
    let he_future = crate::nn::ops::to_array2(g.value(he));
    // flag columns that fell back: those whose pre-normalization norm was
    // tiny can be detected from the output being an exact copy of the
    // previous (or the fallback) AND the raw column being near zero.
    let raw = {
        let mut g2 = Graph::new(false);
        let bound2 = params.bind(&mut g2);
        let f2 = g2.constant(f_map.clone().into_dyn());
        let hands_dropped = forecaster.head_raw(&mut g2, &bound2, f2);
        crate::nn::ops::to_array2(g2.value(hands_dropped))
    };
    let degenerate = (0..raw.ncols())
        .map(|j| raw.column(j).mapv(|v| v * v).sum().sqrt() < HEAD_MIN_NORM)
        .collect();
    ForecastOutput { ha_future, he_future, degenerate }
}

impl Forecaster {
    /// Head branch up to (but excluding) the unit normalization; used to
    /// flag degenerate columns.
    fn head_raw(&self, g: &mut Graph, bound: &Bound, f_map: Var) -> Var {
        let c = self.channels;
        let l = g.value(f_map).shape()[2];
        let head = g.slice(f_map, 1, 0, 1);
        let head = g.reshape(head, &[c, l]);
        let e = self.head_conv1.forward(g, bound, head);
        let e = self.head_ln.forward(g, bound, e);
        let e = g.tanh(e);
        let e = self.head_conv2.forward(g, bound, e);
        let e = g.tanh(e);
        g.adaptive_avg_pool(e, self.dn)
    }
}
