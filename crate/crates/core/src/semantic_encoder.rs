//! GCN-based semantic encoder.
//!
//! Input windows are modelled as a fully connected 3-joint spatial graph
//! (head, left hand, right hand) crossed with an N-node temporal graph.
//! An ST-GCN lifts the 3 coordinate channels to the feature width, three
//! residual GCN modules (two blocks each) refine them with temporal
//! average-pooling after the first two, and the pooled map is projected to
//! the semantic vector. The pre-pooling feature map is kept for the
//! forecasting heads.
//!
//! Alternative encoder trunks (1D CNN, LSTM, GRU, MLP) share the same
//! projection head so they can be swapped in for comparison runs.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};

use crate::nn::layers::{dropout, Conv1d, GruCell, LayerNorm, LstmCell};
use crate::nn::params::{near_identity, uniform_fan_in, Bound, ParamId, ParamStore};
use crate::nn::{Graph, Var};

pub const N_JOINTS: usize = 3;

/// Which trunk architecture produces the semantic features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gcn,
    Cnn1d,
    Lstm,
    Gru,
    Mlp,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Gcn => "gcn",
            EncoderKind::Cnn1d => "1dcnn",
            EncoderKind::Lstm => "lstm",
            EncoderKind::Gru => "gru",
            EncoderKind::Mlp => "mlp",
        }
    }
}

/// One spatial-temporal graph convolution: temporal mixing by `A_T`,
/// per-node feature map by `W`, spatial mixing by `A_S`. All three are
/// learnable and dense; adjacencies start near identity.
pub struct StgcnLayer {
    pub a_t: ParamId,
    pub w: ParamId,
    pub a_s: ParamId,
    c_in: usize,
    c_out: usize,
    len: usize,
}

impl StgcnLayer {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        len: usize,
    ) -> Self {
        let a_t = ps.register(format!("{name}.a_t"), near_identity(rng, len, 0.01));
        let w = ps.register(format!("{name}.w"), uniform_fan_in(rng, &[c_in, c_out], c_in));
        let a_s = ps.register(format!("{name}.a_s"), near_identity(rng, N_JOINTS, 0.01));
        StgcnLayer { a_t, w, a_s, c_in, c_out, len }
    }

    /// `(c_in, 3, l) -> (c_out, 3, l)`; linear in the input.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape, vec![self.c_in, N_JOINTS, self.len], "stgcn: bad input shape");
        let (c_in, c_out, l) = (self.c_in, self.c_out, self.len);

        // temporal: contract the time axis with A_T
        let flat = g.reshape(x, &[c_in * N_JOINTS, l]);
        let t_mixed = g.matmul(flat, bound.var(self.a_t));
        let t_mixed = g.reshape(t_mixed, &[c_in, N_JOINTS, l]);

        // features: W^T (c_out, c_in) x (c_in, 3*l)
        let wt = g.permute(bound.var(self.w), &[1, 0]);
        let fflat = g.reshape(t_mixed, &[c_in, N_JOINTS * l]);
        let f_mixed = g.matmul(wt, fflat);
        let f_mixed = g.reshape(f_mixed, &[c_out, N_JOINTS, l]);

        // spatial: contract the joint axis with A_S
        let jfirst = g.permute(f_mixed, &[1, 0, 2]);
        let jflat = g.reshape(jfirst, &[N_JOINTS, c_out * l]);
        let s_mixed = g.matmul(bound.var(self.a_s), jflat);
        let s_mixed = g.reshape(s_mixed, &[N_JOINTS, c_out, l]);
        g.permute(s_mixed, &[1, 0, 2])
    }
}

/// Residual GCN block: `x + Dropout(Tanh(LN(STGCN(x))))`.
pub struct GcnBlock {
    pub stgcn: StgcnLayer,
    pub ln: LayerNorm,
    dropout: f64,
}

impl GcnBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        len: usize,
        dropout: f64,
    ) -> Self {
        let stgcn = StgcnLayer::new(ps, rng, &format!("{name}.stgcn"), channels, channels, len);
        let ln = LayerNorm::new(ps, &format!("{name}.ln"), channels);
        GcnBlock { stgcn, ln, dropout }
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Var {
        let h = self.stgcn.forward(g, bound, x);
        let h = self.ln.forward(g, bound, h);
        let h = g.tanh(h);
        let h = dropout(g, h, self.dropout, training, rng);
        g.add(x, h)
    }
}

struct GcnTrunk {
    stem: StgcnLayer,
    modules: Vec<Vec<GcnBlock>>,
}

struct CnnTrunk {
    convs: Vec<(Conv1d, LayerNorm)>,
    to_feat: Conv1d,
}

enum RnnFlavor {
    Lstm(LstmCell),
    Gru(GruCell),
}

struct RnnTrunk {
    cell: RnnFlavor,
    hidden: usize,
    to_feat: Conv1d,
}

struct MlpTrunk {
    layers: Vec<(Conv1d, LayerNorm)>,
    to_feat: Conv1d,
}

enum Trunk {
    Gcn(GcnTrunk),
    Cnn(CnnTrunk),
    Rnn(RnnTrunk),
    Mlp(MlpTrunk),
}

/// Semantic encoder: trunk plus shared projection head.
pub struct SemanticEncoder {
    pub kind: EncoderKind,
    pub n: usize,
    pub channels: usize,
    pub sem_dim: usize,
    trunk: Trunk,
    head: Conv1d,
}

impl SemanticEncoder {
    /// `n` must be divisible by 4 (two temporal poolings).
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        kind: EncoderKind,
        n: usize,
        channels: usize,
        sem_dim: usize,
        dropout: f64,
    ) -> Self {
        assert!(n % 4 == 0, "window length {n} must be divisible by 4");
        let feat = N_JOINTS * channels;
        let trunk = match kind {
            EncoderKind::Gcn => {
                let stem = StgcnLayer::new(ps, rng, "encoder.stem", N_JOINTS, channels, n);
                let mut modules = Vec::new();
                for m in 0..3 {
                    let len = n >> m.min(2);
                    let blocks = (0..2)
                        .map(|b| {
                            GcnBlock::new(
                                ps,
                                rng,
                                &format!("encoder.mod{m}.block{b}"),
                                channels,
                                len,
                                dropout,
                            )
                        })
                        .collect();
                    modules.push(blocks);
                }
                Trunk::Gcn(GcnTrunk { stem, modules })
            }
            EncoderKind::Cnn1d => {
                let width = 2 * channels;
                let mut convs = Vec::new();
                for i in 0..3 {
                    let c_in = if i == 0 { 9 } else { width };
                    let conv = Conv1d::new(ps, rng, &format!("encoder.conv{i}"), c_in, width, 3);
                    let ln = LayerNorm::new(ps, &format!("encoder.ln{i}"), width);
                    convs.push((conv, ln));
                }
                let to_feat = Conv1d::new(ps, rng, "encoder.to_feat", width, feat, 1);
                Trunk::Cnn(CnnTrunk { convs, to_feat })
            }
            EncoderKind::Lstm | EncoderKind::Gru => {
                let hidden = 2 * channels;
                let cell = if kind == EncoderKind::Lstm {
                    RnnFlavor::Lstm(LstmCell::new(ps, rng, "encoder.lstm", 9, hidden))
                } else {
                    RnnFlavor::Gru(GruCell::new(ps, rng, "encoder.gru", 9, hidden))
                };
                let to_feat = Conv1d::new(ps, rng, "encoder.to_feat", hidden, feat, 1);
                Trunk::Rnn(RnnTrunk { cell, hidden, to_feat })
            }
            EncoderKind::Mlp => {
                let width = 8 * channels;
                let mut layers = Vec::new();
                for i in 0..2 {
                    let c_in = if i == 0 { 9 } else { width };
                    let conv = Conv1d::new(ps, rng, &format!("encoder.fc{i}"), c_in, width, 1);
                    let ln = LayerNorm::new(ps, &format!("encoder.fcln{i}"), width);
                    layers.push((conv, ln));
                }
                let to_feat = Conv1d::new(ps, rng, "encoder.to_feat", width, feat, 1);
                Trunk::Mlp(MlpTrunk { layers, to_feat })
            }
        };
        let head = Conv1d::new(ps, rng, "encoder.head", feat, sem_dim, 1);
        SemanticEncoder { kind, n, channels, sem_dim, trunk, head }
    }

    /// Reshape the 9-row signal into the `(3, 3, n)` graph tensor with
    /// joint order `[head, left hand, right hand]`.
    fn to_graph_tensor(&self, g: &mut Graph, x9: Var) -> Var {
        let n = self.n;
        let lh = g.slice(x9, 0, 0, 3);
        let rh = g.slice(x9, 0, 3, 6);
        let he = g.slice(x9, 0, 6, 9);
        let lh = g.reshape(lh, &[3, 1, n]);
        let rh = g.reshape(rh, &[3, 1, n]);
        let he = g.reshape(he, &[3, 1, n]);
        g.concat(1, &[he, lh, rh])
    }

    /// Full forward: 9-row window `(9, n)` to the semantic column
    /// `(sem_dim, 1)` plus the feature map `(channels, 3, n/4)`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x9: Var,
        training: bool,
        rng: &mut R,
    ) -> (Var, Var) {
        assert_eq!(g.value(x9).shape(), [9, self.n], "encoder: bad input shape");
        let c = self.channels;
        let l4 = self.n / 4;
        let f_map = match &self.trunk {
            Trunk::Gcn(trunk) => {
                let mut h = {
                    let gt = self.to_graph_tensor(g, x9);
                    trunk.stem.forward(g, bound, gt)
                };
                for (m, blocks) in trunk.modules.iter().enumerate() {
                    for block in blocks {
                        h = block.forward(g, bound, h, training, rng);
                    }
                    if m < 2 {
                        h = g.avg_pool2_time(h);
                    }
                }
                h
            }
            Trunk::Cnn(trunk) => {
                let mut h = x9;
                for (conv, ln) in &trunk.convs {
                    h = conv.forward(g, bound, h);
                    h = ln.forward(g, bound, h);
                    h = g.relu(h);
                }
                let h = trunk.to_feat.forward(g, bound, h);
                let h = g.avg_pool2_time(h);
                let h = g.avg_pool2_time(h);
                g.reshape(h, &[c, N_JOINTS, l4])
            }
            Trunk::Rnn(trunk) => {
                let hidden = trunk.hidden;
                let mut h_state = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[hidden, 1])));
                let mut c_state = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[hidden, 1])));
                let mut outputs = Vec::with_capacity(self.n);
                for t in 0..self.n {
                    let x_t = g.slice(x9, 1, t, t + 1);
                    match &trunk.cell {
                        RnnFlavor::Lstm(cell) => {
                            let (h_new, c_new) = cell.step(g, bound, x_t, h_state, c_state);
                            h_state = h_new;
                            c_state = c_new;
                        }
                        RnnFlavor::Gru(cell) => {
                            h_state = cell.step(g, bound, x_t, h_state);
                        }
                    }
                    outputs.push(h_state);
                }
                let seq = g.concat(1, &outputs);
                let h = trunk.to_feat.forward(g, bound, seq);
                let h = g.avg_pool2_time(h);
                let h = g.avg_pool2_time(h);
                g.reshape(h, &[c, N_JOINTS, l4])
            }
            Trunk::Mlp(trunk) => {
                let mut h = x9;
                for (fc, ln) in &trunk.layers {
                    h = fc.forward(g, bound, h);
                    h = ln.forward(g, bound, h);
                    h = g.relu(h);
                }
                let h = trunk.to_feat.forward(g, bound, h);
                let h = g.avg_pool2_time(h);
                let h = g.avg_pool2_time(h);
                g.reshape(h, &[c, N_JOINTS, l4])
            }
        };
        // aggregate joints into channels, pool time to one, project
        let flat = g.reshape(f_map, &[N_JOINTS * c, l4]);
        let pooled = g.adaptive_avg_pool(flat, 1);
        let e_sem = self.head.forward(g, bound, pooled);
        (e_sem, f_map)
    }
}

/// Eval-mode semantic embedding of a `(9, n)` window.
pub fn encode_semantic_eval(
    encoder: &SemanticEncoder,
    params: &ParamStore,
    x9: &ndarray::Array2<f64>,
) -> (Array1<f64>, Array3<f64>) {
    let mut g = Graph::new(false);
    let bound = params.bind(&mut g);
    let x = g.constant(x9.clone().into_dyn());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (e, f) = encoder.forward(&mut g, &bound, x, false, &mut rng);
    let e_sem = crate::nn::ops::to_array1(g.value(e));
    let f_map = g
        .value(f)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    (e_sem, f_map)
}
