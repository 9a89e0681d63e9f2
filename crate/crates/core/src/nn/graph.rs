//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is a tape of nodes created in topological order. Every op
//! records the parent indices and a backward closure; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. Graphs are built
//! per forward pass and dropped afterwards, so layers stay state-free.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn, Slice};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Context handed to a backward closure.
pub struct BackCtx<'a> {
    /// Gradient of the loss w.r.t. this node's value.
    pub grad: &'a ArrayD<f64>,
    /// This node's forward value.
    pub value: &'a ArrayD<f64>,
    /// Forward values of the parent nodes, in registration order.
    pub parents: &'a [&'a ArrayD<f64>],
}

type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Tape of tensor operations. `recording = false` skips backward bookkeeping
/// for cheap inference-only forwards.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Graph {
    pub fn new(recording: bool) -> Self {
        Graph { nodes: Vec::new(), recording }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf node (parameter or input). Leaves have no backward fn;
    /// their gradients are read from the result of [`Graph::backward`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf that never needs a gradient (inputs, masks, targets).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        if self.recording {
            self.nodes.push(Node { value, parents, backward });
        } else {
            self.nodes.push(Node { value, parents: vec![], backward: None });
        }
        Var(self.nodes.len() - 1)
    }

    /// Append an op node; used by the structured ops in `ops.rs`.
    pub(crate) fn push_op(&mut self, value: ArrayD<f64>, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let idx = parents.into_iter().map(|v| v.0).collect();
        self.push(value, idx, Some(backward))
    }

    /// Accumulate gradients of a scalar `loss` w.r.t. every node.
    /// Returns one entry per node; `None` where no gradient flowed.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        assert!(self.recording, "backward on a non-recording graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let parent_vals: Vec<&ArrayD<f64>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let ctx = BackCtx { grad: &grad, value: &node.value, parents: &parent_vals };
            let parent_grads = back(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(self.nodes[*p].value.shape(), pg.shape());
                match &mut grads[*p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(grad);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Some(Box::new(|c: &BackCtx| {
            vec![c.grad.clone(), c.grad.clone()]
        })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Some(Box::new(|c: &BackCtx| {
            vec![c.grad.clone(), c.grad.mapv(|g| -g)]
        })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, vec![a.0, b.0], Some(Box::new(|c: &BackCtx| {
            vec![c.grad * c.parents[1], c.grad * c.parents[0]]
        })))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(v, vec![a.0], Some(Box::new(move |c: &BackCtx| {
            vec![c.grad.mapv(|g| g * k)]
        })))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| vec![c.grad.clone()])))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| {
            let mut g = c.grad.clone();
            g.zip_mut_with(c.value, |gi, &y| *gi *= 1.0 - y * y);
            vec![g]
        })))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| {
            let mut g = c.grad.clone();
            g.zip_mut_with(c.value, |gi, &y| *gi *= y * (1.0 - y));
            vec![g]
        })))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x / (1.0 + (-x).exp()));
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| {
            let mut g = c.grad.clone();
            g.zip_mut_with(c.parents[0], |gi, &x| {
                let s = 1.0 / (1.0 + (-x).exp());
                *gi *= s * (1.0 + x * (1.0 - s));
            });
            vec![g]
        })))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| {
            let mut g = c.grad.clone();
            g.zip_mut_with(c.parents[0], |gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0;
                }
            });
            vec![g]
        })))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, vec![a.0], Some(Box::new(|c: &BackCtx| {
            vec![c.grad * c.value]
        })))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.nodes[a.0].value.shape().to_vec();
        let v = self.nodes[a.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, vec![a.0], Some(Box::new(move |c: &BackCtx| {
            vec![c
                .grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&orig))
                .unwrap()]
        })))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let v = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_v.len()];
        for (i, &ax) in axes_v.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(v, vec![a.0], Some(Box::new(move |c: &BackCtx| {
            vec![c
                .grad
                .clone()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()]
        })))
    }

    /// Concatenate along `axis`. Inverse of per-parent slicing.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.shape()[axis]).collect();
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, parents, Some(Box::new(move |c: &BackCtx| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0isize;
            for &s in &sizes {
                let piece = c
                    .grad
                    .slice_axis(Axis(axis), Slice::from(start..start + s as isize))
                    .to_owned();
                out.push(piece);
                start += s as isize;
            }
            out
        })))
    }

    /// Contiguous slice `[from, to)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, from: usize, to: usize) -> Var {
        let full = self.nodes[a.0].value.shape().to_vec();
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(from as isize..to as isize))
            .to_owned();
        self.push(v, vec![a.0], Some(Box::new(move |c: &BackCtx| {
            let mut g = ArrayD::zeros(IxDyn(&full));
            g.slice_axis_mut(Axis(axis), Slice::from(from as isize..to as isize))
                .assign(c.grad);
            vec![g]
        })))
    }

    // ---- linear algebra ----

    /// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.push(v, vec![a.0, b.0], Some(Box::new(|c: &BackCtx| {
            let g = c.grad.view().into_dimensionality::<Ix2>().unwrap();
            let a = c.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let b = c.parents[1].view().into_dimensionality::<Ix2>().unwrap();
            vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
        })))
    }

    /// Add a per-channel bias vector `(c,)` to every column of `(c, l)`.
    pub fn add_bias_col(&mut self, a: Var, bias: Var) -> Var {
        let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut v = x.to_owned();
        for mut col in v.columns_mut() {
            col += &b;
        }
        self.push(v.into_dyn(), vec![a.0, bias.0], Some(Box::new(|c: &BackCtx| {
            let g = c.grad.view().into_dimensionality::<Ix2>().unwrap();
            vec![c.grad.clone(), g.sum_axis(Axis(1)).into_dyn()]
        })))
    }

    /// Multiply every column of `(c, l)` by a per-channel vector `(c,)`.
    pub fn scale_col(&mut self, a: Var, s: Var) -> Var {
        let x = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let sv = self.nodes[s.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut v = x.to_owned();
        for mut col in v.columns_mut() {
            col *= &sv;
        }
        self.push(v.into_dyn(), vec![a.0, s.0], Some(Box::new(|c: &BackCtx| {
            let g = c.grad.view().into_dimensionality::<Ix2>().unwrap();
            let x = c.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let s = c.parents[1].view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = g.to_owned();
            for mut col in gx.columns_mut() {
                col *= &s;
            }
            let gs = (&g * &x).sum_axis(Axis(1));
            vec![gx.into_dyn(), gs.into_dyn()]
        })))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].value.raw_dim();
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(v, vec![a.0], Some(Box::new(move |c: &BackCtx| {
            let g = c.grad.iter().next().copied().unwrap();
            vec![ArrayD::from_elem(shape.clone(), g)]
        })))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squares of all elements.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }
}
