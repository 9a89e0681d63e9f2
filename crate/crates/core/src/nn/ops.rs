//! Convolution, pooling and normalization ops for the autodiff graph.
//!
//! All 1-D ops take channel-major `(c, l)` tensors in standard layout.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3};

use super::graph::{BackCtx, Graph, Var};

/// Inclusive bin `[start, end)` used by adaptive average pooling,
/// matching the floor/ceil convention of the usual DL frameworks.
fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = (i * len) / out;
            let end = ((i + 1) * len).div_ceil(out);
            (start, end)
        })
        .collect()
}

fn conv1d_raw(x: &Array2<f64>, w: &Array3<f64>, b: &Array1<f64>, pad: usize) -> Array2<f64> {
    let (c_out, c_in, k) = w.dim();
    let (cx, l) = x.dim();
    assert_eq!(cx, c_in, "conv1d: channel mismatch");
    let mut y = Array2::<f64>::zeros((c_out, l));
    for o in 0..c_out {
        let yo = y.row_mut(o).into_slice().unwrap();
        yo.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..c_in {
            let xr = x.row(c);
            let xs = xr.as_slice().unwrap();
            for kk in 0..k {
                let wv = w[(o, c, kk)];
                if wv == 0.0 {
                    continue;
                }
                // y[o][l] += w * x[c][l + kk - pad]
                let shift = kk as isize - pad as isize;
                let lo = (-shift).max(0) as usize;
                let hi = (l as isize - shift).min(l as isize) as usize;
                for li in lo..hi {
                    yo[li] += wv * xs[(li as isize + shift) as usize];
                }
            }
        }
    }
    y
}

impl Graph {
    /// 1-D convolution, stride 1, zero padding `pad` (use `(k-1)/2` for "same").
    /// `w` has shape `(c_out, c_in, k)`, `b` shape `(c_out,)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.value(x).as_standard_layout().into_owned();
        let xv = xv.into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let y = conv1d_raw(&xv, &wv, &bv, pad).into_dyn();
        self.push_op(y, vec![x, w, b], Box::new(move |c: &BackCtx| {
            let g = c.grad.as_standard_layout().into_owned();
            let g = g.view().into_dimensionality::<Ix2>().unwrap();
            let xv = c.parents[0].as_standard_layout().into_owned();
            let xv = xv.view().into_dimensionality::<Ix2>().unwrap();
            let wv = c.parents[1].view().into_dimensionality::<Ix3>().unwrap();
            let (c_out, c_in, k) = wv.dim();
            let l = xv.dim().1;

            let mut gx = Array2::<f64>::zeros((c_in, l));
            let mut gw = Array3::<f64>::zeros((c_out, c_in, k));
            let mut gb = Array1::<f64>::zeros(c_out);
            for o in 0..c_out {
                let gr = g.row(o);
                let gs = gr.as_slice().unwrap();
                gb[o] += gs.iter().sum::<f64>();
                for ci in 0..c_in {
                    let xs = xv.row(ci);
                    let xs = xs.as_slice().unwrap();
                    let gxr = gx.row_mut(ci).into_slice().unwrap();
                    for kk in 0..k {
                        let shift = kk as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (l as isize - shift).min(l as isize) as usize;
                        let wv_ok = wv[(o, ci, kk)];
                        let mut acc = 0.0;
                        for li in lo..hi {
                            let xi = (li as isize + shift) as usize;
                            acc += gs[li] * xs[xi];
                            gxr[xi] += gs[li] * wv_ok;
                        }
                        gw[(o, ci, kk)] += acc;
                    }
                }
            }
            vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
        }))
    }

    /// 1-D transposed convolution. `w` has shape `(c_in, c_out, k)`.
    /// Output length is `(l - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let (c_in, l) = xv.dim();
        let (wc_in, c_out, k) = wv.dim();
        assert_eq!(c_in, wc_in, "conv_transpose1d: channel mismatch");
        let l_out = (l - 1) * stride + k - 2 * pad;
        let mut y = Array2::<f64>::zeros((c_out, l_out));
        for o in 0..c_out {
            y.row_mut(o).fill(bv[o]);
            for ci in 0..c_in {
                for i in 0..l {
                    let xv_i = xv[(ci, i)];
                    for kk in 0..k {
                        let pos = i as isize * stride as isize + kk as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l_out {
                            y[(o, pos as usize)] += wv[(ci, o, kk)] * xv_i;
                        }
                    }
                }
            }
        }
        self.push_op(y.into_dyn(), vec![x, w, b], Box::new(move |c: &BackCtx| {
            let g = c.grad.view().into_dimensionality::<Ix2>().unwrap();
            let xv = c.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let wv = c.parents[1].view().into_dimensionality::<Ix3>().unwrap();
            let (c_in, l) = xv.dim();
            let (_, c_out, k) = wv.dim();
            let l_out = g.dim().1;
            let mut gx = Array2::<f64>::zeros((c_in, l));
            let mut gw = Array3::<f64>::zeros((c_in, c_out, k));
            let mut gb = Array1::<f64>::zeros(c_out);
            for o in 0..c_out {
                gb[o] += g.row(o).sum();
                for ci in 0..c_in {
                    for i in 0..l {
                        for kk in 0..k {
                            let pos = i as isize * stride as isize + kk as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < l_out {
                                let gv = g[(o, pos as usize)];
                                gx[(ci, i)] += gv * wv[(ci, o, kk)];
                                gw[(ci, o, kk)] += gv * xv[(ci, i)];
                            }
                        }
                    }
                }
            }
            vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
        }))
    }

    /// Average pooling with kernel 2, stride 2, over the last axis.
    /// Works for `(c, l)` and `(c, j, l)` tensors; `l` must be even.
    pub fn avg_pool2_time(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let l = *shape.last().unwrap();
        assert!(l % 2 == 0, "avg_pool2_time: odd length {l}");
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, l))
            .unwrap();
        let mut out = Array2::<f64>::zeros((rows, l / 2));
        for r in 0..rows {
            for m in 0..l / 2 {
                out[(r, m)] = 0.5 * (flat[(r, 2 * m)] + flat[(r, 2 * m + 1)]);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = l / 2;
        let y = out.into_shape_with_order(out_shape.clone()).unwrap().into_dyn();
        self.push_op(y, vec![x], Box::new(move |c: &BackCtx| {
            let g = c
                .grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, l / 2))
                .unwrap();
            let mut gx = Array2::<f64>::zeros((rows, l));
            for r in 0..rows {
                for m in 0..l / 2 {
                    let h = 0.5 * g[(r, m)];
                    gx[(r, 2 * m)] = h;
                    gx[(r, 2 * m + 1)] = h;
                }
            }
            vec![gx.into_shape_with_order(shape.clone()).unwrap().into_dyn()]
        }))
    }

    /// Adaptive average pooling of `(c, l)` to `(c, out_len)`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_len: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (c, l) = xv.dim();
        let bins = adaptive_bins(l, out_len);
        let mut y = Array2::<f64>::zeros((c, out_len));
        for (i, &(s, e)) in bins.iter().enumerate() {
            let width = (e - s) as f64;
            for ch in 0..c {
                y[(ch, i)] = xv.slice(ndarray::s![ch, s..e]).sum() / width;
            }
        }
        self.push_op(y.into_dyn(), vec![x], Box::new(move |ctx: &BackCtx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((c, l));
            for (i, &(s, e)) in bins.iter().enumerate() {
                let width = (e - s) as f64;
                for ch in 0..c {
                    let gv = g[(ch, i)] / width;
                    for li in s..e {
                        gx[(ch, li)] += gv;
                    }
                }
            }
            vec![gx.into_dyn()]
        }))
    }

    /// Nearest-neighbour temporal upsampling by 2: `(c, l) -> (c, 2l)`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (c, l) = xv.dim();
        let mut y = Array2::<f64>::zeros((c, 2 * l));
        for ch in 0..c {
            for li in 0..l {
                y[(ch, 2 * li)] = xv[(ch, li)];
                y[(ch, 2 * li + 1)] = xv[(ch, li)];
            }
        }
        self.push_op(y.into_dyn(), vec![x], Box::new(move |ctx: &BackCtx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((c, l));
            for ch in 0..c {
                for li in 0..l {
                    gx[(ch, li)] = g[(ch, 2 * li)] + g[(ch, 2 * li + 1)];
                }
            }
            vec![gx.into_dyn()]
        }))
    }

    /// Layer normalization over the channel axis (axis 0), independently per
    /// trailing position, with per-channel affine. Accepts any rank >= 1.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = shape[0];
        let m: usize = shape[1..].iter().product::<usize>().max(1);
        let xm = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, m))
            .unwrap();
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = Array2::<f64>::zeros((c, m));
        for col in 0..m {
            let xc = xm.column(col);
            let mu = xc.mean().unwrap();
            let var = xc.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let s = (var + eps).sqrt();
            for ch in 0..c {
                y[(ch, col)] = gv[ch] * (xm[(ch, col)] - mu) / s + bv[ch];
            }
        }
        let y = y.into_shape_with_order(shape.clone()).unwrap().into_dyn();
        self.push_op(y, vec![x, gamma, beta], Box::new(move |ctx: &BackCtx| {
            let g = ctx
                .grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, m))
                .unwrap();
            let xm = ctx
                .parents[0]
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, m))
                .unwrap();
            let gv = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((c, m));
            let mut ggamma = Array1::<f64>::zeros(c);
            let mut gbeta = Array1::<f64>::zeros(c);
            for col in 0..m {
                let xc = xm.column(col);
                let mu = xc.mean().unwrap();
                let var = xc.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                let s = (var + eps).sqrt();
                // x_hat and upstream-through-affine gradient
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ch in 0..c {
                    xhat[ch] = (xm[(ch, col)] - mu) / s;
                    dxhat[ch] = g[(ch, col)] * gv[ch];
                    ggamma[ch] += g[(ch, col)] * xhat[ch];
                    gbeta[ch] += g[(ch, col)];
                    mean_dxhat += dxhat[ch];
                    mean_dxhat_xhat += dxhat[ch] * xhat[ch];
                }
                mean_dxhat /= c as f64;
                mean_dxhat_xhat /= c as f64;
                for ch in 0..c {
                    gx[(ch, col)] = (dxhat[ch] - mean_dxhat - xhat[ch] * mean_dxhat_xhat) / s;
                }
            }
            vec![
                gx.into_shape_with_order(shape.clone()).unwrap().into_dyn(),
                ggamma.into_dyn(),
                gbeta.into_dyn(),
            ]
        }))
    }

    /// Group normalization of `(c, l)` with `groups` groups and per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (c, l) = xv.dim();
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let gs = c / groups;
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut y = Array2::<f64>::zeros((c, l));
        for grp in 0..groups {
            let block = xv.slice(ndarray::s![grp * gs..(grp + 1) * gs, ..]);
            let mu = block.mean().unwrap();
            let var = block.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let s = (var + eps).sqrt();
            for ch in grp * gs..(grp + 1) * gs {
                for li in 0..l {
                    y[(ch, li)] = gv[ch] * (xv[(ch, li)] - mu) / s + bv[ch];
                }
            }
        }
        self.push_op(y.into_dyn(), vec![x, gamma, beta], Box::new(move |ctx: &BackCtx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let xv = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let gv = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((c, l));
            let mut ggamma = Array1::<f64>::zeros(c);
            let mut gbeta = Array1::<f64>::zeros(c);
            let n = (gs * l) as f64;
            for grp in 0..groups {
                let range = grp * gs..(grp + 1) * gs;
                let block = xv.slice(ndarray::s![range.clone(), ..]);
                let mu = block.mean().unwrap();
                let var = block.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                let s = (var + eps).sqrt();
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for ch in range.clone() {
                    for li in 0..l {
                        let xhat = (xv[(ch, li)] - mu) / s;
                        let dxhat = g[(ch, li)] * gv[ch];
                        ggamma[ch] += g[(ch, li)] * xhat;
                        gbeta[ch] += g[(ch, li)];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                for ch in range {
                    for li in 0..l {
                        let xhat = (xv[(ch, li)] - mu) / s;
                        let dxhat = g[(ch, li)] * gv[ch];
                        gx[(ch, li)] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / s;
                    }
                }
            }
            vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
        }))
    }

    /// Normalize each column of `(c, l)` to unit Euclidean norm. A column
    /// with norm below `min_norm` takes the previous column's direction
    /// (`init_fallback` for the first) and gets zero gradient.
    pub fn normalize_cols(&mut self, x: Var, min_norm: f64, init_fallback: &[f64]) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (c, l) = xv.dim();
        assert_eq!(init_fallback.len(), c);
        let mut last_good = init_fallback.to_vec();
        let mut y = Array2::<f64>::zeros((c, l));
        let mut degenerate = vec![false; l];
        for li in 0..l {
            let norm = (0..c).map(|ch| xv[(ch, li)] * xv[(ch, li)]).sum::<f64>().sqrt();
            if norm < min_norm {
                degenerate[li] = true;
                for ch in 0..c {
                    y[(ch, li)] = last_good[ch];
                }
            } else {
                for ch in 0..c {
                    y[(ch, li)] = xv[(ch, li)] / norm;
                    last_good[ch] = y[(ch, li)];
                }
            }
        }
        self.push_op(y.into_dyn(), vec![x], Box::new(move |ctx: &BackCtx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let xv = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let yv = ctx.value.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((c, l));
            for li in 0..l {
                if degenerate[li] {
                    continue;
                }
                let norm = (0..c).map(|ch| xv[(ch, li)] * xv[(ch, li)]).sum::<f64>().sqrt();
                let dot = (0..c).map(|ch| g[(ch, li)] * yv[(ch, li)]).sum::<f64>();
                for ch in 0..c {
                    gx[(ch, li)] = (g[(ch, li)] - yv[(ch, li)] * dot) / norm;
                }
            }
            vec![gx.into_dyn()]
        }))
    }

}

/// View a dynamic tensor as an owned `(c, l)` matrix.
pub fn to_array2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

/// Flatten any tensor to a 1-D array (row-major order).
pub fn to_array1(v: &ArrayD<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}
