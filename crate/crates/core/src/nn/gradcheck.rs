//! Central finite-difference gradient verification.
//!
//! The loss closure must be a pure function of the parameter store (fix any
//! noise draws and run in eval mode before checking).

use ndarray::ArrayD;

use super::params::ParamStore;

/// Numeric gradient of `loss` w.r.t. every parameter element,
/// by central differences with step `eps`.
pub fn central_diff_grads<F>(params: &mut ParamStore, eps: f64, mut loss: F) -> Vec<ArrayD<f64>>
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = params.get(id).raw_dim();
        let n = params.get(id).len();
        let mut g = ArrayD::zeros(shape);
        for i in 0..n {
            let orig = params.get(id).as_slice().unwrap()[i];
            params.get_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
            let up = loss(params);
            params.get_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
            let down = loss(params);
            params.get_mut(id).as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Relative error between two gradient tensors:
/// `|a - b|_2 / max(|a|_2, |b|_2, floor)`.
pub fn rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let na = a.mapv(|x| x * x).sum().sqrt();
    let nb = b.mapv(|x| x * x).sum().sqrt();
    diff / na.max(nb).max(floor)
}

/// Largest per-tensor relative error between analytic and numeric gradients.
/// Missing analytic entries are treated as zero tensors.
pub fn max_rel_error(
    params: &ParamStore,
    analytic: &[Option<ArrayD<f64>>],
    numeric: &[ArrayD<f64>],
    floor: f64,
) -> (f64, String) {
    let mut worst = 0.0;
    let mut worst_name = String::new();
    for (i, (name, value)) in params.iter().enumerate() {
        let zero = ArrayD::zeros(value.raw_dim());
        let a = analytic[i].as_ref().unwrap_or(&zero);
        let e = rel_error(a, &numeric[i], floor);
        if e > worst {
            worst = e;
            worst_name = name.to_string();
        }
    }
    (worst, worst_name)
}
