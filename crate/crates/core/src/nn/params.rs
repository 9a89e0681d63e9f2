//! Named parameter storage shared by all trainable networks.
//!
//! A [`ParamStore`] owns every learnable tensor of a model, keyed by a
//! dotted path ("unet.stem.w"). Forward passes bind the store into a
//! [`Graph`] as leaves; gradients come back indexed by the same ids, so
//! the optimizer and the checkpoint writer see one flat registry.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::graph::{Graph, Var};

/// Stable handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Register a tensor under `name`. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Insert every parameter into `g` as a leaf and remember the vars.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.values.iter().map(|v| g.leaf(v.clone())).collect();
        Bound { vars }
    }
}

/// Per-graph binding of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extract the gradient of every bound parameter from a backward pass.
    pub fn grads(&self, all: &[Option<ArrayD<f64>>]) -> Vec<Option<ArrayD<f64>>> {
        self.vars.iter().map(|v| all[v.0].clone()).collect()
    }
}

/// Accumulates per-parameter gradients over a batch.
pub struct GradAccum {
    sums: Vec<Option<ArrayD<f64>>>,
    count: usize,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum { sums: vec![None; store.len()], count: 0 }
    }

    pub fn add(&mut self, grads: Vec<Option<ArrayD<f64>>>) {
        assert_eq!(grads.len(), self.sums.len());
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => *acc += &g,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        self.count += 1;
    }

    /// Mean gradients over everything added so far.
    pub fn mean(mut self) -> Vec<Option<ArrayD<f64>>> {
        let k = 1.0 / self.count.max(1) as f64;
        for slot in &mut self.sums {
            if let Some(g) = slot {
                g.mapv_inplace(|x| x * k);
            }
        }
        self.sums
    }
}

// ---- initializers ----

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Identity plus small Gaussian noise, for learnable adjacency matrices.
pub fn near_identity<R: Rng>(rng: &mut R, n: usize, noise: f64) -> ArrayD<f64> {
    use rand_distr::Distribution;
    let normal = rand_distr::StandardNormal;
    let mut m = ArrayD::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        for j in 0..n {
            let z: f64 = normal.sample(rng);
            m[[i, j]] = if i == j { 1.0 } else { 0.0 } + noise * z;
        }
    }
    m
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
