//! Minimal tensor autodiff used by every network in this crate.
//!
//! No external ML framework: a tape [`graph::Graph`] over `ndarray`
//! tensors, a flat [`params::ParamStore`], layer helpers, Adam, and a
//! finite-difference checker. All arithmetic is f64.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{Bound, GradAccum, ParamId, ParamStore};
