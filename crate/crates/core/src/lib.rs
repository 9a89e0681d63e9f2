//! Self-supervised joint representation learning for human hand and head
//! movement signals.
//!
//! The toolkit couples a graph-convolutional semantic encoder with a
//! deterministic-diffusion stochastic encoder/decoder. A window of relative
//! hand-head coordinates is summarised by a compact semantic vector plus a
//! same-shaped stochastic tensor, from which the original signal can be
//! reconstructed, perturbed for generation, clustered, or probed with linear
//! classifiers. Everything runs on CPU at desk scale over a documented JSONL
//! recording format; a deterministic synthetic-corpus generator substitutes
//! for real motion datasets.

pub mod nn;
pub mod signals;

pub mod diffusion;
pub mod noise_predictor;
pub mod semantic_encoder;

pub mod forecaster;
pub mod trainer;
