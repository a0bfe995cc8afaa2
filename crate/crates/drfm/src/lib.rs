//! Diffusion random feature models.
//!
//! A DDPM-style diffusion model whose noise predictor is a semi-random
//! feature expansion instead of a neural network: random frequencies `W` and
//! phases `b` stay fixed while a timestep embedding `theta1` and linear
//! readout `theta2` are trained with hand-derived analytic gradients — no
//! autodiff anywhere. The crate provides the closed-form forward process,
//! the model and its training loop, ancestral sampling/denoising, bit-exact
//! readers and writers for the on-disk formats, and a verification suite
//! that certifies the identities the construction rests on.
//!
//! Everything stochastic is driven by counter-based seed streams ([`rng`]),
//! and the parallel execution paths (default `parallel` feature, see
//! [`exec`]) are arranged to be bit-identical to the sequential ones.

pub mod data_io;
pub mod error;
pub mod exec;
pub(crate) mod linalg;
pub mod mat;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod verify;

pub use data_io::{Checkpoint, DataKind, Dataset};
pub use error::{Error, Result};
pub use mat::Mat;
pub use model::{ModelMode, RandomFeatures, RhoSpec, TrainableParams};
pub use sampler::{NoiseRule, SamplerVariant};
pub use schedule::VarianceSchedule;
pub use training::{GradientSet, LossWeighting, OptimizerState, TrainConfig, TrainRun};
pub use verify::{GaussianSpec, LemmaExperimentConfig, Report};

#[cfg(test)]
pub(crate) mod testutil;
