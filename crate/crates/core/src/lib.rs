//! Fast adversarial training with a learnable, sample-dependent
//! adversarial initialization, together with the single-step and
//! multi-step baselines it is measured against.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`graph`] — dense tensors and a tape-based reverse-mode
//!   autodiff engine sufficient for small CNNs and attack gradients;
//! * [`models`] — the target classifiers and the generative
//!   initialization network;
//! * [`attacks`] — FGSM, FGSM with random start, PGD, and robustness
//!   evaluation;
//! * [`initializer`] — the learned sample-dependent initialization and
//!   the generator's ascent step;
//! * [`training`] — the training algorithms, schedules, and the
//!   catastrophic-overfitting monitor;
//! * [`data`], [`checkpoint`], [`metrics`], [`landscape`], [`config`],
//!   [`runner`] — datasets, persistence formats, and run orchestration.
//!
//! All numeric code is generic over the [`scalar::Scalar`] element type;
//! concrete `f32` aliases for the common types live at the crate root
//! (training defaults to `f32`, gradient-check oracles run at `f64`).

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod initializer;
pub mod kernels;
pub mod landscape;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod runner;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Default training scalar type.
pub type F = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type TargetNet32 = models::TargetNet<f32>;
pub type GeneratorNet32 = models::GeneratorNet<f32>;
pub type Dataset32 = data::Dataset<f32>;
pub type Batch32 = data::Batch<f32>;
