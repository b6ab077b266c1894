//! Domain alignment layers for multi-source unsupervised domain adaptation.
//!
//! The crate bundles a small 64-bit reverse-mode autodiff engine, a layer kit
//! with per-domain batch normalization under a shared affine transform, a
//! model-graph rewriting pass that embeds those layers into a classifier, the
//! source cross-entropy plus target-entropy objective, Adadelta, data loaders,
//! and a leave-one-domain-out experiment harness.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod tensor;

pub use autodiff::{grad_check, Elementwise, GradCheckReport, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
