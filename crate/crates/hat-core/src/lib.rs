//! Hierarchical-attention vision backbone: tensors, autodiff, attention
//! variants, carrier-token stages, model assembly, complexity accounting and
//! weight archives.
//!
//! # Layout
//!
//! - [`tensor`], [`graph`]: dense tensors and the reverse-mode tape.
//! - [`nn`]: convolution, norm and MLP building blocks.
//! - [`attention`]: full, windowed, carrier-token and two-level global
//!   attention, plus the learned relative/absolute position bias tables.
//! - [`hat`]: the carrier-token stage and its windowed-only twin.
//! - [`model`]: variant registry, stem/stage/head assembly, parameter
//!   accounting and surgery.
//! - [`flops`]: closed-form multiply-accumulate formulas and scaling fits,
//!   checked elsewhere against the live counter in [`graph`].
//! - [`archive`], [`config`]: weight serialization and run configuration.
//! - [`init`], [`gradcheck`]: deterministic initialization and the
//!   finite-difference harness.

pub mod archive;
pub mod attention;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod hat;
pub mod init;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Value};
pub use tensor::{Scalar, Tensor};
