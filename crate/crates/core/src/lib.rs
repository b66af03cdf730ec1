//! Toolkit for dissecting convolutional image generators: label internal
//! units by segmentation agreement, measure and optimize their causal effect
//! through interventions, and flag artifact-producing units by per-unit
//! Frechet distance.
//!
//! The [`scene`] module builds synthetic generators whose causal units are
//! planted by construction, which gives every procedure here a ground truth
//! to be checked against.

pub mod diagnose;
pub mod dissect;
pub mod error;
pub mod image_io;
pub mod intervene;
pub mod network;
pub mod persist;
pub mod scene;
pub mod segment;
pub mod session;
pub mod tensor;
pub mod weights;

pub use error::{GdError, Result};
pub use network::{LayerSpec, NetworkSpec};
pub use tensor::Tensor;
