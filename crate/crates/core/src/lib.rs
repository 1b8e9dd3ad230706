//! Spatiotemporal field generation on unstructured point clouds.
//!
//! A two-stage pipeline: a point-cloud encoder with KNN edge features and
//! softmax-free (Galerkin) attention, a selective state-space latent rollout,
//! and a query-point cross-attention decoder, trained on field data and then
//! refined per sample against finite-difference physics residuals without
//! ground truth.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod finetune;
pub mod mamba;
pub mod model;
pub mod params;
pub mod physics;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
