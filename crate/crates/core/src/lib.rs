//! Patch-wise multiscale score-norm anomaly localization.
//!
//! A noise-conditioned score network is trained on inlier images. For each
//! image patch the L2 norms of its score at several noise levels form a
//! feature vector whose density, conditioned on the patch position and on
//! learned global image features, is modeled by a conditional normalizing
//! flow. Patch negative log-likelihoods become an anomaly heatmap.

pub mod autodiff;
pub mod baseline;
pub mod error;
pub mod experiment;
pub mod features;
pub mod flow;
pub mod image;
pub mod inference;
pub mod io;
pub mod lesion;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
