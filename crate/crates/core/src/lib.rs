//! Hierarchical convolutional paragraph generation.
//!
//! A stack of causal topic convolutions produces one topic vector per
//! sentence, each conditioned on the image and on a pooled embedding of the
//! previous sentence; a causal word-convolution stack decodes every topic
//! into words. An optional twin network trained on reversed targets
//! regularises the forward model's hidden features through an L2 term and a
//! Wasserstein critic.

pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
