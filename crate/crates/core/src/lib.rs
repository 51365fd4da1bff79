//! Dynamic region-aware graph convolutional network for privacy-leaking
//! image detection, at desk scale.
//!
//! The pipeline: a small convolutional [`backbone`] produces a feature map;
//! [`region`] groups its channels into region-aware maps; [`correlation`]
//! builds a per-image adjacency with self-attention and propagates region
//! features through two GCN layers before classification. [`train`] runs the
//! staged schedule on the synthetic co-occurrence benchmark from [`data`].

pub mod backbone;
pub mod config;
pub mod correlation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod kmeans;
pub mod layers;
pub mod model;
pub mod region;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_terms, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
