//! Knowledge distillation through learnable template-matching (KD) layers.
//!
//! The guide in `book/` walks through the pieces; its snippets run as doc-tests.

pub mod assign;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod kd_layer;
pub mod kmeans;
pub mod lda;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod penultimate;
pub mod seed;
pub mod selftest;
pub mod subclass;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Runs the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/assignment.md")]
    mod assignment {}
    #[doc = include_str!("../../../book/src/kd_layer.md")]
    mod kd_layer {}
    #[doc = include_str!("../../../book/src/supervision.md")]
    mod supervision {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
