//! Structured dropout over transformer layers, with inference-time pruning.
//!
//! The crate trains small decoder-only language models in which whole
//! structures (layers, sub-layers, attention heads, FFN blocks, or single
//! weights) are randomly dropped during training. A model trained this way
//! tolerates having layers removed at inference time, so one deep model can
//! be cut down to any depth without retraining. The pruning strategies
//! (every-other, validation search, learned gates) live in [`prune`];
//! experiment sweeps and perplexity evaluation live in [`eval`].
//!
//! Everything is built on a small f64 tensor core with reverse-mode
//! autodiff ([`tensor`], [`tape`]) so that gradients are checkable against
//! finite differences and runs are bit-for-bit reproducible from a seed.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod prune;
pub mod rng;
pub mod structdrop;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
