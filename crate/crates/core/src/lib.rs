//! Semi-supervised gland segmentation with semantic alignment between pixel
//! embeddings, learnable class prototypes and prompt-derived text anchors.

pub mod ablation;
pub mod align;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod overlay;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorKind, Result};
