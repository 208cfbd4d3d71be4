//! Drag-based layout editing of style-based generators.
//!
//! A transformer encoder-decoder reads a variable-length set of user motion
//! annotations together with generator features and predicts per-layer latent
//! directions; it is trained without labels from synthetic image pairs and
//! flow-derived pseudo annotations.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod generator;
pub mod interaction;
pub mod latent;
pub mod optim;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
