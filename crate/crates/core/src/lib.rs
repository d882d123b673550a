//! Prototype-based interpretable video regression.
//!
//! A clip is encoded by a 3D convolutional backbone into a spatio-temporal
//! feature volume; a region-of-interest head produces one nonnegative
//! occurrence map per prototype, and occurrence-weighted average pooling
//! yields one feature vector per prototype. Cosine similarities to the
//! prototype vectors, scaled by learned importances and a temperature, go
//! through a softmax whose weights average the prototype labels into the
//! prediction. The per-prototype weights form a score sheet that reproduces
//! the prediction exactly.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod feature_extractor;
pub mod losses;
pub mod model;
pub mod nn;
pub mod prototype;
pub mod trainer;

pub use error::{Error, Result};
