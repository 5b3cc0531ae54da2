//! Temporal memory attention for video semantic segmentation, built on a
//! small `f64` reverse-mode tensor core.
//!
//! The query frame's features attend over every position of `T` past memory
//! frames; the attention readout is fused with the query's own value features
//! before a per-pixel classifier. `T = 0` gives the per-frame baseline.

pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod io;
pub mod label;
pub mod metrics;
pub mod model;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE_INDEX};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
