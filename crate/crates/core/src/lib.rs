//! Spatiotemporal graph transformer for sensor-network forecasting.
//!
//! A window of `T'` graph signals over `N` sensors is flattened into one
//! token sequence. Tokens carry degree-indexed centrality embeddings and a
//! learned positional embedding, and attention logits receive a learned
//! bias indexed by hop distance between the tokens' sensors.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod graphprep;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
