//! Grouped self-attention (GSA) and compressed cross-attention (CCA) for
//! long-sequence time-series forecasting, on a small reverse-mode tensor
//! engine, with score-element instrumentation for complexity checks.

pub mod attention;
pub mod bench;
pub mod autodiff;
pub mod cca;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gsa;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use attention::{row_softmax, scaled_dot_attention, AttentionMask, OpCounter};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
