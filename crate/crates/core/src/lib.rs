//! Tied multi-depth Transformer: one parameter set trained on every
//! encoder/decoder layer combination, decodable at any `(n, m)` depth.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod selector;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{LayerCombination, ModelConfig, Parameters};
pub use tensor::{Real, Tensor};
