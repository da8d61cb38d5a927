pub mod checkpoint;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod recdata;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{GradScope, LayerMask, ModelConfig, SuppressionSpec, TokenId, TransformerModel};
pub use tensor::{Tape, Tensor, Var};
