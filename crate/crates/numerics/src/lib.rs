//! Dense tensors, reverse-mode differentiation and AdamW.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::ParamSet;
pub use tape::{Gradients, OpKind, Tape, Var, DEFAULT_LOG_FLOOR};
pub use tensor::Tensor;
