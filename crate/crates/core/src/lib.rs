//! Two-stage cross-domain text classification: masked-LM enhanced prompt
//! tuning on labeled source data, then adaptation to an unlabeled target
//! domain with masked-LM and self-supervised distillation.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod model;
pub mod prompting;
pub mod rng;
pub mod saliency;
pub mod training;

pub use error::{Error, Result};
