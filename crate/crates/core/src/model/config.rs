use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Filled from the vocabulary when zero.
    pub vocab_size: usize,
    pub dropout: f64,
    pub tie_output_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ff_dim: 256,
            max_positions: 128,
            vocab_size: 0,
            dropout: 0.1,
            tie_output_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::ModelConfig(m));
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return err(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ff_dim == 0 {
            return err("ff_dim must be positive".into());
        }
        if self.vocab_size < 7 {
            return err(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_positions < crate::prompting::FRAME_TOKENS + 1 {
            return err(format!(
                "max_positions {} cannot hold a prompt",
                self.max_positions
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Named fields as `(name, value)` strings, for mismatch reports.
    pub(crate) fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("tie_output_embeddings", self.tie_output_embeddings.to_string()),
        ]
    }

    /// Fails with the first field that differs from `expected`.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        for ((field, found), (_, want)) in self.fields().into_iter().zip(expected.fields()) {
            if found != want {
                return Err(Error::ConfigMismatch {
                    field: field.to_string(),
                    expected: want,
                    found,
                });
            }
        }
        Ok(())
    }
}
