use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tokens::ByteTokenizer;

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Two-layer byte-level toy model.
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_mlp: 512,
            vocab_size: ByteTokenizer::VOCAB,
            max_context: 128,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_mlp == 0 || self.vocab_size == 0 || self.max_context == 0 {
            return Err(LabError::Config(format!("zero-sized model dimension in {self:?}")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(LabError::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_model < 2 {
            return Err(LabError::Config("d_model must be at least 2 for layer norm".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * self.d_mlp + self.d_mlp) + (self.d_mlp * d + d);
        let embed = self.vocab_size * d + self.max_context * d;
        let unembed = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        embed + self.n_layers * per_block + 2 * d + unembed
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }
}
