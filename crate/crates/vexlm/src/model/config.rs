use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and seed of an encoder MLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every hidden layer (the embedding dimension).
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Inner width of the feed-forward blocks.
    pub ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |field: &str, msg: String| {
            Err(ModelError::InvalidConfig {
                field: field.to_string(),
                message: msg,
            })
        };
        if self.hidden == 0 {
            return fail("hidden", "must be positive".into());
        }
        if self.layers == 0 {
            return fail("layers", "must be positive".into());
        }
        if self.heads == 0 {
            return fail("heads", "must be positive".into());
        }
        if self.ff == 0 {
            return fail("ff", "must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(
                "hidden",
                format!("{} not divisible by heads {}", self.hidden, self.heads),
            );
        }
        if self.max_seq_len < 8 {
            return fail("max_seq_len", format!("{} < 8", self.max_seq_len));
        }
        if self.vocab_size < 5 {
            return fail("vocab_size", format!("{} < 5", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

impl Default for ModelConfig {
    /// Desk-scale default: a compact two-layer encoder.
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ff: 256,
            max_seq_len: 64,
            vocab_size: 5,
            seed: 0,
        }
    }
}
