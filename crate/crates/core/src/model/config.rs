// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::corpus::Architecture;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    /// Width of each FFN intermediate layer, i.e. neurons per layer.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be >= 1".into());
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(format!("model_dim {} must be divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn causal(&self) -> bool {
        self.architecture == Architecture::AutoRegressive
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.ffn_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            architecture: Architecture::AutoEncoding,
            n_layers: 2,
            model_dim: 16,
            n_heads: 4,
            ffn_dim: 8,
            vocab_size: 20,
            max_seq_len: 8,
            seed: 0,
        }
    }

    #[test]
    fn validates() {
        assert!(base().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..base() }.validate().is_err());
        assert!(ModelConfig { ffn_dim: 0, ..base() }.validate().is_err());
    }
}
