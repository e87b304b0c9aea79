use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            max_seq_len: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Weights and biases of one block.
    pub fn layer_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + 2 * d * f + f + d + 4 * d
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * self.layer_param_count()
            + 2 * d
            + d * self.vocab_size
    }

    /// Matmul FLOPs per token excluding attention mixing (2 per MAC).
    pub fn param_flops_per_token(&self) -> f64 {
        let (d, f) = (self.d_model as f64, self.d_ff as f64);
        let per_layer = 4.0 * d * d + 2.0 * d * f;
        2.0 * (self.n_layers as f64 * per_layer + d * self.vocab_size as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_dim_and_validation() {
        let c = ModelConfig {
            d_model: 32,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert_eq!(c.head_dim(), 8);
        assert!(c.validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("divisible"));
        let zero = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn strict_parsing() {
        let c: ModelConfig = serde_json::from_str(r#"{"n_layers": 2}"#).unwrap();
        assert_eq!(c.n_layers, 2);
        assert_eq!(c.d_model, 128);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"layers": 2}"#).is_err());
    }
}
