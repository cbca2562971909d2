use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon used by both norm kinds.
pub const NORM_EPS: f32 = 1e-5;

pub const DEFAULT_ROPE_THETA: f32 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    /// `down(gelu(up(x)))`
    Gelu,
    /// `down(silu(gate(x)) * up(x))`
    SiluGated,
}

/// Architecture hyperparameters of a pre-norm decoder-only transformer with
/// rotary position embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub activation_kind: ActivationKind,
    pub rope_theta: f32,
}

impl ModelConfig {
    /// A config with `hidden_dim = n_heads * head_dim` and default theta.
    pub fn new(
        vocab_size: usize,
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        ffn_dim: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            vocab_size,
            n_layers,
            n_heads,
            head_dim,
            hidden_dim: n_heads * head_dim,
            ffn_dim,
            max_seq_len,
            norm_kind: NormKind::RmsNorm,
            activation_kind: ActivationKind::SiluGated,
            rope_theta: DEFAULT_ROPE_THETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.n_heads.checked_mul(self.head_dim) != Some(self.hidden_dim) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} != n_heads {} * head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rope_theta {} must be positive",
                self.rope_theta
            )));
        }
        // keep every tensor dimension within the u32 range of the file format
        if counts.iter().any(|(_, v)| *v > u32::MAX as usize) {
            return Err(Error::InvalidConfig("dimension exceeds u32".into()));
        }
        Ok(())
    }
}
