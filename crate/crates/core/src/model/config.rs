use serde::{Deserialize, Serialize};

use super::ModelError;

/// Switches for the ablation variants of the ranking branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Train the pairwise ranking branch at all.
    pub use_rank_head: bool,
    /// Relational attention over the pair; when off the rank head sees the
    /// difference of mean-pooled embeddings.
    pub use_relational_attention: bool,
    /// `O = A·V` over the concatenated values instead of the split product.
    pub merged_dot_product: bool,
    /// Feed `[O_i; O_j]` to the rank FFN instead of `O_i - O_j`.
    pub concat_instead_of_subtract: bool,
    /// Self-attention over `[q; z'_i; z'_j]` instead of attentional pooling.
    pub self_attention_pooling: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_rank_head: true,
            use_relational_attention: true,
            merged_dot_product: false,
            concat_instead_of_subtract: false,
            self_attention_pooling: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Patch tokens per image.
    pub p: usize,
    /// Text tokens from the frozen text encoder.
    pub t: usize,
    /// Learnable prompt tokens appended to the text tokens.
    pub t_prime: usize,
    /// Backbone embedding width.
    pub d: usize,
    /// Adapter embedding width after projection.
    pub d_prime: usize,
    pub num_encoder_blocks: usize,
    /// Relational tokens in the ranking-aware attention.
    pub relational_tokens: usize,
    /// Attention heads in the encoder blocks.
    pub heads: usize,
    pub reg_head_blocks: usize,
    pub rank_head_ffn_blocks: usize,
    pub ablation: AblationFlags,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            p: 100,
            t: 77,
            t_prime: 32,
            d: 768,
            d_prime: 512,
            num_encoder_blocks: 2,
            relational_tokens: 16,
            heads: 1,
            reg_head_blocks: 2,
            rank_head_ffn_blocks: 3,
            ablation: AblationFlags::default(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("p", self.p),
            ("t", self.t),
            ("t_prime", self.t_prime),
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("relational_tokens", self.relational_tokens),
            ("heads", self.heads),
            ("num_encoder_blocks", self.num_encoder_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d.is_multiple_of(self.heads) || !self.d_prime.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "heads ({}) must divide d ({}) and d_prime ({})",
                self.heads, self.d, self.d_prime
            )));
        }
        if self.ablation.merged_dot_product && self.ablation.concat_instead_of_subtract {
            return Err(ModelError::Config(
                "merged_dot_product yields a single output; it cannot be combined with concat_instead_of_subtract"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Width of the vector the rank FFN consumes.
    pub fn rank_input_dim(&self) -> usize {
        if self.ablation.concat_instead_of_subtract {
            2 * self.d_prime
        } else {
            self.d_prime
        }
    }

    /// Text keys seen by cross-attention.
    pub fn text_keys(&self) -> usize {
        self.t + self.t_prime
    }
}
