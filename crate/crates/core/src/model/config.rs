use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a multi-exit encoder.
///
/// `num_heads × head_size` is independent of `hidden_size`: heads are pruned
/// while the hidden width stays fixed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_type_ids")]
    pub num_type_ids: usize,
    pub num_classes: usize,
    /// Rank of the factorized word embedding; `None` keeps it dense.
    #[serde(default)]
    pub embed_rank: Option<usize>,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

fn default_type_ids() -> usize {
    2
}

fn default_seq_len() -> usize {
    128
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_type_ids", self.num_type_ids),
            ("num_classes", self.num_classes),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if let Some(r) = self.embed_rank {
            let limit = self.vocab_size.min(self.hidden_size);
            if r == 0 || r > limit {
                return Err(Error::InvalidConfig(format!(
                    "embed_rank {r} outside 1..={limit}"
                )));
            }
        }
        Ok(())
    }

    pub fn attention_width(&self) -> usize {
        self.num_heads * self.head_size
    }

    /// BERT-Base: 12 layers, 768 hidden, 12×64 heads, FFN 3072, |V| = 30522.
    pub fn bert_base(num_classes: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            head_size: 64,
            ffn_size: 3072,
            vocab_size: 30522,
            max_positions: 512,
            num_type_ids: 2,
            num_classes,
            embed_rank: None,
            seq_len: 128,
        }
    }

    /// The 8× slender shape: BERT-Base depth and width with 2×64 heads,
    /// FFN 256 and a rank-128 word embedding.
    pub fn slender_8x(num_classes: usize) -> Self {
        ModelConfig {
            num_heads: 2,
            ffn_size: 256,
            embed_rank: Some(128),
            ..Self::bert_base(num_classes)
        }
    }

    /// The 2× slender shape: 6×64 heads, FFN 1536, rank-384 word embedding.
    pub fn slender_2x(num_classes: usize) -> Self {
        ModelConfig {
            num_heads: 6,
            ffn_size: 1536,
            embed_rank: Some(384),
            ..Self::bert_base(num_classes)
        }
    }

    /// Full-width desk teacher: 6 layers, 64 hidden, 4×16 heads, FFN 256.
    pub fn desk_teacher() -> Self {
        ModelConfig {
            num_layers: 6,
            hidden_size: 64,
            num_heads: 4,
            head_size: 16,
            ffn_size: 256,
            vocab_size: 64,
            max_positions: 64,
            num_type_ids: 1,
            num_classes: 2,
            embed_rank: None,
            seq_len: 32,
        }
    }

    /// Slenderized desk goal: 2×16 heads, FFN 64, rank-16 word embedding.
    pub fn desk_goal() -> Self {
        ModelConfig {
            num_heads: 2,
            ffn_size: 64,
            embed_rank: Some(16),
            ..Self::desk_teacher()
        }
    }
}
