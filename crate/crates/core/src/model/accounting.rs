//! Exact parameter and FLOPs counts.
//!
//! FLOPs convention: one multiply-accumulate is 2 FLOPs. Counted terms are
//! the Q/K/V/O projections, the two attention products (`QKᵀ` and `P·V`,
//! `2·n²·A` each), the two FFN products, the factorized-embedding projection
//! and the exit classifier. Softmax, layer norm, activations, bias additions
//! and embedding lookups are scalar work and excluded.

use serde::{Deserialize, Serialize};

use super::{LayerShape, ModelConfig, MultiExitModel};
use crate::error::{Error, Result};

/// Everything accounting needs, from a config or a live (possibly
/// non-uniform) model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden_size: usize,
    pub head_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_type_ids: usize,
    pub num_classes: usize,
    pub embed_rank: Option<usize>,
    pub layers: Vec<LayerShape>,
}

impl From<&ModelConfig> for ModelShape {
    fn from(c: &ModelConfig) -> Self {
        ModelShape {
            hidden_size: c.hidden_size,
            head_size: c.head_size,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
            num_type_ids: c.num_type_ids,
            num_classes: c.num_classes,
            embed_rank: c.embed_rank,
            layers: vec![
                LayerShape {
                    num_heads: c.num_heads,
                    ffn_size: c.ffn_size,
                };
                c.num_layers
            ],
        }
    }
}

impl From<&MultiExitModel> for ModelShape {
    fn from(m: &MultiExitModel) -> Self {
        ModelShape {
            embed_rank: m.embed_rank(),
            layers: m.layer_shapes(),
            ..ModelShape::from(m.config())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitHeads {
    None,
    Final,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamOptions {
    /// Count BERT's `H × H` pooler (with bias); used for the baseline only.
    pub pooler: bool,
    pub exits: ExitHeads,
}

impl ParamOptions {
    /// The multi-exit model as deployed: every exit, no pooler.
    pub const MULTI_EXIT: ParamOptions = ParamOptions {
        pooler: false,
        exits: ExitHeads::All,
    };
    /// The BERT-Base reference count: pooler, no task head.
    pub const BERT_BASELINE: ParamOptions = ParamOptions {
        pooler: true,
        exits: ExitHeads::None,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding_word: u64,
    /// Position and token-type tables.
    pub embedding_other: u64,
    /// Q/K/V/O weights and biases over all layers.
    pub mha: u64,
    /// FFN weights and biases over all layers.
    pub ffn: u64,
    /// Embedding and per-layer layer-norm gains and biases.
    pub layer_norms: u64,
    pub exits: u64,
    pub pooler: u64,
    pub total: u64,
}

impl ParamBreakdown {
    pub fn fraction(&self, part: u64) -> f64 {
        part as f64 / self.total as f64
    }
}

pub fn count_params(shape: &ModelShape, opts: ParamOptions) -> ParamBreakdown {
    let h = shape.hidden_size as u64;
    let d = shape.head_size as u64;
    let v = shape.vocab_size as u64;
    let c = shape.num_classes as u64;
    let mut b = ParamBreakdown {
        embedding_word: match shape.embed_rank {
            None => v * h,
            Some(r) => v * r as u64 + r as u64 * h,
        },
        embedding_other: (shape.max_positions + shape.num_type_ids) as u64 * h,
        layer_norms: 2 * h,
        ..Default::default()
    };
    for l in &shape.layers {
        let a = l.num_heads as u64 * d;
        let f = l.ffn_size as u64;
        b.mha += 3 * (h * a + a) + (a * h + h);
        b.ffn += (h * f + f) + (f * h + h);
        b.layer_norms += 4 * h;
    }
    let exit = h * c + c;
    b.exits = match opts.exits {
        ExitHeads::None => 0,
        ExitHeads::Final => exit,
        ExitHeads::All => exit * shape.layers.len() as u64,
    };
    if opts.pooler {
        b.pooler = h * h + h;
    }
    b.total = b.embedding_word
        + b.embedding_other
        + b.mha
        + b.ffn
        + b.layer_norms
        + b.exits
        + b.pooler;
    b
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub seq_len: usize,
    pub exit_layer: usize,
    pub embedding: u64,
    /// Cost of every layer, regardless of `exit_layer`.
    pub per_layer: Vec<u64>,
    pub exit_head: u64,
    /// Embedding + layers `1..=exit_layer` + one exit head.
    pub cumulative: u64,
}

/// FLOPs of a single encoder layer on `seq_len` tokens.
pub fn layer_flops(shape: &ModelShape, layer: LayerShape, seq_len: usize) -> u64 {
    let n = seq_len as u64;
    let h = shape.hidden_size as u64;
    let a = (layer.num_heads * shape.head_size) as u64;
    let f = layer.ffn_size as u64;
    let projections = 2 * n * h * a * 4;
    let attention = 2 * (2 * n * n * a);
    let ffn = 2 * (2 * n * h * f);
    projections + attention + ffn
}

/// FLOPs of one instance of `seq_len` tokens that leaves at `exit_layer`
/// (1-based).
pub fn count_flops(shape: &ModelShape, seq_len: usize, exit_layer: usize) -> Result<FlopsBreakdown> {
    let layers = shape.layers.len();
    if exit_layer == 0 || exit_layer > layers {
        return Err(Error::InvalidArgument(format!(
            "exit layer {exit_layer} outside 1..={layers}"
        )));
    }
    let n = seq_len as u64;
    let h = shape.hidden_size as u64;
    let embedding = shape.embed_rank.map_or(0, |r| 2 * n * r as u64 * h);
    let per_layer: Vec<u64> = shape
        .layers
        .iter()
        .map(|&l| layer_flops(shape, l, seq_len))
        .collect();
    let exit_head = 2 * h * shape.num_classes as u64;
    let cumulative = embedding + per_layer[..exit_layer].iter().sum::<u64>() + exit_head;
    Ok(FlopsBreakdown {
        seq_len,
        exit_layer,
        embedding,
        per_layer,
        exit_head,
        cumulative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bert_base_counts() {
        let b = count_params(&(&ModelConfig::bert_base(2)).into(), ParamOptions::BERT_BASELINE);
        assert_eq!(b.total, 109_482_240);
        assert_eq!(b.embedding_word, 23_440_896);
        assert!(b.fraction(b.embedding_word) < 0.22);
        assert!(b.fraction(b.mha) < 0.26);
        assert!(b.fraction(b.ffn) < 0.52);
    }

    #[test]
    fn slender_8x_counts() {
        let b = count_params(&(&ModelConfig::slender_8x(2)).into(), ParamOptions::MULTI_EXIT);
        assert_eq!(b.total, 13_920_024);
    }

    #[test]
    fn factorized_embedding_formula() {
        let mut c = ModelConfig::desk_teacher();
        c.embed_rank = Some(16);
        let b = count_params(&(&c).into(), ParamOptions::MULTI_EXIT);
        assert_eq!(b.embedding_word, 64 * 16 + 16 * 64);
        c.embed_rank = Some(64);
        let b = count_params(&(&c).into(), ParamOptions::MULTI_EXIT);
        assert_eq!(b.embedding_word, 64 * 64 + 64 * 64);
    }

    #[test]
    fn flops_identity_and_superlinearity() {
        let shape: ModelShape = (&ModelConfig::slender_8x(2)).into();
        let f = count_flops(&shape, 128, 12).unwrap();
        assert_eq!(
            f.cumulative,
            f.embedding + f.per_layer.iter().sum::<u64>() + f.exit_head
        );
        let f2 = count_flops(&shape, 256, 12).unwrap();
        assert!(f2.per_layer[0] > 2 * f.per_layer[0]);
        assert!(count_flops(&shape, 128, 0).is_err());
        assert!(count_flops(&shape, 128, 13).is_err());
    }

    #[test]
    fn per_layer_ratio_bert_over_8x() {
        let base: ModelShape = (&ModelConfig::bert_base(2)).into();
        let slim: ModelShape = (&ModelConfig::slender_8x(2)).into();
        let rb = layer_flops(&base, base.layers[0], 128);
        let rs = layer_flops(&slim, slim.layers[0], 128);
        assert_eq!(rb, 1_862_270_976);
        assert_eq!(rs, 209_715_200);
    }
}
