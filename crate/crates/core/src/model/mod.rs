//! The multi-exit encoder: configuration, weights, forward pass, accounting
//! and checkpoints.
//!
//! Layout per layer is post-layer-norm BERT:
//! `h₁ = LN(x + MHA(x))`, `out = LN(h₁ + FFN(h₁))`, with one linear exit
//! classifier per layer reading the first-token hidden state. There is no
//! pooler.

pub mod accounting;
pub mod checkpoint;
mod config;
mod forward;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::ModelConfig;
pub use forward::{Batch, BoundModel, ForwardNodes, ForwardOptions, ForwardRecord};
pub use weights::{EmbeddingWeights, ExitWeights, LayerWeights, Weights, WordEmbedding};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Matrix;

const INIT_STD: f64 = 0.02;

/// Live width of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LayerShape {
    pub num_heads: usize,
    pub ffn_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiExitModel {
    config: ModelConfig,
    pub weights: Weights<Matrix>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * INIT_STD);
        }
    }
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl MultiExitModel {
    /// Truncated-normal weights (σ = 0.02, cut at 2σ), zero biases, unit
    /// layer-norm gains. A configured `embed_rank` is realized by factorizing
    /// a freshly drawn dense embedding.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let a = config.attention_width();
        let f = config.ffn_size;
        let dense = truncated_normal(&mut rng, config.vocab_size, h);
        let word = match config.embed_rank {
            None => WordEmbedding::Dense(dense),
            Some(r) => {
                let (w1, w2) = linalg::truncate_factor(&linalg::svd(&dense)?, r)?;
                WordEmbedding::Factorized { w1, w2 }
            }
        };
        let embedding = EmbeddingWeights {
            word,
            position: truncated_normal(&mut rng, config.max_positions, h),
            token_type: truncated_normal(&mut rng, config.num_type_ids, h),
            ln_gain: Matrix::filled(1, h, 1.0),
            ln_bias: Matrix::zeros(1, h),
        };
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: truncated_normal(&mut rng, h, a),
                bq: Matrix::zeros(1, a),
                wk: truncated_normal(&mut rng, h, a),
                bk: Matrix::zeros(1, a),
                wv: truncated_normal(&mut rng, h, a),
                bv: Matrix::zeros(1, a),
                wo: truncated_normal(&mut rng, a, h),
                bo: Matrix::zeros(1, h),
                attn_ln_gain: Matrix::filled(1, h, 1.0),
                attn_ln_bias: Matrix::zeros(1, h),
                w_fi: truncated_normal(&mut rng, h, f),
                b_fi: Matrix::zeros(1, f),
                w_fo: truncated_normal(&mut rng, f, h),
                b_fo: Matrix::zeros(1, h),
                ffn_ln_gain: Matrix::filled(1, h, 1.0),
                ffn_ln_bias: Matrix::zeros(1, h),
            })
            .collect();
        let exits = (0..config.num_layers)
            .map(|_| ExitWeights {
                w: truncated_normal(&mut rng, h, config.num_classes),
                b: Matrix::zeros(1, config.num_classes),
            })
            .collect();
        let model = MultiExitModel {
            config: config.clone(),
            weights: Weights {
                embedding,
                layers,
                exits,
            },
        };
        Ok(model)
    }

    /// Wraps existing weights after checking them against `config`.
    pub fn from_parts(config: ModelConfig, weights: Weights<Matrix>) -> Result<Self> {
        config.validate()?;
        let mut model = MultiExitModel { config, weights };
        model.check_structure()?;
        model.sync_config();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.weights.layers.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn head_size(&self) -> usize {
        self.config.head_size
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        let l = &self.weights.layers[layer];
        LayerShape {
            num_heads: l.wq.cols() / self.config.head_size,
            ffn_size: l.w_fi.cols(),
        }
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        (0..self.num_layers()).map(|l| self.layer_shape(l)).collect()
    }

    /// True when every layer has the same head count and FFN width.
    pub fn is_uniform(&self) -> bool {
        let shapes = self.layer_shapes();
        shapes.windows(2).all(|w| w[0] == w[1])
    }

    pub fn embed_rank(&self) -> Option<usize> {
        match &self.weights.embedding.word {
            WordEmbedding::Dense(_) => None,
            WordEmbedding::Factorized { w1, .. } => Some(w1.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.slots().iter().map(|m| m.len()).sum()
    }

    /// Re-derives the width fields of the config from the live tensors.
    /// Non-uniform models report their widest layer.
    pub(crate) fn sync_config(&mut self) {
        let shapes = self.layer_shapes();
        self.config.num_heads = shapes.iter().map(|s| s.num_heads).max().unwrap_or(0);
        self.config.ffn_size = shapes.iter().map(|s| s.ffn_size).max().unwrap_or(0);
        self.config.embed_rank = self.embed_rank();
    }

    fn check_structure(&self) -> Result<()> {
        let c = &self.config;
        let (h, d) = (c.hidden_size, c.head_size);
        let w = &self.weights;
        let bad = |what: String| Err(Error::InvalidConfig(what));
        if w.layers.len() != c.num_layers || w.exits.len() != c.num_layers {
            return bad(format!(
                "{} layers / {} exits for num_layers {}",
                w.layers.len(),
                w.exits.len(),
                c.num_layers
            ));
        }
        let e = &w.embedding;
        let word_ok = match &e.word {
            WordEmbedding::Dense(m) => m.shape() == (c.vocab_size, h),
            WordEmbedding::Factorized { w1, w2 } => {
                w1.rows() == c.vocab_size && w2.shape() == (w1.cols(), h)
            }
        };
        if !word_ok
            || e.position.shape() != (c.max_positions, h)
            || e.token_type.shape() != (c.num_type_ids, h)
            || e.ln_gain.shape() != (1, h)
            || e.ln_bias.shape() != (1, h)
        {
            return bad("embedding tensor shapes".into());
        }
        for (i, l) in w.layers.iter().enumerate() {
            let a = l.wq.cols();
            let f = l.w_fi.cols();
            let ok = a > 0
                && a % d == 0
                && f > 0
                && [&l.wq, &l.wk, &l.wv].iter().all(|m| m.shape() == (h, a))
                && [&l.bq, &l.bk, &l.bv].iter().all(|m| m.shape() == (1, a))
                && l.wo.shape() == (a, h)
                && l.w_fi.shape() == (h, f)
                && l.b_fi.shape() == (1, f)
                && l.w_fo.shape() == (f, h)
                && [
                    &l.bo,
                    &l.b_fo,
                    &l.attn_ln_gain,
                    &l.attn_ln_bias,
                    &l.ffn_ln_gain,
                    &l.ffn_ln_bias,
                ]
                .iter()
                .all(|m| m.shape() == (1, h));
            if !ok {
                return bad(format!("layer {i} tensor shapes"));
            }
        }
        for (i, x) in w.exits.iter().enumerate() {
            if x.w.shape() != (h, c.num_classes) || x.b.shape() != (1, c.num_classes) {
                return bad(format!("exit {i} tensor shapes"));
            }
        }
        Ok(())
    }

    /// Evaluates every exit and hidden state without recording gradients.
    pub fn forward_all(&self, batch: &Batch) -> Result<ForwardRecord> {
        let mut g = crate::autodiff::Graph::new();
        let bound = BoundModel::bind(self, &mut g, false);
        let nodes = bound.forward(&mut g, batch, &ForwardOptions::all_exits(self.num_layers()))?;
        Ok(ForwardRecord {
            hidden: nodes.hidden.iter().map(|&n| g.value(n).clone()).collect(),
            logits: nodes
                .logits
                .iter()
                .map(|n| g.value(n.expect("all exits requested")).clone())
                .collect(),
        })
    }

    /// Replaces exit heads with freshly initialized ones.
    pub fn reset_exits(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c) = (self.config.hidden_size, self.config.num_classes);
        for exit in &mut self.weights.exits {
            exit.w = truncated_normal(&mut rng, h, c);
            exit.b = Matrix::zeros(1, c);
        }
    }

    /// Replaces the dense word embedding by its rank-`rank` truncated SVD.
    pub fn factorize_embedding(&self, rank: usize) -> Result<MultiExitModel> {
        let WordEmbedding::Dense(dense) = &self.weights.embedding.word else {
            return Err(Error::InvalidArgument(
                "word embedding is already factorized".into(),
            ));
        };
        let limit = dense.rows().min(dense.cols());
        if rank == 0 || rank > limit {
            return Err(Error::InvalidArgument(format!(
                "embedding rank {rank} outside 1..={limit}"
            )));
        }
        let (w1, w2) = linalg::truncate_factor(&linalg::svd(dense)?, rank)?;
        let mut out = self.clone();
        out.weights.embedding.word = WordEmbedding::Factorized { w1, w2 };
        out.sync_config();
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
