use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{LayerShape, MultiExitModel, Weights, WordEmbedding};

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch_size × seq_len` ids, row-major.
    pub ids: Vec<usize>,
    /// `false` marks padding positions, which no query may attend to.
    pub mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Right-pads every sequence with id 0 to the longest length.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend(s.iter().map(|&t| t as usize));
            mask.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(0).take(seq_len - s.len()));
            mask.extend(std::iter::repeat(false).take(seq_len - s.len()));
        }
        Ok(Batch {
            ids,
            mask,
            batch_size: seqs.len(),
            seq_len,
        })
    }

    /// Explicit ids and mask, both `batch_size × seq_len`.
    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || ids.len() != mask.len() || ids.len() % seq_len != 0 || ids.is_empty() {
            return Err(Error::InvalidArgument("ids/mask/seq_len disagree".into()));
        }
        Ok(Batch {
            batch_size: ids.len() / seq_len,
            ids,
            mask,
            seq_len,
        })
    }

    pub fn sequence_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Row indices (into the flattened `B·n` rows) of non-padding tokens.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Hidden states `H_0` (embedding output) through `H_L`, and exit logits
/// `z_1 … z_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    /// `L + 1` matrices of shape `(B·n) × H`.
    pub hidden: Vec<Matrix>,
    /// `L` matrices of shape `B × C`.
    pub logits: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Which exits produce logits; the others are skipped entirely.
    pub active_exits: Vec<bool>,
    /// Rescale layer gradients to the mean over the active downstream exits.
    pub gradient_equilibrium: bool,
}

impl ForwardOptions {
    pub fn all_exits(num_layers: usize) -> Self {
        ForwardOptions {
            active_exits: vec![true; num_layers],
            gradient_equilibrium: false,
        }
    }

    pub fn final_exit(num_layers: usize) -> Self {
        let mut active_exits = vec![false; num_layers];
        active_exits[num_layers - 1] = true;
        ForwardOptions {
            active_exits,
            gradient_equilibrium: false,
        }
    }

    pub fn with_equilibrium(mut self, on: bool) -> Self {
        self.gradient_equilibrium = on;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub hidden: Vec<NodeId>,
    pub logits: Vec<Option<NodeId>>,
}

/// A model whose weights are leaves of a graph.
pub struct BoundModel {
    pub weights: Weights<NodeId>,
    shapes: Vec<LayerShape>,
    head_size: usize,
    max_positions: usize,
    vocab_size: usize,
}

impl BoundModel {
    /// Registers every weight as a borrowed leaf; `trainable` controls
    /// whether gradients flow into them.
    pub fn bind<'a>(model: &'a MultiExitModel, g: &mut Graph<'a>, trainable: bool) -> Self {
        Self::bind_with(model, g, |_| trainable)
    }

    /// Like [`BoundModel::bind`], choosing per named slot (see
    /// [`Weights::named`]) whether it receives gradients.
    pub fn bind_with<'a>(
        model: &'a MultiExitModel,
        g: &mut Graph<'a>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut flags = model
            .weights
            .named()
            .into_iter()
            .map(|(name, _)| trainable(&name));
        let weights = model.weights.map(|m| {
            if flags.next().expect("same traversal order") {
                g.param(m)
            } else {
                g.constant_ref(m)
            }
        });
        BoundModel {
            weights,
            shapes: model.layer_shapes(),
            head_size: model.head_size(),
            max_positions: model.config().max_positions,
            vocab_size: model.config().vocab_size,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// `H_0`: word + position + type embeddings followed by layer norm.
    pub fn embed(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<NodeId> {
        if batch.seq_len > self.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_positions {}",
                batch.seq_len, self.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let e = &self.weights.embedding;
        let word = match &e.word {
            WordEmbedding::Dense(w) => g.embedding_lookup(*w, &batch.ids)?,
            WordEmbedding::Factorized { w1, w2 } => {
                let low = g.embedding_lookup(*w1, &batch.ids)?;
                g.matmul(low, *w2)?
            }
        };
        let positions: Vec<usize> = (0..batch.ids.len()).map(|i| i % batch.seq_len).collect();
        let pos = g.embedding_lookup(e.position, &positions)?;
        let types = g.embedding_lookup(e.token_type, &vec![0; batch.ids.len()])?;
        let sum = g.add(word, pos)?;
        let sum = g.add(sum, types)?;
        g.layer_norm(sum, e.ln_gain, e.ln_bias)
    }

    /// One encoder layer (0-based index) applied to `x`.
    pub fn layer(
        &self,
        g: &mut Graph<'_>,
        layer: usize,
        x: NodeId,
        batch: &Batch,
    ) -> Result<NodeId> {
        let w = &self.weights.layers[layer];
        let heads = self.shapes[layer].num_heads;
        let d = self.head_size;
        let n = batch.seq_len;

        let q = g.matmul(x, w.wq)?;
        let q = g.add(q, w.bq)?;
        let k = g.matmul(x, w.wk)?;
        let k = g.add(k, w.bk)?;
        let v = g.matmul(x, w.wv)?;
        let v = g.add(v, w.bv)?;

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut per_sequence = Vec::with_capacity(batch.batch_size);
        for b in 0..batch.batch_size {
            let mask = batch.sequence_mask(b);
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qs = g.slice(q, b * n, n, h * d, d)?;
                let ks = g.slice(k, b * n, n, h * d, d)?;
                let vs = g.slice(v, b * n, n, h * d, d)?;
                let kt = g.transpose(ks);
                let scores = g.matmul(qs, kt)?;
                let scores = g.scale(scores, inv_sqrt_d);
                let scores = g.mask_columns(scores, mask)?;
                let probs = g.row_softmax(scores);
                per_head.push(g.matmul(probs, vs)?);
            }
            per_sequence.push(if per_head.len() == 1 {
                per_head[0]
            } else {
                g.concat_cols(&per_head)?
            });
        }
        let ctx = if per_sequence.len() == 1 {
            per_sequence[0]
        } else {
            g.concat_rows(&per_sequence)?
        };

        let attn = g.matmul(ctx, w.wo)?;
        let attn = g.add(attn, w.bo)?;
        let res = g.add(x, attn)?;
        let h1 = g.layer_norm(res, w.attn_ln_gain, w.attn_ln_bias)?;

        let inner = g.matmul(h1, w.w_fi)?;
        let inner = g.add(inner, w.b_fi)?;
        let inner = g.gelu(inner);
        let out = g.matmul(inner, w.w_fo)?;
        let out = g.add(out, w.b_fo)?;
        let res = g.add(h1, out)?;
        g.layer_norm(res, w.ffn_ln_gain, w.ffn_ln_bias)
    }

    /// Logits of exit `layer` (0-based) from that layer's output.
    pub fn exit(&self, g: &mut Graph<'_>, layer: usize, h: NodeId, seq_len: usize) -> Result<NodeId> {
        let x = &self.weights.exits[layer];
        let cls = g.gather_first_token(h, seq_len)?;
        let z = g.matmul(cls, x.w)?;
        g.add(z, x.b)
    }

    /// Full forward pass.
    ///
    /// With gradient equilibrium on, the gradient reaching layer `k`'s output
    /// equals the mean of the gradients from every active exit at or above
    /// `k`. This is realized by `grad_scale` nodes: the exit-`k` branch is
    /// scaled by `1/n_k` and the branch into layer `k+1` by `n_{k+1}/n_k`,
    /// where `n_k` counts active exits at index `≥ k`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<ForwardNodes> {
        let layers = self.num_layers();
        if opts.active_exits.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} exit flags for {layers} layers",
                opts.active_exits.len()
            )));
        }
        let mut downstream = vec![0usize; layers + 1];
        for k in (0..layers).rev() {
            downstream[k] = downstream[k + 1] + usize::from(opts.active_exits[k]);
        }

        let mut hidden = Vec::with_capacity(layers + 1);
        let mut logits = Vec::with_capacity(layers);
        let mut h = self.embed(g, batch)?;
        hidden.push(h);
        for k in 0..layers {
            let input = if opts.gradient_equilibrium && k > 0 && downstream[k - 1] > 0 {
                let ratio = downstream[k] as f64 / downstream[k - 1] as f64;
                if ratio != 1.0 {
                    g.grad_scale(h, ratio)
                } else {
                    h
                }
            } else {
                h
            };
            h = self.layer(g, k, input, batch)?;
            hidden.push(h);
            if opts.active_exits[k] {
                let exit_in = if opts.gradient_equilibrium && downstream[k] > 1 {
                    g.grad_scale(h, 1.0 / downstream[k] as f64)
                } else {
                    h
                };
                logits.push(Some(self.exit(g, k, exit_in, batch.seq_len)?));
            } else {
                logits.push(None);
            }
        }
        Ok(ForwardNodes { hidden, logits })
    }
}
