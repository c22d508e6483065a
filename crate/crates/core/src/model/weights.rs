//! Parameter containers, generic over what each slot holds.
//!
//! `Weights<Matrix>` is a model's storage; binding it into a graph yields a
//! `Weights<NodeId>` with the same layout, and gradients come back as another
//! `Weights<Matrix>`. Every traversal uses the same fixed order, which is also
//! the checkpoint tensor order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WordEmbedding<T> {
    /// `|V| × H`.
    Dense(T),
    /// `|V| × R` followed by a bias-free `R × H` projection.
    Factorized { w1: T, w2: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingWeights<T> {
    pub word: WordEmbedding<T>,
    pub position: T,
    pub token_type: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub attn_ln_gain: T,
    pub attn_ln_bias: T,
    pub w_fi: T,
    pub b_fi: T,
    pub w_fo: T,
    pub b_fo: T,
    pub ffn_ln_gain: T,
    pub ffn_ln_bias: T,
}

/// Linear classifier over the first-token hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitWeights<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embedding: EmbeddingWeights<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub exits: Vec<ExitWeights<T>>,
}

const LAYER_FIELDS: [&str; 16] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.o.weight",
    "attn.o.bias",
    "attn.ln.gain",
    "attn.ln.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.ln.gain",
    "ffn.ln.bias",
];

impl<T> LayerWeights<T> {
    pub fn fields(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_ln_gain,
            &self.attn_ln_bias,
            &self.w_fi,
            &self.b_fi,
            &self.w_fo,
            &self.b_fo,
            &self.ffn_ln_gain,
            &self.ffn_ln_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_ln_gain,
            &mut self.attn_ln_bias,
            &mut self.w_fi,
            &mut self.b_fi,
            &mut self.w_fo,
            &mut self.b_fo,
            &mut self.ffn_ln_gain,
            &mut self.ffn_ln_bias,
        ]
    }

    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> LayerWeights<U> {
        LayerWeights {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            attn_ln_gain: f(&self.attn_ln_gain),
            attn_ln_bias: f(&self.attn_ln_bias),
            w_fi: f(&self.w_fi),
            b_fi: f(&self.b_fi),
            w_fo: f(&self.w_fo),
            b_fo: f(&self.b_fo),
            ffn_ln_gain: f(&self.ffn_ln_gain),
            ffn_ln_bias: f(&self.ffn_ln_bias),
        }
    }
}

impl<T> WordEmbedding<T> {
    pub fn is_factorized(&self) -> bool {
        matches!(self, WordEmbedding::Factorized { .. })
    }

    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> WordEmbedding<U> {
        match self {
            WordEmbedding::Dense(w) => WordEmbedding::Dense(f(w)),
            WordEmbedding::Factorized { w1, w2 } => WordEmbedding::Factorized {
                w1: f(w1),
                w2: f(w2),
            },
        }
    }
}

impl<T> Weights<T> {
    /// Every slot with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        let e = &self.embedding;
        match &e.word {
            WordEmbedding::Dense(w) => out.push(("embedding.word".to_string(), w)),
            WordEmbedding::Factorized { w1, w2 } => {
                out.push(("embedding.word.factor1".to_string(), w1));
                out.push(("embedding.word.factor2".to_string(), w2));
            }
        }
        out.push(("embedding.position".to_string(), &e.position));
        out.push(("embedding.token_type".to_string(), &e.token_type));
        out.push(("embedding.ln.gain".to_string(), &e.ln_gain));
        out.push(("embedding.ln.bias".to_string(), &e.ln_bias));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        for (i, exit) in self.exits.iter().enumerate() {
            out.push((format!("exit.{i}.weight"), &exit.w));
            out.push((format!("exit.{i}.bias"), &exit.b));
        }
        out
    }

    /// Mutable slots in the same order as [`Weights::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        let e = &mut self.embedding;
        match &mut e.word {
            WordEmbedding::Dense(w) => out.push(w),
            WordEmbedding::Factorized { w1, w2 } => {
                out.push(w1);
                out.push(w2);
            }
        }
        out.push(&mut e.position);
        out.push(&mut e.token_type);
        out.push(&mut e.ln_gain);
        out.push(&mut e.ln_bias);
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        for exit in &mut self.exits {
            out.push(&mut exit.w);
            out.push(&mut exit.b);
        }
        out
    }

    pub fn slots(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> Weights<U> {
        let e = &self.embedding;
        Weights {
            embedding: EmbeddingWeights {
                word: e.word.map(&mut f),
                position: f(&e.position),
                token_type: f(&e.token_type),
                ln_gain: f(&e.ln_gain),
                ln_bias: f(&e.ln_bias),
            },
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            exits: self
                .exits
                .iter()
                .map(|x| ExitWeights {
                    w: f(&x.w),
                    b: f(&x.b),
                })
                .collect(),
        }
    }
}
