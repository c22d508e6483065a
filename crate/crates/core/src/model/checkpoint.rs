//! On-disk checkpoints: `manifest.json` plus a little-endian `tensors.bin`.
//!
//! The manifest holds the format version, the model config, an optional
//! producer config hash and an index of every tensor (name, shape, dtype,
//! byte offset) in [`Weights::named`] order. Tensor shapes, not the config,
//! determine per-layer widths, so non-uniform models round-trip.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    EmbeddingWeights, ExitWeights, LayerWeights, ModelConfig, MultiExitModel, Weights,
    WordEmbedding,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Free-form producer metadata (stage name, seed, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `model` into directory `dir` (created if missing).
pub fn save(
    model: &MultiExitModel,
    dir: &Path,
    dtype: Dtype,
    config_hash: Option<&str>,
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in model.weights.named() {
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            dtype,
            offset: blob.len(),
        });
        for &x in m.as_slice() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        config_hash: config_hash.map(str::to_string),
        metadata,
        tensors,
    };
    let tensors_path = dir.join(TENSORS_FILE);
    fs::write(&tensors_path, &blob).map_err(|e| Error::io(&tensors_path, e))?;
    // The manifest goes last so its presence marks a complete checkpoint.
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            &path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

pub fn is_checkpoint(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(TENSORS_FILE).is_file()
}

struct TensorReader<'a> {
    path: PathBuf,
    blob: &'a [u8],
    entries: std::slice::Iter<'a, TensorEntry>,
}

impl TensorReader<'_> {
    fn next(&mut self, expected: &str) -> Result<Matrix> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| ckpt_err(&self.path, format!("missing tensor {expected}")))?;
        if e.name != expected {
            return Err(ckpt_err(
                &self.path,
                format!("expected tensor {expected}, found {}", e.name),
            ));
        }
        let [rows, cols] = e.shape;
        let w = e.dtype.width();
        let end = e.offset + rows * cols * w;
        let bytes = self
            .blob
            .get(e.offset..end)
            .ok_or_else(|| ckpt_err(&self.path, format!("tensor {} past end of blob", e.name)))?;
        let data = bytes
            .chunks_exact(w)
            .map(|c| match e.dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn load(dir: &Path) -> Result<(MultiExitModel, Manifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(TENSORS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = TensorReader {
        path: path.clone(),
        blob: &blob,
        entries: manifest.tensors.iter(),
    };
    let factorized = manifest
        .tensors
        .first()
        .is_some_and(|t| t.name == "embedding.word.factor1");
    let word = if factorized {
        WordEmbedding::Factorized {
            w1: r.next("embedding.word.factor1")?,
            w2: r.next("embedding.word.factor2")?,
        }
    } else {
        WordEmbedding::Dense(r.next("embedding.word")?)
    };
    let embedding = EmbeddingWeights {
        word,
        position: r.next("embedding.position")?,
        token_type: r.next("embedding.token_type")?,
        ln_gain: r.next("embedding.ln.gain")?,
        ln_bias: r.next("embedding.ln.bias")?,
    };
    let layers = manifest.config.num_layers;
    let mut layer_weights = Vec::with_capacity(layers);
    for i in 0..layers {
        let mut t = |f: &str| r.next(&format!("layer.{i}.{f}"));
        layer_weights.push(LayerWeights {
            wq: t("attn.q.weight")?,
            bq: t("attn.q.bias")?,
            wk: t("attn.k.weight")?,
            bk: t("attn.k.bias")?,
            wv: t("attn.v.weight")?,
            bv: t("attn.v.bias")?,
            wo: t("attn.o.weight")?,
            bo: t("attn.o.bias")?,
            attn_ln_gain: t("attn.ln.gain")?,
            attn_ln_bias: t("attn.ln.bias")?,
            w_fi: t("ffn.in.weight")?,
            b_fi: t("ffn.in.bias")?,
            w_fo: t("ffn.out.weight")?,
            b_fo: t("ffn.out.bias")?,
            ffn_ln_gain: t("ffn.ln.gain")?,
            ffn_ln_bias: t("ffn.ln.bias")?,
        });
    }
    let mut exits = Vec::with_capacity(layers);
    for i in 0..layers {
        exits.push(ExitWeights {
            w: r.next(&format!("exit.{i}.weight"))?,
            b: r.next(&format!("exit.{i}.bias"))?,
        });
    }
    if r.entries.next().is_some() {
        return Err(ckpt_err(&path, "unexpected trailing tensors"));
    }
    let weights = Weights {
        embedding,
        layers: layer_weights,
        exits,
    };
    let model = MultiExitModel::from_parts(manifest.config.clone(), weights)
        .map_err(|e| ckpt_err(&path, e.to_string()))?;
    Ok((model, manifest))
}
