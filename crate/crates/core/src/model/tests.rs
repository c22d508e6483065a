use super::accounting::{count_params, ModelShape, ParamOptions};
use super::checkpoint::{self, Dtype};
use super::*;
use crate::autodiff::gelu;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        head_size: 4,
        ffn_size: 12,
        vocab_size: 20,
        max_positions: 16,
        num_type_ids: 1,
        num_classes: 2,
        embed_rank: None,
        seq_len: 8,
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = tiny_config();
    let a = MultiExitModel::init(&c, 7).unwrap();
    let b = MultiExitModel::init(&c, 7).unwrap();
    let d = MultiExitModel::init(&c, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, d);
}

#[test]
fn init_respects_init_contract() {
    let m = MultiExitModel::init(&tiny_config(), 1).unwrap();
    let l = &m.weights.layers[0];
    assert!(l.wq.as_slice().iter().all(|x| x.abs() <= 0.04));
    assert!(l.bq.as_slice().iter().all(|&x| x == 0.0));
    assert!(l.attn_ln_gain.as_slice().iter().all(|&x| x == 1.0));
}

#[test]
fn rank_config_stores_two_factors() {
    let mut c = tiny_config();
    c.embed_rank = Some(3);
    let m = MultiExitModel::init(&c, 1).unwrap();
    match &m.weights.embedding.word {
        WordEmbedding::Factorized { w1, w2 } => {
            assert_eq!(w1.shape(), (20, 3));
            assert_eq!(w2.shape(), (3, 8));
        }
        WordEmbedding::Dense(_) => panic!("expected factors"),
    }
    assert_eq!(m.embed_rank(), Some(3));
}

#[test]
fn three_class_exits() {
    let mut c = tiny_config();
    c.num_classes = 3;
    let m = MultiExitModel::init(&c, 1).unwrap();
    assert_eq!(m.weights.exits.len(), 2);
    assert!(m.weights.exits.iter().all(|x| x.w.cols() == 3));
    let rec = m.forward_all(&Batch::from_sequences(&[vec![1u32, 2, 3]]).unwrap()).unwrap();
    assert!(rec.logits.iter().all(|z| z.shape() == (1, 3)));
}

#[test]
fn forward_record_shapes() {
    let m = MultiExitModel::init(&tiny_config(), 2).unwrap();
    let batch = Batch::from_sequences(&[vec![1u32, 2, 3, 4], vec![5, 6]]).unwrap();
    let rec = m.forward_all(&batch).unwrap();
    assert_eq!(rec.hidden.len(), 3);
    assert_eq!(rec.logits.len(), 2);
    assert!(rec.hidden.iter().all(|h| h.shape() == (8, 8)));
    assert!(rec.logits.iter().all(|z| z.shape() == (2, 2) && z.is_finite()));
}

#[test]
fn identical_rows_give_identical_logits() {
    let m = MultiExitModel::init(&tiny_config(), 3).unwrap();
    let row = vec![1u32, 7, 9, 4, 2];
    let batch = Batch::from_sequences(&[row.clone(), row.clone(), row]).unwrap();
    let rec = m.forward_all(&batch).unwrap();
    for z in &rec.logits {
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(0), z.row(2));
    }
}

#[test]
fn batched_rows_match_single_rows_bitwise() {
    let m = MultiExitModel::init(&tiny_config(), 4).unwrap();
    let seqs = [vec![1u32, 2, 3, 4, 5], vec![6, 7, 8, 9, 10]];
    let both = m.forward_all(&Batch::from_sequences(&seqs).unwrap()).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let one = m.forward_all(&Batch::from_sequences(&[s.clone()]).unwrap()).unwrap();
        for l in 0..2 {
            assert_eq!(both.logits[l].row(b), one.logits[l].row(0));
        }
    }
}

#[test]
fn padded_tail_content_is_ignored() {
    let m = MultiExitModel::init(&tiny_config(), 5).unwrap();
    let mask = vec![true, true, true, false, false];
    let a = Batch::with_mask(vec![1, 2, 3, 0, 0], mask.clone(), 5).unwrap();
    let b = Batch::with_mask(vec![1, 2, 3, 17, 11], mask, 5).unwrap();
    let ra = m.forward_all(&a).unwrap();
    let rb = m.forward_all(&b).unwrap();
    assert_eq!(ra.logits, rb.logits);
    for (ha, hb) in ra.hidden.iter().zip(&rb.hidden).skip(1) {
        assert_eq!(ha.block(0, 0, 3, 8), hb.block(0, 0, 3, 8));
    }
}

#[test]
fn rejects_long_sequences_and_bad_ids() {
    let m = MultiExitModel::init(&tiny_config(), 6).unwrap();
    let long = vec![1u32; 17];
    assert!(m.forward_all(&Batch::from_sequences(&[long]).unwrap()).is_err());
    assert!(m.forward_all(&Batch::from_sequences(&[vec![20u32]]).unwrap()).is_err());
}

fn scalar_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-12).sqrt() * gain[i] + bias[i])
        .collect()
}

fn vec_mat(x: &[f64], m: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|j| b[(0, j)] + (0..m.rows()).map(|i| x[i] * m[(i, j)]).sum::<f64>())
        .collect()
}

/// Scalar re-derivation of a one-layer, one-head encoder on two tokens.
#[test]
fn one_layer_one_head_matches_scalar_evaluation() {
    let c = ModelConfig {
        num_layers: 1,
        hidden_size: 3,
        num_heads: 1,
        head_size: 2,
        ffn_size: 4,
        vocab_size: 5,
        max_positions: 4,
        num_type_ids: 1,
        num_classes: 2,
        embed_rank: None,
        seq_len: 2,
    };
    let mut m = MultiExitModel::init(&c, 11).unwrap();
    // Hand-set biases and gains so every parameter kind participates.
    let l = &mut m.weights.layers[0];
    l.bq = Matrix::from_rows(&[vec![0.1, -0.2]]).unwrap();
    l.bv = Matrix::from_rows(&[vec![0.05, 0.3]]).unwrap();
    l.bo = Matrix::from_rows(&[vec![0.2, 0.0, -0.1]]).unwrap();
    l.attn_ln_gain = Matrix::from_rows(&[vec![1.5, 0.5, 1.0]]).unwrap();
    l.b_fi = Matrix::from_rows(&[vec![0.3, -0.3, 0.0, 0.1]]).unwrap();
    m.weights.exits[0].b = Matrix::from_rows(&[vec![0.25, -0.25]]).unwrap();
    for l in &mut m.weights.layers {
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w_fi, &mut l.w_fo] {
            *w = w.scaled(40.0);
        }
    }

    let ids = [3usize, 1];
    let rec = m
        .forward_all(&Batch::from_sequences(&[vec![3u32, 1]]).unwrap())
        .unwrap();

    let e = &m.weights.embedding;
    let WordEmbedding::Dense(word) = &e.word else {
        unreachable!()
    };
    let x: Vec<Vec<f64>> = (0..2)
        .map(|t| {
            let raw: Vec<f64> = (0..3)
                .map(|j| word[(ids[t], j)] + e.position[(t, j)] + e.token_type[(0, j)])
                .collect();
            scalar_layer_norm(&raw, e.ln_gain.row(0), e.ln_bias.row(0))
        })
        .collect();
    let l = &m.weights.layers[0];
    let q: Vec<_> = x.iter().map(|r| vec_mat(r, &l.wq, &l.bq)).collect();
    let k: Vec<_> = x.iter().map(|r| vec_mat(r, &l.wk, &l.bk)).collect();
    let v: Vec<_> = x.iter().map(|r| vec_mat(r, &l.wv, &l.bv)).collect();
    let mut out = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let mx = s[0].max(s[1]);
        let p: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z = p[0] + p[1];
        let ctx: Vec<f64> = (0..2).map(|d| (p[0] * v[0][d] + p[1] * v[1][d]) / z).collect();
        let attn = vec_mat(&ctx, &l.wo, &l.bo);
        let res: Vec<f64> = (0..3).map(|j| x[i][j] + attn[j]).collect();
        let h1 = scalar_layer_norm(&res, l.attn_ln_gain.row(0), l.attn_ln_bias.row(0));
        let inner: Vec<f64> = vec_mat(&h1, &l.w_fi, &l.b_fi).into_iter().map(gelu).collect();
        let f = vec_mat(&inner, &l.w_fo, &l.b_fo);
        let res: Vec<f64> = (0..3).map(|j| h1[j] + f[j]).collect();
        out.push(scalar_layer_norm(&res, l.ffn_ln_gain.row(0), l.ffn_ln_bias.row(0)));
    }
    let x = &m.weights.exits[0];
    let logits = vec_mat(&out[0], &x.w, &x.b);

    for t in 0..2 {
        for j in 0..3 {
            assert!((rec.hidden[1][(t, j)] - out[t][j]).abs() < 1e-12);
        }
    }
    for j in 0..2 {
        assert!((rec.logits[0][(0, j)] - logits[j]).abs() < 1e-12);
    }
}

fn shrink_layer(m: &MultiExitModel, layer: usize, heads: &[usize], channels: &[usize]) -> MultiExitModel {
    let d = m.head_size();
    let cols: Vec<usize> = heads.iter().flat_map(|&h| h * d..(h + 1) * d).collect();
    let mut w = m.weights.clone();
    let l = &mut w.layers[layer];
    for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.bq, &mut l.bk, &mut l.bv] {
        *t = t.select_cols(&cols);
    }
    l.wo = l.wo.select_rows(&cols);
    l.w_fi = l.w_fi.select_cols(channels);
    l.b_fi = l.b_fi.select_cols(channels);
    l.w_fo = l.w_fo.select_rows(channels);
    MultiExitModel::from_parts(m.config().clone(), w).unwrap()
}

#[test]
fn width_pruning_keeps_hidden_size() {
    let m = MultiExitModel::init(&tiny_config(), 9).unwrap();
    let slim = shrink_layer(&m, 0, &[1], &[0, 3, 5]);
    assert!(!slim.is_uniform());
    assert_eq!(
        slim.layer_shape(0),
        LayerShape {
            num_heads: 1,
            ffn_size: 3
        }
    );
    let rec = slim
        .forward_all(&Batch::from_sequences(&[vec![1u32, 2, 3]]).unwrap())
        .unwrap();
    assert!(rec.hidden.iter().all(|h| h.cols() == 8));
    let shape = ModelShape::from(&slim);
    assert_eq!(
        count_params(&shape, ParamOptions::MULTI_EXIT).total as usize,
        slim.param_count()
    );
}

#[test]
fn accounting_matches_live_tensor_count() {
    let mut c = tiny_config();
    for rank in [None, Some(4)] {
        c.embed_rank = rank;
        let m = MultiExitModel::init(&c, 1).unwrap();
        let b = count_params(&ModelShape::from(&m), ParamOptions::MULTI_EXIT);
        assert_eq!(b.total as usize, m.param_count());
    }
}

#[test]
fn factorize_embedding_checks_rank() {
    let m = MultiExitModel::init(&tiny_config(), 1).unwrap();
    assert!(m.factorize_embedding(0).is_err());
    assert!(m.factorize_embedding(9).is_err());
    let f = m.factorize_embedding(8).unwrap();
    assert!(f.factorize_embedding(4).is_err());
    // Full rank reproduces the dense lookup.
    let batch = Batch::from_sequences(&[vec![1u32, 2, 3]]).unwrap();
    let a = m.forward_all(&batch).unwrap();
    let b = f.forward_all(&batch).unwrap();
    let diff = a.logits[1].sub(&b.logits[1]).max_abs();
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.embed_rank = Some(5);
    let m = MultiExitModel::init(&c, 3).unwrap();
    let m = shrink_layer(&m, 1, &[0], &[2, 4]);
    checkpoint::save(&m, dir.path(), Dtype::F64, Some("abc"), serde_json::json!({"stage": "t"}))
        .unwrap();
    let (back, manifest) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, m);
    assert_eq!(manifest.config_hash.as_deref(), Some("abc"));
    assert_eq!(manifest.tensors.len(), m.weights.named().len());

    let dir32 = tempfile::tempdir().unwrap();
    checkpoint::save(&m, dir32.path(), Dtype::F32, None, serde_json::Value::Null).unwrap();
    let (back32, _) = checkpoint::load(dir32.path()).unwrap();
    for (a, b) in m.weights.slots().iter().zip(back32.weights.slots()) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn checkpoint_rejects_truncated_blob() {
    let dir = tempfile::tempdir().unwrap();
    let m = MultiExitModel::init(&tiny_config(), 3).unwrap();
    checkpoint::save(&m, dir.path(), Dtype::F64, None, serde_json::Value::Null).unwrap();
    let path = dir.path().join(checkpoint::TENSORS_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}
