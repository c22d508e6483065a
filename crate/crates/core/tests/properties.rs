use proptest::prelude::*;

use slenderexit::exit::{entropy, ExitProfile, Threshold};
use slenderexit::linalg::{orthonormality_error, svd};
use slenderexit::model::accounting::{count_flops, count_params, ModelShape, ParamOptions};
use slenderexit::model::{ModelConfig, MultiExitModel};
use slenderexit::slender::{apply_prune, live_structures, planned_widths, StructureKind};
use slenderexit::taskgen::{generate, label_of, TaskKind, TaskSpec};
use slenderexit::Matrix;

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..8).prop_filter_map("positive mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
    })
}

fn threshold() -> impl Strategy<Value = Threshold> {
    prop_oneof![
        Just(Threshold::NeverExitEarly),
        (0.0f64..2.0).prop_map(Threshold::Nats),
        Just(Threshold::Nats(f64::INFINITY)),
    ]
}

fn tiny(heads: usize, ffn: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_size: 8,
        num_heads: heads,
        head_size: 2,
        ffn_size: ffn,
        vocab_size: 20,
        max_positions: 16,
        num_type_ids: 1,
        num_classes: 3,
        embed_rank: None,
        seq_len: 8,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded_by_log_classes(p in distribution()) {
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn exit_layer_is_monotone_in_threshold(
        entropies in prop::collection::vec(0.0f64..1.5, 1..10),
        a in threshold(),
        b in threshold(),
    ) {
        let n = entropies.len();
        let profile = ExitProfile { entropies, predictions: vec![0; n], flops: (1..=n as u64).collect() };
        let (lo, hi) = if a.rank() <= b.rank() { (a, b) } else { (b, a) };
        let (k_lo, k_hi) = (profile.exit_layer(lo), profile.exit_layer(hi));
        prop_assert!((1..=n).contains(&k_lo));
        prop_assert!(k_hi <= k_lo);
        prop_assert_eq!(profile.exit_layer(Threshold::NeverExitEarly), n);
    }

    #[test]
    fn threshold_json_round_trip(t in threshold()) {
        let text = serde_json::to_string(&t).unwrap();
        let back: Threshold = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(a in matrix(8)) {
        let s = svd(&a).unwrap();
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&v| v >= 0.0));
        let scale = 1.0 + a.max_abs();
        prop_assert!(s.reconstruct().sub(&a).max_abs() < 1e-10 * scale);
        prop_assert!(orthonormality_error(&s.v.transpose()) < 1e-10);
        let full_rank = s.sigma.iter().all(|&v| v > 1e-8 * scale);
        if full_rank {
            prop_assert!(orthonormality_error(&s.u) < 1e-10);
        }
    }

    #[test]
    fn planned_widths_step_down_to_goal(start in 1usize..300, frac in 0.0f64..1.0, iterations in 1usize..8) {
        let goal = ((start as f64 * frac) as usize).max(1);
        let w = planned_widths(start, goal, iterations, None).unwrap();
        prop_assert_eq!(w.len(), iterations);
        prop_assert_eq!(*w.last().unwrap(), goal);
        prop_assert!(w[0] <= start);
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn flops_grow_with_depth_and_length(
        heads in 1usize..6,
        ffn in 1usize..64,
        rank in prop::option::of(1usize..8),
        n in 1usize..64,
        layers in 2usize..6,
    ) {
        let cfg = ModelConfig { embed_rank: rank, ..tiny(heads, ffn, layers) };
        let shape = ModelShape::from(&cfg);
        let by_depth: Vec<u64> = (1..=layers).map(|k| count_flops(&shape, n, k).unwrap().cumulative).collect();
        prop_assert!(by_depth.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(count_flops(&shape, n + 1, layers).unwrap().cumulative > by_depth[layers - 1]);
        prop_assert!(count_flops(&shape, n, 0).is_err());
        prop_assert!(count_flops(&shape, n, layers + 1).is_err());
    }

    #[test]
    fn pruning_matches_accounting(seed in 0u64..1000, mask in prop::collection::vec(any::<bool>(), 24)) {
        let model = MultiExitModel::init(&tiny(3, 5, 2), seed).unwrap();
        let live = live_structures(&model);
        // Keep at least one head and channel per layer.
        let prune: Vec<_> = live
            .iter()
            .zip(&mask)
            .filter(|(s, &m)| m && s.index > 0)
            .map(|(s, _)| *s)
            .collect();
        let pruned = apply_prune(&model, &prune).unwrap();
        let counted = count_params(&ModelShape::from(&pruned), ParamOptions::MULTI_EXIT).total as usize;
        prop_assert_eq!(pruned.param_count(), counted);
        let heads: usize = pruned.layer_shapes().iter().map(|s| s.num_heads).sum();
        let dropped_heads = prune.iter().filter(|s| s.kind == StructureKind::AttentionHead).count();
        prop_assert_eq!(heads, 6 - dropped_heads);
        prop_assert_eq!(live_structures(&pruned).len(), live.len() - prune.len());
    }

    #[test]
    fn generated_labels_follow_the_rule(seed in 0u64..500, kind_idx in 0usize..3, max_len in 6usize..24) {
        let kind = TaskKind::ALL[kind_idx];
        let spec = TaskSpec { train_size: 40, dev_size: 10, max_len, ..TaskSpec::new(kind, seed) };
        let splits = generate(&spec).unwrap();
        prop_assert_eq!(&generate(&spec).unwrap().train.instances, &splits.train.instances);
        for inst in splits.train.instances.iter().chain(&splits.dev.instances) {
            prop_assert_eq!(inst.ids.len(), inst.tag.length);
            prop_assert!(inst.ids.len() <= spec.max_seq_len());
            prop_assert_eq!(label_of(kind, &inst.ids[2..]), Some(inst.label));
        }
    }
}
