use std::path::Path;

use slenderexit::exit::{Threshold, PARETO_HEADER};
use slenderexit::model::checkpoint;
use slenderexit::model::ModelConfig;
use slenderexit::pipeline::{
    read_slender_report, substream, AblationMode, Pipeline, PipelineConfig, Summary, TaskEntry, EVAL_FILE,
    METRICS_FILE, PARETO_FILE, SUMMARY_FILE,
};
use slenderexit::slender::PruneSchedule;
use slenderexit::taskgen::TaskKind;

fn tiny_config(out: &Path) -> PipelineConfig {
    let teacher = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        head_size: 8,
        ffn_size: 32,
        vocab_size: 24,
        max_positions: 16,
        num_type_ids: 1,
        num_classes: 2,
        embed_rank: None,
        seq_len: 12,
    };
    let goal = ModelConfig {
        num_heads: 1,
        ffn_size: 16,
        embed_rank: Some(8),
        ..teacher.clone()
    };
    let mut cfg = PipelineConfig {
        tasks: TaskKind::ALL
            .into_iter()
            .map(|k| TaskEntry {
                max_len: 8,
                train_size: 40,
                dev_size: 20,
                vocab_size: 24,
                ..TaskEntry::new(k)
            })
            .collect(),
        teacher,
        goal,
        prune: PruneSchedule {
            iterations: 2,
            recovery_steps: 3,
            calibration_size: 16,
            calibration_batch: 8,
            ..PruneSchedule::default()
        },
        seeds: vec![3],
        ablations: vec![AblationMode::Full, AblationMode::TwoStage],
        out_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    };
    for plan in [&mut cfg.teacher_plan, &mut cfg.ta_plan, &mut cfg.recovery_plan, &mut cfg.exit_fit_plan] {
        plan.steps = 4;
        plan.warmup_steps = 1;
    }
    cfg
}

#[test]
fn toml_round_trip_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    assert!(PipelineConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
    assert!(PipelineConfig::from_toml("[teacher_plan]\nlerning_rate = 0.1\n").is_err());
    let partial = PipelineConfig::from_toml("seeds = [7]\nthreads = 2\n").unwrap();
    assert_eq!(partial.seeds, vec![7]);
    assert_eq!(partial.teacher, PipelineConfig::default().teacher);
}

#[test]
fn default_config_is_valid_and_hash_tracks_content() {
    let cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    let mut other = cfg.clone();
    assert_eq!(cfg.hash(), other.hash());
    other.seeds.push(6);
    assert_ne!(cfg.hash(), other.hash());
}

#[test]
fn validation_rejects_inconsistent_configs() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    let mut wide = base.clone();
    wide.goal.num_heads = 4;
    let mut deep = base.clone();
    deep.goal.num_layers = 3;
    let mut unsorted = base.clone();
    unsorted.thresholds = vec![Threshold::Nats(0.5), Threshold::Nats(0.1)];
    let mut long = base.clone();
    long.tasks[0].max_len = 40;
    let mut factorized = base.clone();
    factorized.teacher.embed_rank = Some(4);
    let mut no_seeds = base.clone();
    no_seeds.seeds.clear();
    let mut rank = base.clone();
    rank.goal.embed_rank = Some(32);
    for bad in [wide, deep, unsorted, long, factorized, no_seeds, rank] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn substreams_are_stable_and_distinct() {
    assert_eq!(substream(1, "teacher/init"), substream(1, "teacher/init"));
    assert_ne!(substream(1, "teacher/init"), substream(2, "teacher/init"));
    assert_ne!(substream(1, "teacher/init"), substream(1, "ta/init"));
}

#[test]
fn run_all_writes_artifacts_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let p = Pipeline::new(cfg.clone()).unwrap();
    let summary = p.run_all().unwrap();

    let labels: Vec<&str> = summary.labels.iter().map(|l| l.label.as_str()).collect();
    assert_eq!(labels, ["teacher", "ta", "full", "two-stage"]);
    let teacher = summary.get("teacher").unwrap();
    assert_eq!(teacher.params_reduction.mean, 1.0);
    assert_eq!(teacher.static_flops_reduction.mean, 1.0);
    assert!(summary.get("full").unwrap().params_reduction.mean > 1.0);

    let root = dir.path();
    assert!(root.join("config.toml").is_file());
    let written: Summary = serde_json::from_str(&std::fs::read_to_string(root.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(written, summary);
    for stage in ["teacher", "ta", "full", "two-stage"] {
        let d = p.stage_dir(3, stage);
        assert!(checkpoint::is_checkpoint(&d), "{stage}");
        assert!(d.join(EVAL_FILE).is_file());
        assert!(d.join(METRICS_FILE).is_file());
        let csv = std::fs::read_to_string(d.join(PARETO_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], PARETO_HEADER);
        assert_eq!(lines.len(), 1 + cfg.thresholds.len());
    }
    let report = read_slender_report(&p.stage_dir(3, "full")).unwrap();
    assert_eq!(report.iterations.len(), 2);
    assert_eq!(report.factorized_rank, Some(8));
    let (slender, _) = checkpoint::load(&p.stage_dir(3, "full")).unwrap();
    assert_eq!(slender.config(), &cfg.goal);

    // A second run reuses every checkpoint.
    let metrics = p.stage_dir(3, "teacher").join(METRICS_FILE);
    let stamp = std::fs::metadata(&metrics).unwrap().modified().unwrap();
    let again = Pipeline::new(cfg.clone()).unwrap().run_all().unwrap();
    assert_eq!(again, summary);
    assert_eq!(std::fs::metadata(&metrics).unwrap().modified().unwrap(), stamp);

    // Changed stage settings must not silently reuse old checkpoints.
    let mut changed = cfg;
    changed.teacher_plan.learning_rate *= 2.0;
    assert!(Pipeline::new(changed).unwrap().run_all().is_err());
}

#[test]
fn fresh_runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(a.path());
    cfg.ablations = vec![AblationMode::NoFeat];
    let first = Pipeline::new(cfg.clone()).unwrap().run_all().unwrap();
    cfg.out_dir = b.path().to_path_buf();
    cfg.threads = 3;
    let second = Pipeline::new(cfg).unwrap().run_all().unwrap();
    assert_eq!(first, second);
    let (m1, _) = checkpoint::load(&a.path().join("seed-3/no-feat")).unwrap();
    let (m2, _) = checkpoint::load(&b.path().join("seed-3/no-feat")).unwrap();
    assert_eq!(m1, m2);
}
