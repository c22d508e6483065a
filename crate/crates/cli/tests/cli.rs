use std::path::Path;
use std::process::{Command, Output};

use slenderexit::model::ModelConfig;
use slenderexit::pipeline::{AblationMode, PipelineConfig, TaskEntry};
use slenderexit::slender::PruneSchedule;
use slenderexit::taskgen::TaskKind;

fn write_config(dir: &Path) -> std::path::PathBuf {
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
    let mut cfg = PipelineConfig {
        tasks: TaskKind::ALL
            .into_iter()
            .map(|k| TaskEntry {
                max_len: 8,
                train_size: 30,
                dev_size: 12,
                vocab_size: 24,
                ..TaskEntry::new(k)
            })
            .collect(),
        goal: ModelConfig {
            num_heads: 1,
            ffn_size: 16,
            embed_rank: Some(8),
            ..teacher.clone()
        },
        teacher,
        prune: PruneSchedule {
            iterations: 2,
            recovery_steps: 2,
            calibration_size: 12,
            calibration_batch: 6,
            ..PruneSchedule::default()
        },
        seeds: vec![1],
        ablations: vec![AblationMode::Full],
        out_dir: dir.join("runs"),
        ..PipelineConfig::default()
    };
    for plan in [&mut cfg.teacher_plan, &mut cfg.ta_plan, &mut cfg.recovery_plan, &mut cfg.exit_fit_plan] {
        plan.steps = 3;
        plan.warmup_steps = 1;
    }
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slenderexit"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(&cfg, &["show-config", "--seed", "9", "--threads", "2", "--ablation", "no-feat"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let shown = PipelineConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(shown.seeds, vec![9]);
    assert_eq!(shown.threads, 2);
    assert_eq!(shown.ablations, vec![AblationMode::NoFeat]);
    let o = run(&cfg, &["show-config", "--threads", "4", "--deterministic"]);
    assert_eq!(PipelineConfig::from_toml(&stdout(&o)).unwrap().threads, 1);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(&cfg, &["show-config", "--ablation", "half"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown ablation mode"));

    let o = run(&cfg, &["distill-ta"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-teacher"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = true\n").unwrap();
    let o = run(&bad, &["show-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml"));
}

#[test]
fn stages_run_in_order_then_eval_and_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let runs = dir.path().join("runs");

    let o = run(&cfg, &["train-teacher"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("teacher seed 1"));
    assert!(runs.join("seed-1/teacher/eval.json").is_file());

    let o = run(&cfg, &["slenderize"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("distill-ta"));

    let o = run(&cfg, &["distill-ta"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&cfg, &["slenderize"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("full seed 1 iteration 2"));

    let o = run(&cfg, &["eval", "--stage", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dynamic FLOPs reduction"));
    let o = run(&cfg, &["eval", "--checkpoint", runs.join("seed-1/ta").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ta seed 1"));

    let o = run(&cfg, &["run-all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("[full]"));
    assert!(runs.join("summary.json").is_file());
    assert!(runs.join("summary.txt").is_file());
}
