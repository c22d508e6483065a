//! End-to-end orchestration: data → teacher → TA → slender model per
//! ablation mode → evaluation, with resumable checkpointed stages.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! config.toml
//! summary.json, summary.txt
//! seed-{s}/data/{train,dev}.jsonl
//! seed-{s}/teacher/          checkpoint, metrics.jsonl, eval.json, pareto.csv
//! seed-{s}/ta/               same
//! seed-{s}/{mode}/           same, plus slender_report.json
//! ```

mod config;
mod report;

use std::cell::OnceCell;
use std::path::{Path, PathBuf};

use serde_json::json;

pub use config::{substream, AblationMode, PipelineConfig, TaskEntry};
pub use report::{evaluate, EvalReport, LabelSummary, ProbeReport, Stat, Summary};

use crate::distill::{
    cache_targets, distill_ta, fit_exits, recovery_train, train_teacher, EvalSet, ExitLosses,
    MetricsLog, RecoveryData, TargetCache,
};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::MultiExitModel;
use crate::slender::{slenderize, SlenderReport, SlenderizeOptions};
use crate::taskgen::{mixed_splits, Dataset, Splits};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const PARETO_FILE: &str = "pareto.csv";
pub const SLENDER_REPORT_FILE: &str = "slender_report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_TEXT_FILE: &str = "summary.txt";

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

/// Train and dev data of one seed, as model inputs.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub splits: Splits,
    pub train_inputs: Vec<Vec<u32>>,
    pub train_labels: Vec<usize>,
    pub dev_inputs: Vec<Vec<u32>>,
    pub dev_labels: Vec<usize>,
}

impl SeedData {
    fn new(splits: Splits) -> Self {
        let cols = |d: &Dataset| -> (Vec<Vec<u32>>, Vec<usize>) {
            d.instances.iter().map(|i| (i.ids.clone(), i.label)).unzip()
        };
        let (train_inputs, train_labels) = cols(&splits.train);
        let (dev_inputs, dev_labels) = cols(&splits.dev);
        SeedData {
            splits,
            train_inputs,
            train_labels,
            dev_inputs,
            dev_labels,
        }
    }

    pub fn dev_eval(&self) -> EvalSet<'_> {
        EvalSet {
            inputs: &self.dev_inputs,
            labels: &self.dev_labels,
        }
    }
}

/// A configured run rooted at `cfg.out_dir`.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Pipeline { cfg, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.cfg.out_dir.join(format!("seed-{seed}"))
    }

    pub fn stage_dir(&self, seed: u64, stage: &str) -> PathBuf {
        self.seed_dir(seed).join(stage)
    }

    /// Stage keys chain: each covers its own settings and its inputs' keys.
    fn key(&self, seed: u64, stage: &str, mode: Option<AblationMode>) -> String {
        let c = &self.cfg;
        let teacher = json!({"seed": seed, "tasks": c.tasks, "teacher": c.teacher, "plan": c.teacher_plan});
        let value = match stage {
            "teacher" => teacher,
            "ta" => json!({"teacher": teacher, "plan": c.ta_plan}),
            _ => json!({
                "ta": {"teacher": teacher, "plan": c.ta_plan},
                "goal": c.goal,
                "prune": c.prune,
                "prune_mode": c.prune_mode,
                "recovery": c.recovery_plan,
                "exit_fit": c.exit_fit_plan,
                "mode": mode,
            }),
        };
        config::digest(&value)
    }

    /// Loads the checkpoint at `dir` if it was produced by the same stage
    /// settings. A checkpoint from different settings is an error.
    fn resume(&self, dir: &Path, key: &str) -> Result<Option<MultiExitModel>> {
        if !checkpoint::is_checkpoint(dir) {
            return Ok(None);
        }
        let (model, manifest) = checkpoint::load(dir)?;
        match manifest.metadata.get("stage_key").and_then(|v| v.as_str()) {
            Some(k) if k == key => Ok(Some(model)),
            _ => Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "produced by different stage settings; use a fresh output directory".into(),
            }),
        }
    }

    fn save(&self, model: &MultiExitModel, dir: &Path, stage: &str, seed: u64, key: &str) -> Result<()> {
        checkpoint::save(
            model,
            dir,
            self.cfg.checkpoint_dtype,
            Some(&self.hash),
            json!({"stage": stage, "seed": seed, "stage_key": key}),
        )
    }

    fn metrics(&self, dir: &Path) -> Result<MetricsLog> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        MetricsLog::append_to(&path)
    }

    /// Generates (and writes, once) the seed's mixed train/dev sets.
    pub fn data(&self, seed: u64) -> Result<SeedData> {
        let specs = self.cfg.task_specs(seed);
        let splits = mixed_splits(&specs, substream(seed, "data")).map_err(|e| stage_err("data", e))?;
        let dir = self.stage_dir(seed, "data");
        if !dir.join("dev.jsonl").is_file() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            splits.train.write(&dir.join("train.jsonl"))?;
            splits.dev.write(&dir.join("dev.jsonl"))?;
        }
        Ok(SeedData::new(splits))
    }

    pub fn teacher(&self, seed: u64, data: &SeedData) -> Result<MultiExitModel> {
        let run = || -> Result<MultiExitModel> {
            let dir = self.stage_dir(seed, "teacher");
            let key = self.key(seed, "teacher", None);
            if let Some(m) = self.resume(&dir, &key)? {
                return Ok(m);
            }
            let mut model = MultiExitModel::init(&self.cfg.teacher, substream(seed, "teacher/init"))?;
            let mut log = self.metrics(&dir)?;
            train_teacher(
                &mut model,
                &data.train_inputs,
                &data.train_labels,
                &self.cfg.teacher_plan,
                substream(seed, "teacher"),
                Some(data.dev_eval()),
                &mut log,
            )?;
            self.save(&model, &dir, "teacher", seed, &key)?;
            Ok(model)
        };
        run().map_err(|e| stage_err("teacher", e))
    }

    pub fn ta(&self, seed: u64, data: &SeedData, teacher: &MultiExitModel) -> Result<MultiExitModel> {
        let run = || -> Result<MultiExitModel> {
            let dir = self.stage_dir(seed, "ta");
            let key = self.key(seed, "ta", None);
            if let Some(m) = self.resume(&dir, &key)? {
                return Ok(m);
            }
            let mut init = teacher.clone();
            init.reset_exits(substream(seed, "ta/init"));
            let mut log = self.metrics(&dir)?;
            let (ta, _) = distill_ta(
                teacher,
                init,
                &data.train_inputs,
                &self.cfg.ta_plan,
                substream(seed, "ta"),
                Some(data.dev_eval()),
                &mut log,
            )?;
            self.save(&ta, &dir, "ta", seed, &key)?;
            Ok(ta)
        };
        run().map_err(|e| stage_err("distill-ta", e))
    }

    /// Slenderizes and recovers `ta` under `mode`. `targets` memoizes the
    /// TA's outputs on the training inputs across modes of one seed.
    pub fn slender(
        &self,
        seed: u64,
        mode: AblationMode,
        data: &SeedData,
        ta: &MultiExitModel,
        targets: &OnceCell<TargetCache>,
    ) -> Result<MultiExitModel> {
        let run = || -> Result<MultiExitModel> {
            let dir = self.stage_dir(seed, mode.name());
            let key = self.key(seed, "slender", Some(mode));
            if let Some(m) = self.resume(&dir, &key)? {
                return Ok(m);
            }
            let mut recovery = self.cfg.recovery_plan.clone();
            let mut opts = SlenderizeOptions {
                mode: self.cfg.prune_mode,
                use_exit_losses: true,
            };
            match mode {
                AblationMode::Full => {}
                AblationMode::TwoStage => {
                    opts.use_exit_losses = false;
                    recovery.exit_losses = ExitLosses::FinalOnly;
                    recovery.enable_feat = false;
                }
                AblationMode::NoExitCalibration => opts.use_exit_losses = false,
                AblationMode::NoPred => recovery.enable_pred = false,
                AblationMode::NoFeat => recovery.enable_feat = false,
            }
            if targets.get().is_none() {
                let _ = targets.set(cache_targets(ta, &data.train_inputs, true)?);
            }
            let recovery_data = RecoveryData {
                inputs: &data.train_inputs,
                labels: Some(&data.train_labels),
                targets: targets.get(),
            };
            let mut log = self.metrics(&dir)?;
            let (mut model, report) = slenderize(
                ta,
                &self.cfg.goal,
                &self.cfg.prune,
                &opts,
                recovery_data,
                &recovery,
                substream(seed, "prune"),
                Some(data.dev_eval()),
                &mut log,
            )?;
            recovery_train(
                ta,
                &mut model,
                recovery_data,
                &recovery,
                substream(seed, "recovery"),
                Some(data.dev_eval()),
                &mut log,
            )?;
            if mode == AblationMode::TwoStage {
                let exits: Vec<usize> = (0..model.num_layers() - 1).collect();
                fit_exits(
                    ta,
                    &mut model,
                    &exits,
                    &data.train_inputs,
                    &self.cfg.exit_fit_plan,
                    substream(seed, "recovery/exits"),
                    Some(data.dev_eval()),
                    &mut log,
                )?;
            }
            if model.config() != &self.cfg.goal {
                return Err(Error::InvalidConfig(format!(
                    "slender model {:?} does not match the goal",
                    model.config()
                )));
            }
            write_json(&dir.join(SLENDER_REPORT_FILE), &report)?;
            self.save(&model, &dir, mode.name(), seed, &key)?;
            Ok(model)
        };
        run().map_err(|e| stage_err(&format!("slenderize ({mode})"), e))
    }

    /// Evaluates `model` on the seed's dev set and writes `eval.json` and
    /// `pareto.csv` into `dir`.
    pub fn eval(&self, label: &str, seed: u64, data: &SeedData, model: &MultiExitModel, dir: &Path) -> Result<EvalReport> {
        let run = || -> Result<EvalReport> {
            let report = evaluate(&self.cfg, label, seed, model, &data.splits.dev, self.cfg.threads)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(&dir.join(EVAL_FILE), &report)?;
            crate::exit::write_pareto_csv(&dir.join(PARETO_FILE), &report.pareto)?;
            Ok(report)
        };
        run().map_err(|e| stage_err("eval", e))
    }

    /// Every stage of one seed; reports for the teacher, the TA and each
    /// configured mode.
    pub fn run_seed(&self, seed: u64) -> Result<Vec<EvalReport>> {
        let data = self.data(seed)?;
        let teacher = self.teacher(seed, &data)?;
        let ta = self.ta(seed, &data, &teacher)?;
        let mut reports = vec![
            self.eval("teacher", seed, &data, &teacher, &self.stage_dir(seed, "teacher"))?,
            self.eval("ta", seed, &data, &ta, &self.stage_dir(seed, "ta"))?,
        ];
        let targets = OnceCell::new();
        for &mode in &self.cfg.ablations {
            let slender = self.slender(seed, mode, &data, &ta, &targets)?;
            reports.push(self.eval(mode.name(), seed, &data, &slender, &self.stage_dir(seed, mode.name()))?);
        }
        Ok(reports)
    }

    /// All seeds, then the across-seed summary.
    pub fn run_all(&self) -> Result<Summary> {
        let out = &self.cfg.out_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("config.toml"), self.cfg.to_toml()?).map_err(|e| Error::io(out, e))?;
        let mut reports = Vec::new();
        for &seed in &self.cfg.seeds {
            reports.extend(self.run_seed(seed)?);
        }
        let summary = Summary::from_reports(&reports);
        write_json(&out.join(SUMMARY_FILE), &summary)?;
        std::fs::write(out.join(SUMMARY_TEXT_FILE), summary.to_text()).map_err(|e| Error::io(out, e))?;
        Ok(summary)
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a slenderization report written by [`Pipeline::slender`].
pub fn read_slender_report(dir: &Path) -> Result<SlenderReport> {
    let path = dir.join(SLENDER_REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
