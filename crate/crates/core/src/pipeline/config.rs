use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillPlan;
use crate::error::{Error, Result};
use crate::exit::Threshold;
use crate::model::checkpoint::Dtype;
use crate::model::ModelConfig;
use crate::slender::{PruneMode, PruneSchedule};
use crate::taskgen::{TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Exit-calibrated pruning, prediction and feature distillation at every
    /// exit.
    Full,
    /// Backbone pruned and recovered on the final exit only; intermediate
    /// exits fitted afterwards with the backbone frozen.
    TwoStage,
    /// Importance scored on the final exit only.
    NoExitCalibration,
    /// Label loss in place of prediction distillation.
    NoPred,
    /// No hidden-state distillation.
    NoFeat,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::TwoStage,
        AblationMode::NoExitCalibration,
        AblationMode::NoPred,
        AblationMode::NoFeat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::TwoStage => "two-stage",
            AblationMode::NoExitCalibration => "no-exit-calibration",
            AblationMode::NoPred => "no-pred",
            AblationMode::NoFeat => "no-feat",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode `{s}`")))
    }
}

/// One synthetic task. Its generator seed comes from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub kind: TaskKind,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_balance")]
    pub balance: f64,
}

fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    20
}
fn default_train_size() -> usize {
    1500
}
fn default_dev_size() -> usize {
    300
}
fn default_vocab() -> usize {
    64
}
fn default_balance() -> f64 {
    0.5
}

impl TaskEntry {
    pub fn new(kind: TaskKind) -> Self {
        TaskEntry {
            kind,
            min_len: default_min_len(),
            max_len: default_max_len(),
            train_size: default_train_size(),
            dev_size: default_dev_size(),
            vocab_size: default_vocab(),
            balance: default_balance(),
        }
    }

    pub fn spec(&self, num_classes: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: self.kind,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            num_classes,
            balance: self.balance,
            seed,
            train_size: self.train_size,
            dev_size: self.dev_size,
        }
    }
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tasks: Vec<TaskEntry>,
    pub teacher: ModelConfig,
    /// Slender shape; its `embed_rank` is the word-embedding rank.
    pub goal: ModelConfig,
    pub teacher_plan: DistillPlan,
    pub ta_plan: DistillPlan,
    pub recovery_plan: DistillPlan,
    /// Exit fitting after backbone recovery in `two-stage` mode.
    pub exit_fit_plan: DistillPlan,
    pub prune: PruneSchedule,
    pub prune_mode: PruneMode,
    /// Sweep thresholds, ascending.
    pub thresholds: Vec<Threshold>,
    /// Threshold for the per-task and simple-vs-rest exit-depth comparison.
    pub probe_threshold: Threshold,
    pub seeds: Vec<u64>,
    /// Modes run by `run-all`.
    pub ablations: Vec<AblationMode>,
    pub out_dir: PathBuf,
    /// Worker threads for evaluation.
    pub threads: usize,
    pub checkpoint_dtype: Dtype,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let thresholds = std::iter::once(Threshold::NeverExitEarly)
            .chain(
                [0.0, 0.001, 0.003, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
                    .into_iter()
                    .map(Threshold::Nats),
            )
            .chain(std::iter::once(Threshold::Nats(f64::INFINITY)))
            .collect();
        PipelineConfig {
            tasks: TaskKind::ALL.into_iter().map(TaskEntry::new).collect(),
            teacher: ModelConfig::desk_teacher(),
            goal: ModelConfig::desk_goal(),
            teacher_plan: DistillPlan {
                learning_rate: 1e-3,
                steps: 600,
                warmup_steps: 100,
                ..DistillPlan::default()
            },
            ta_plan: DistillPlan {
                learning_rate: 5e-4,
                steps: 600,
                warmup_steps: 50,
                ..DistillPlan::default()
            },
            recovery_plan: DistillPlan {
                learning_rate: 1e-3,
                steps: 400,
                warmup_steps: 40,
                ..DistillPlan::default()
            },
            exit_fit_plan: DistillPlan {
                learning_rate: 1e-3,
                steps: 300,
                warmup_steps: 30,
                ..DistillPlan::default()
            },
            prune: PruneSchedule::default(),
            prune_mode: PruneMode::UniformPerLayer,
            thresholds,
            probe_threshold: Threshold::Nats(0.1),
            seeds: vec![1, 2, 3, 4, 5],
            ablations: AblationMode::ALL.to_vec(),
            out_dir: PathBuf::from("runs"),
            threads: 1,
            checkpoint_dtype: Dtype::F64,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.teacher.validate()?;
        self.goal.validate()?;
        for p in [&self.teacher_plan, &self.ta_plan, &self.recovery_plan, &self.exit_fit_plan] {
            p.validate()?;
        }
        if self.teacher.embed_rank.is_some() {
            return bad("teacher must have a dense word embedding".into());
        }
        let t = &self.teacher;
        let g = &self.goal;
        if g.num_layers != t.num_layers {
            return bad(format!("goal depth {} differs from teacher depth {}", g.num_layers, t.num_layers));
        }
        if g.num_heads > t.num_heads || g.ffn_size > t.ffn_size {
            return bad("goal widths exceed teacher widths".into());
        }
        if let Some(r) = g.embed_rank {
            if r > t.hidden_size.min(t.vocab_size) {
                return bad(format!("embedding rank {r} above min(V, H)"));
            }
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        for task in &self.tasks {
            let spec = task.spec(t.num_classes, 0);
            spec.validate()?;
            if spec.vocab_size > t.vocab_size {
                return bad(format!("task vocabulary {} above model vocabulary {}", spec.vocab_size, t.vocab_size));
            }
            if spec.max_seq_len() > t.max_positions {
                return bad(format!(
                    "{} sequences reach {} tokens, above max_positions {}",
                    task.kind,
                    spec.max_seq_len(),
                    t.max_positions
                ));
            }
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.ablations.is_empty() {
            return bad("no ablation modes".into());
        }
        if self.thresholds.is_empty() {
            return bad("empty threshold list".into());
        }
        if self.thresholds.windows(2).any(|w| w[0].rank() > w[1].rank()) {
            return bad("thresholds must be ascending".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Per-task generator specs for one run seed.
    pub fn task_specs(&self, seed: u64) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| t.spec(self.teacher.num_classes, substream(seed, &format!("data/{i}"))))
            .collect()
    }
}

pub(crate) fn digest(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Seed of the named random stream under `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    let h = Sha256::digest(format!("{root}/{name}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}
