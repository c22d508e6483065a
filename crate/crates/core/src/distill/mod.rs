//! Training: ground-truth teacher training, prediction distillation into a
//! multi-exit teaching assistant, and prediction + hidden-state recovery of
//! a slenderized student.

mod losses;
mod metrics;
mod optim;
mod train;


use serde::{Deserialize, Serialize};

pub use losses::{
    feat_distill_loss, gradient_equilibrium_rescale, label_node, pred_distill_loss, pred_node,
    soft_targets,
};
pub(crate) use train::recovery_stage;
pub use metrics::{MetricRecord, MetricsLog};
pub use optim::{clip_global_norm, scheduled_lr, AdamW};
pub use train::{
    cache_targets, distill_ta, exit_accuracies, fit_exits, predict_all, recovery_train,
    train_teacher, EvalSet, RecoveryData, TargetCache, TrainReport,
};

use crate::error::{Error, Result};

/// Which exits contribute a loss during recovery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitLosses {
    #[default]
    All,
    FinalOnly,
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillPlan {
    pub temperature: f64,
    pub enable_pred: bool,
    pub enable_feat: bool,
    pub gradient_equilibrium: bool,
    pub exit_losses: ExitLosses,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub pred_weight: f64,
    pub feat_weight: f64,
    /// Steps between metric records; 0 records only the final step.
    pub eval_every: usize,
}

impl Default for DistillPlan {
    fn default() -> Self {
        DistillPlan {
            temperature: 1.0,
            enable_pred: true,
            enable_feat: true,
            gradient_equilibrium: true,
            exit_losses: ExitLosses::All,
            learning_rate: 3e-4,
            batch_size: 16,
            steps: 500,
            warmup_steps: 0,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            pred_weight: 1.0,
            feat_weight: 1.0,
            eval_every: 0,
        }
    }
}

impl DistillPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !self.enable_pred && !self.enable_feat {
            return bad("at least one of enable_pred / enable_feat must be set");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return bad("max_grad_norm must be > 0");
        }
        Ok(())
    }
}
