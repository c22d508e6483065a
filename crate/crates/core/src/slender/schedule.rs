use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_prune, drop_lowest, score_structures, select_per_layer, StructureId, StructureKind, StructureScore};
use crate::distill::{cache_targets, exit_accuracies, DistillPlan, EvalSet, MetricsLog, RecoveryData};
use crate::error::{Error, Result};
use crate::model::accounting::{count_params, ModelShape, ParamOptions};
use crate::model::{ModelConfig, MultiExitModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    pub iterations: usize,
    /// Fraction of the remaining structures of each kind dropped per
    /// iteration (floored, never below the goal width). `None` spaces the
    /// widths geometrically from the start to the goal.
    pub drop_fraction: Option<f64>,
    /// Distillation steps after every prune.
    pub recovery_steps: usize,
    pub min_survivors: usize,
    /// Labelled training examples used for importance scoring.
    pub calibration_size: usize,
    pub calibration_batch: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            iterations: 4,
            drop_fraction: None,
            recovery_steps: 100,
            min_survivors: 1,
            calibration_size: 256,
            calibration_batch: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Every layer reaches the same goal widths.
    #[default]
    UniformPerLayer,
    /// Only the total per kind is fixed; layers may end up non-uniform.
    GlobalBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlenderizeOptions {
    pub mode: PruneMode,
    /// Score with the sum of every exit's loss rather than the final one.
    pub use_exit_losses: bool,
}

impl Default for SlenderizeOptions {
    fn default() -> Self {
        SlenderizeOptions {
            mode: PruneMode::UniformPerLayer,
            use_exit_losses: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

fn summarize(scores: &[StructureScore], kind: StructureKind) -> Option<ScoreSummary> {
    let v: Vec<f64> = scores
        .iter()
        .filter(|s| s.structure.kind == kind)
        .map(|s| s.importance)
        .collect();
    if v.is_empty() {
        return None;
    }
    Some(ScoreSummary {
        count: v.len(),
        min: v.iter().cloned().fold(f64::INFINITY, f64::min),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub target_heads: usize,
    pub target_ffn: usize,
    pub head_scores: Option<ScoreSummary>,
    pub channel_scores: Option<ScoreSummary>,
    pub dropped: Vec<StructureId>,
    pub params_before: u64,
    pub params_after: u64,
    pub recovery_loss: f64,
    pub exit_accuracy: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlenderReport {
    /// Goal equal to the input shape: nothing was done.
    pub noop: bool,
    /// The whole width reduction happened in one prune.
    pub single_drastic_prune: bool,
    pub factorized_rank: Option<usize>,
    pub params_initial: u64,
    pub params_final: u64,
    pub iterations: Vec<IterationReport>,
}

fn params(m: &MultiExitModel) -> u64 {
    count_params(&ModelShape::from(m), ParamOptions::MULTI_EXIT).total
}

/// Per-iteration target widths from `start` down to exactly `goal`.
pub fn planned_widths(start: usize, goal: usize, iterations: usize, drop_fraction: Option<f64>) -> Result<Vec<usize>> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("prune schedule needs >= 1 iteration".into()));
    }
    if goal > start || goal == 0 {
        return Err(Error::InvalidConfig(format!("goal width {goal} vs start {start}")));
    }
    let mut out = Vec::with_capacity(iterations);
    match drop_fraction {
        None => {
            let ratio = goal as f64 / start as f64;
            for t in 1..=iterations {
                let w = (start as f64 * ratio.powf(t as f64 / iterations as f64)).round() as usize;
                out.push(w.clamp(goal, start));
            }
            *out.last_mut().expect("non-empty") = goal;
        }
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!("drop fraction {f} outside (0, 1)")));
            }
            let mut w = start;
            for _ in 0..iterations {
                w = (w - (f * w as f64).floor() as usize).max(goal);
                out.push(w);
            }
            if w > goal {
                return Err(Error::InvalidConfig(format!(
                    "{iterations} iterations dropping {f} per step stop at width {w}, above goal {goal}"
                )));
            }
        }
    }
    Ok(out)
}

fn check_goal(ta: &ModelConfig, goal: &ModelConfig) -> Result<()> {
    let same_frame = ModelConfig {
        num_heads: ta.num_heads,
        ffn_size: ta.ffn_size,
        embed_rank: ta.embed_rank,
        ..goal.clone()
    };
    if &same_frame != ta {
        return Err(Error::InvalidConfig(
            "goal may differ from the input model only in heads, FFN width and embedding rank"
                .into(),
        ));
    }
    if goal.num_heads > ta.num_heads || goal.ffn_size > ta.ffn_size {
        return Err(Error::InvalidConfig(format!(
            "goal widths {}x{} exceed input widths {}x{}",
            goal.num_heads, goal.ffn_size, ta.num_heads, ta.ffn_size
        )));
    }
    match (ta.embed_rank, goal.embed_rank) {
        (Some(a), Some(b)) if a != b => Err(Error::InvalidConfig(format!(
            "embedding already factorized at rank {a}; goal asks for {b}"
        ))),
        (Some(_), None) => Err(Error::InvalidConfig(
            "goal asks for a dense embedding but the input is factorized".into(),
        )),
        _ => Ok(()),
    }
}

/// Global removal of exactly `drops[kind]` structures, lowest first,
/// keeping `min_survivors` per layer.
fn select_global(scores: &[StructureScore], drop_heads: usize, drop_channels: usize, min_survivors: usize) -> Result<Vec<StructureId>> {
    let mut out = Vec::new();
    for (kind, drop) in [
        (StructureKind::AttentionHead, drop_heads),
        (StructureKind::FfnChannel, drop_channels),
    ] {
        let of_kind: Vec<&StructureScore> = scores.iter().filter(|s| s.structure.kind == kind).collect();
        out.extend(drop_lowest(&of_kind, kind, drop, min_survivors)?);
    }
    out.sort();
    Ok(out)
}

/// Iterative exit-calibrated slenderization of `ta` to the `goal` shape.
///
/// The embedding is factorized first (when the goal has a rank), then each
/// iteration scores, prunes to that iteration's widths and runs
/// `recovery_steps` of distillation from `ta`. `data.labels` feed the
/// importance scores; `data.targets`, when given, must be `ta`'s outputs.
#[allow(clippy::too_many_arguments)]
pub fn slenderize(
    ta: &MultiExitModel,
    goal: &ModelConfig,
    schedule: &PruneSchedule,
    opts: &SlenderizeOptions,
    data: RecoveryData<'_>,
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<(MultiExitModel, SlenderReport)> {
    goal.validate()?;
    if !ta.is_uniform() {
        return Err(Error::InvalidArgument("input model has non-uniform layer widths".into()));
    }
    check_goal(ta.config(), goal)?;
    if schedule.min_survivors == 0 || schedule.calibration_batch == 0 {
        return Err(Error::InvalidConfig(
            "min_survivors and calibration_batch must be >= 1".into(),
        ));
    }
    if goal.num_heads < schedule.min_survivors || goal.ffn_size < schedule.min_survivors {
        return Err(Error::InvalidConfig(format!(
            "goal widths {}x{} below min_survivors {}",
            goal.num_heads, goal.ffn_size, schedule.min_survivors
        )));
    }
    let (inputs, labels) = match data.labels {
        Some(l) if l.len() == data.inputs.len() && !l.is_empty() => (data.inputs, l),
        _ => return Err(Error::InvalidArgument("slenderize needs labelled inputs".into())),
    };
    let tc = ta.config();
    let params_initial = params(ta);
    if goal == tc {
        return Ok((
            ta.clone(),
            SlenderReport {
                noop: true,
                single_drastic_prune: false,
                factorized_rank: None,
                params_initial,
                params_final: params_initial,
                iterations: Vec::new(),
            },
        ));
    }
    let heads = planned_widths(tc.num_heads, goal.num_heads, schedule.iterations, schedule.drop_fraction)?;
    let ffn = planned_widths(tc.ffn_size, goal.ffn_size, schedule.iterations, schedule.drop_fraction)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib_n = schedule.calibration_size.clamp(1, inputs.len());
    let mut calib_idx = sample(&mut rng, inputs.len(), calib_n).into_vec();
    calib_idx.sort_unstable();
    let calib_inputs: Vec<Vec<u32>> = calib_idx.iter().map(|&i| inputs[i].clone()).collect();
    let calib_labels: Vec<usize> = calib_idx.iter().map(|&i| labels[i]).collect();

    let mut model = ta.clone();
    let mut factorized_rank = None;
    if let (Some(r), None) = (goal.embed_rank, tc.embed_rank) {
        model = model.factorize_embedding(r)?;
        factorized_rank = Some(r);
    }
    let recovery_plan = DistillPlan {
        steps: schedule.recovery_steps,
        warmup_steps: plan.warmup_steps.min(schedule.recovery_steps / 10),
        ..plan.clone()
    };
    let owned;
    let targets = match data.targets {
        Some(t) => Some(t),
        None if schedule.recovery_steps > 0 => {
            owned = cache_targets(ta, inputs, plan.enable_feat)?;
            Some(&owned)
        }
        None => None,
    };
    let layers = model.num_layers();
    let mut iterations = Vec::with_capacity(schedule.iterations);
    for (t, (&h, &f)) in heads.iter().zip(&ffn).enumerate() {
        let before = params(&model);
        let scores = score_structures(
            &model,
            &calib_inputs,
            &calib_labels,
            schedule.calibration_batch,
            opts.use_exit_losses,
        )?;
        let dropped = match opts.mode {
            PruneMode::UniformPerLayer => select_per_layer(&scores, h, f)?,
            PruneMode::GlobalBudget => {
                let shapes = model.layer_shapes();
                let live_h: usize = shapes.iter().map(|s| s.num_heads).sum();
                let live_f: usize = shapes.iter().map(|s| s.ffn_size).sum();
                select_global(
                    &scores,
                    live_h.saturating_sub(h * layers),
                    live_f.saturating_sub(f * layers),
                    schedule.min_survivors,
                )?
            }
        };
        model = apply_prune(&model, &dropped)?;
        let report = crate::distill::recovery_stage(
            &format!("prune-{}", t + 1),
            ta,
            &mut model,
            RecoveryData {
                inputs,
                labels: Some(labels),
                targets,
            },
            &recovery_plan,
            seed.wrapping_add(t as u64 + 1),
            None,
            log,
        )?;
        let exit_accuracy = match eval {
            Some(e) => Some(exit_accuracies(&model, e.inputs, e.labels)?),
            None => None,
        };
        iterations.push(IterationReport {
            iteration: t + 1,
            target_heads: h,
            target_ffn: f,
            head_scores: summarize(&scores, StructureKind::AttentionHead),
            channel_scores: summarize(&scores, StructureKind::FfnChannel),
            dropped,
            params_before: before,
            params_after: params(&model),
            recovery_loss: report.final_loss,
            exit_accuracy,
        });
    }
    let pruned_iterations = iterations.iter().filter(|i| !i.dropped.is_empty()).count();
    Ok((
        model.clone(),
        SlenderReport {
            noop: false,
            single_drastic_prune: schedule.iterations == 1 && pruned_iterations == 1,
            factorized_rank,
            params_initial,
            params_final: params(&model),
            iterations,
        },
    ))
}
