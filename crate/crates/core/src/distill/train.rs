use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{label_node, pred_node};
use super::metrics::{MetricRecord, MetricsLog};
use super::optim::{clip_global_norm, scheduled_lr, AdamW};
use super::{DistillPlan, ExitLosses};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Batch, BoundModel, ForwardNodes, ForwardOptions, MultiExitModel};
use crate::tensor::Matrix;

/// Sequences per forward pass when evaluating without gradients.
const EVAL_CHUNK: usize = 64;

/// Held-out inputs and labels scored at every metrics record.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub inputs: &'a [Vec<u32>],
    pub labels: &'a [usize],
}

/// Recovery inputs. Labels are only read by the label-loss ablation.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryData<'a> {
    pub inputs: &'a [Vec<u32>],
    pub labels: Option<&'a [usize]>,
    /// The TA's outputs on `inputs`, computed on demand when absent.
    pub targets: Option<&'a TargetCache>,
}

impl<'a> RecoveryData<'a> {
    pub fn new(inputs: &'a [Vec<u32>], labels: Option<&'a [usize]>) -> Self {
        RecoveryData {
            inputs,
            labels,
            targets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    /// Total loss of the last step, `NaN` after zero steps.
    pub final_loss: f64,
}

/// Per-layer logits for every input: `L` matrices of `N × C`.
pub fn predict_all(model: &MultiExitModel, inputs: &[Vec<u32>]) -> Result<Vec<Matrix>> {
    let (l, c) = (model.num_layers(), model.num_classes());
    let mut out = vec![Matrix::zeros(inputs.len(), c); l];
    for (chunk_idx, chunk) in inputs.chunks(EVAL_CHUNK).enumerate() {
        let rec = model.forward_all(&Batch::from_sequences(chunk)?)?;
        for (layer, z) in rec.logits.iter().enumerate() {
            for r in 0..chunk.len() {
                out[layer]
                    .row_mut(chunk_idx * EVAL_CHUNK + r)
                    .copy_from_slice(z.row(r));
            }
        }
    }
    Ok(out)
}

/// Static accuracy of every exit.
pub fn exit_accuracies(model: &MultiExitModel, inputs: &[Vec<u32>], labels: &[usize]) -> Result<Vec<f64>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let logits = predict_all(model, inputs)?;
    Ok(logits
        .iter()
        .map(|z| {
            let hits = (0..z.rows()).filter(|&r| z.argmax_row(r) == labels[r]).count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

/// A frozen model's outputs for every training input.
#[derive(Clone, Debug)]
pub struct TargetCache {
    /// `L` matrices of `N × C`.
    pub logits: Vec<Matrix>,
    /// Per input, the `L + 1` hidden states of its non-padding tokens.
    pub hidden: Option<Vec<Vec<Matrix>>>,
}

/// Runs `model` once over `inputs`. Hidden states of non-padding tokens do
/// not depend on how the inputs are batched, so they are exact targets for
/// any later batching.
pub fn cache_targets(model: &MultiExitModel, inputs: &[Vec<u32>], with_hidden: bool) -> Result<TargetCache> {
    if !with_hidden {
        return Ok(TargetCache {
            logits: predict_all(model, inputs)?,
            hidden: None,
        });
    }
    let (l, c) = (model.num_layers(), model.num_classes());
    let mut logits = vec![Matrix::zeros(inputs.len(), c); l];
    let mut hidden = Vec::with_capacity(inputs.len());
    for (chunk_idx, chunk) in inputs.chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch::from_sequences(chunk)?;
        let rec = model.forward_all(&batch)?;
        for (r, seq) in chunk.iter().enumerate() {
            let i = chunk_idx * EVAL_CHUNK + r;
            for (layer, z) in rec.logits.iter().enumerate() {
                logits[layer].row_mut(i).copy_from_slice(z.row(r));
            }
            let rows: Vec<usize> = (r * batch.seq_len..r * batch.seq_len + seq.len()).collect();
            hidden.push(rec.hidden.iter().map(|h| h.select_rows(&rows)).collect());
        }
    }
    Ok(TargetCache {
        logits,
        hidden: Some(hidden),
    })
}

fn rows_of(m: &Matrix, idx: &[usize]) -> Matrix {
    m.select_rows(idx)
}

/// Union of the listed examples' cached state `state`, stacked in batch
/// order: exactly the rows `Batch::valid_rows` selects.
fn stacked_state(hidden: &[Vec<Matrix>], idx: &[usize], state: usize) -> Matrix {
    let rows: usize = idx.iter().map(|&i| hidden[i][state].rows()).sum();
    let cols = hidden[idx[0]][state].cols();
    let mut data = Vec::with_capacity(rows * cols);
    for &i in idx {
        data.extend_from_slice(hidden[i][state].as_slice());
    }
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn decay_mask(model: &MultiExitModel) -> Vec<bool> {
    model
        .weights
        .named()
        .iter()
        .map(|(name, _)| !(name.ends_with(".bias") || name.ends_with(".gain")))
        .collect()
}

struct LoopSpec<'a> {
    stage: &'a str,
    plan: &'a DistillPlan,
    seed: u64,
    forward: ForwardOptions,
    trainable: &'a dyn Fn(&str) -> bool,
    eval: Option<EvalSet<'a>>,
}

/// Per-step loss: returns the scalar loss node and each exit's share.
type LossFn<'f> =
    dyn FnMut(&mut Graph<'_>, &ForwardNodes, &Batch, &[usize]) -> Result<(NodeId, Vec<Option<NodeId>>)> + 'f;

/// Heads of skipped exits get no gradient, so they are also kept out of
/// weight decay.
fn inactive_exit(name: &str, active: &[bool]) -> bool {
    name.strip_prefix("exit.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|k| k.parse::<usize>().ok())
        .is_some_and(|k| !active[k])
}

fn run_loop(
    model: &mut MultiExitModel,
    inputs: &[Vec<u32>],
    spec: LoopSpec<'_>,
    log: &mut MetricsLog,
    loss_fn: &mut LossFn<'_>,
) -> Result<TrainReport> {
    let plan = spec.plan;
    plan.validate()?;
    if inputs.is_empty() && plan.steps > 0 {
        return Err(Error::InvalidArgument(format!("{}: no training inputs", spec.stage)));
    }
    let layers = model.num_layers();
    let decay = decay_mask(model);
    let train_flags: Vec<bool> = model
        .weights
        .named()
        .iter()
        .map(|(n, _)| (spec.trainable)(n) && !inactive_exit(n, &spec.forward.active_exits))
        .collect();
    let mut opt = AdamW::new(plan.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();
    let mut final_loss = f64::NAN;
    let mut window_loss = 0.0;
    let mut window_exit = vec![0.0; layers];
    let mut window_has_exit = vec![false; layers];
    let mut window_steps = 0usize;

    for step in 0..plan.steps {
        let mut idx = Vec::with_capacity(plan.batch_size);
        while idx.len() < plan.batch_size.min(inputs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
        let batch = Batch::from_sequences(&seqs)?;

        let (loss_value, exit_values, mut grads) = {
            let mut g = Graph::new();
            let bound = BoundModel::bind_with(model, &mut g, spec.trainable);
            let nodes = bound.forward(&mut g, &batch, &spec.forward)?;
            let (loss, exits) = loss_fn(&mut g, &nodes, &batch, &idx)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    stage: spec.stage.to_string(),
                    step,
                    loss: loss_value,
                });
            }
            let exit_values: Vec<Option<f64>> =
                exits.iter().map(|e| e.map(|n| g.value(n).item())).collect();
            g.backward(loss)?;
            let slots: Vec<NodeId> = bound.weights.slots().into_iter().copied().collect();
            let grads: Vec<Matrix> = slots
                .iter()
                .zip(&train_flags)
                .filter(|(_, &t)| t)
                .map(|(&n, _)| g.take_grad(n))
                .collect();
            (loss_value, exit_values, grads)
        };
        if let Some(max) = plan.max_grad_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = scheduled_lr(plan.learning_rate, step, plan.warmup_steps, plan.steps);
        let params: Vec<&mut Matrix> = model
            .weights
            .slots_mut()
            .into_iter()
            .zip(&train_flags)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p)
            .collect();
        let decay_sel: Vec<bool> = decay
            .iter()
            .zip(&train_flags)
            .filter(|(_, &t)| t)
            .map(|(&d, _)| d)
            .collect();
        opt.step(params, &grads, &decay_sel, lr);

        final_loss = loss_value;
        window_loss += loss_value;
        window_steps += 1;
        for (k, v) in exit_values.iter().enumerate() {
            if let Some(v) = v {
                window_exit[k] += v;
                window_has_exit[k] = true;
            }
        }
        let last = step + 1 == plan.steps;
        if last || (plan.eval_every > 0 && (step + 1) % plan.eval_every == 0) {
            let exit_accuracy = match spec.eval {
                Some(e) => Some(exit_accuracies(model, e.inputs, e.labels)?),
                None => None,
            };
            let n = window_steps as f64;
            log.record(MetricRecord {
                stage: spec.stage.to_string(),
                step: step + 1,
                loss: window_loss / n,
                exit_loss: (0..layers)
                    .map(|k| window_has_exit[k].then(|| window_exit[k] / n))
                    .collect(),
                exit_accuracy,
                learning_rate: lr,
            })?;
            window_loss = 0.0;
            window_exit.iter_mut().for_each(|v| *v = 0.0);
            window_has_exit.iter_mut().for_each(|v| *v = false);
            window_steps = 0;
        }
    }
    Ok(TrainReport {
        stage: spec.stage.to_string(),
        steps: plan.steps,
        final_loss,
    })
}

fn all_trainable(_: &str) -> bool {
    true
}

/// Ground-truth training of the final exit only.
pub fn train_teacher(
    model: &mut MultiExitModel,
    inputs: &[Vec<u32>],
    labels: &[usize],
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<TrainReport> {
    if inputs.len() != labels.len() {
        return Err(Error::InvalidArgument("inputs and labels differ in length".into()));
    }
    let layers = model.num_layers();
    let last = layers - 1;
    let spec = LoopSpec {
        stage: "teacher",
        plan,
        seed,
        forward: ForwardOptions::final_exit(layers),
        trainable: &all_trainable,
        eval,
    };
    run_loop(model, inputs, spec, log, &mut |g, nodes, _, idx| {
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let l = label_node(g, nodes.logits[last].expect("final exit active"), &y)?;
        let mut exits = vec![None; layers];
        exits[last] = Some(l);
        Ok((l, exits))
    })
}

fn check_depth(a: &MultiExitModel, b: &MultiExitModel, what: &str) -> Result<()> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{what}: depth {} vs {}",
            a.num_layers(),
            b.num_layers()
        )));
    }
    if a.num_classes() != b.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} vs {} classes",
            a.num_classes(),
            b.num_classes()
        )));
    }
    Ok(())
}

/// Trains every exit of `student_init` against the teacher's final logits.
pub fn distill_ta(
    teacher: &MultiExitModel,
    student_init: MultiExitModel,
    inputs: &[Vec<u32>],
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<(MultiExitModel, TrainReport)> {
    check_depth(teacher, &student_init, "distill_ta")?;
    let mut student = student_init;
    let layers = student.num_layers();
    let targets = if plan.steps > 0 {
        predict_all(teacher, inputs)?.pop().expect("at least one layer")
    } else {
        Matrix::zeros(0, 0)
    };
    let spec = LoopSpec {
        stage: "ta",
        plan,
        seed,
        forward: ForwardOptions::all_exits(layers).with_equilibrium(plan.gradient_equilibrium),
        trainable: &all_trainable,
        eval,
    };
    let report = run_loop(&mut student, inputs, spec, log, &mut |g, nodes, _, idx| {
        let t = rows_of(&targets, idx);
        let mut exits = Vec::with_capacity(layers);
        for z in &nodes.logits {
            let l = pred_node(g, z.expect("all exits active"), &t, plan.temperature)?;
            exits.push(Some(l));
        }
        let terms: Vec<NodeId> = exits.iter().flatten().copied().collect();
        let total = g.add_all(&terms)?;
        let total = if plan.pred_weight == 1.0 {
            total
        } else {
            g.scale(total, plan.pred_weight)
        };
        Ok((total, exits))
    })?;
    Ok((student, report))
}

/// Distills `ta` into `student`: per-exit prediction loss and hidden-state
/// loss over the embedding output and every layer output. With prediction
/// distillation disabled, every active exit trains on labels instead.
pub fn recovery_train(
    ta: &MultiExitModel,
    student: &mut MultiExitModel,
    data: RecoveryData<'_>,
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<TrainReport> {
    recovery_stage("recovery", ta, student, data, plan, seed, eval, log)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn recovery_stage(
    stage: &str,
    ta: &MultiExitModel,
    student: &mut MultiExitModel,
    data: RecoveryData<'_>,
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<TrainReport> {
    plan.validate()?;
    check_depth(ta, student, "recovery_train")?;
    if ta.hidden_size() != student.hidden_size() {
        return Err(Error::shape(
            "recovery_train",
            format!("hidden size {} vs {}", ta.hidden_size(), student.hidden_size()),
        ));
    }
    let labels = match (plan.enable_pred, data.labels) {
        (false, None) => {
            return Err(Error::InvalidArgument(
                "label loss requested but no labels supplied".into(),
            ))
        }
        (false, Some(l)) => {
            if l.len() != data.inputs.len() {
                return Err(Error::InvalidArgument("inputs and labels differ in length".into()));
            }
            Some(l)
        }
        // Prediction distillation never consumes labels.
        (true, _) => None,
    };
    let layers = student.num_layers();
    let active: Vec<bool> = match plan.exit_losses {
        ExitLosses::All => vec![true; layers],
        ExitLosses::FinalOnly => (0..layers).map(|k| k + 1 == layers).collect(),
    };
    let owned;
    let cache = match data.targets {
        _ if plan.steps == 0 => None,
        Some(t) => {
            if t.logits.first().map(Matrix::rows) != Some(data.inputs.len()) {
                return Err(Error::InvalidArgument("cached targets do not match the inputs".into()));
            }
            if plan.enable_feat && t.hidden.is_none() {
                return Err(Error::InvalidArgument("cached targets lack hidden states".into()));
            }
            Some(t)
        }
        None => {
            owned = cache_targets(ta, data.inputs, plan.enable_feat)?;
            Some(&owned)
        }
    };
    let spec = LoopSpec {
        stage,
        plan,
        seed,
        forward: ForwardOptions {
            active_exits: active,
            gradient_equilibrium: plan.gradient_equilibrium,
        },
        trainable: &all_trainable,
        eval,
    };
    run_loop(student, data.inputs, spec, log, &mut |g, nodes, batch, idx| {
        let cache = cache.expect("cached when steps > 0");
        let mut exits = vec![None; layers];
        for (k, z) in nodes.logits.iter().enumerate() {
            let Some(z) = *z else { continue };
            exits[k] = Some(match labels {
                Some(l) => {
                    let y: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
                    label_node(g, z, &y)?
                }
                None => pred_node(g, z, &rows_of(&cache.logits[k], idx), plan.temperature)?,
            });
        }
        let exit_terms: Vec<NodeId> = exits.iter().flatten().copied().collect();
        let mut total = g.add_all(&exit_terms)?;
        if plan.pred_weight != 1.0 {
            total = g.scale(total, plan.pred_weight);
        }
        if plan.enable_feat {
            let hidden = cache.hidden.as_ref().expect("hidden states cached");
            let valid = batch.valid_rows();
            let mut feats = Vec::with_capacity(nodes.hidden.len());
            for (state, &h) in nodes.hidden.iter().enumerate() {
                let mine = g.embedding_lookup(h, &valid)?;
                let theirs = g.constant(stacked_state(hidden, idx, state));
                feats.push(g.mean_squared_error(mine, theirs)?);
            }
            let feat = g.add_all(&feats)?;
            let feat = if plan.feat_weight == 1.0 {
                feat
            } else {
                g.scale(feat, plan.feat_weight)
            };
            total = g.add(total, feat)?;
        }
        Ok((total, exits))
    })
}

/// Trains only the listed exit heads (0-based) against `ta`'s logits at the
/// same layers, with the backbone frozen.
#[allow(clippy::too_many_arguments)]
pub fn fit_exits(
    ta: &MultiExitModel,
    student: &mut MultiExitModel,
    exits: &[usize],
    inputs: &[Vec<u32>],
    plan: &DistillPlan,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut MetricsLog,
) -> Result<TrainReport> {
    check_depth(ta, student, "fit_exits")?;
    let layers = student.num_layers();
    if let Some(&bad) = exits.iter().find(|&&k| k >= layers) {
        return Err(Error::InvalidArgument(format!("exit {bad} of {layers}")));
    }
    if exits.is_empty() {
        return Ok(TrainReport {
            stage: "fit-exits".into(),
            steps: 0,
            final_loss: f64::NAN,
        });
    }
    let targets = if plan.steps > 0 {
        predict_all(ta, inputs)?
    } else {
        Vec::new()
    };
    let prefixes: Vec<String> = exits.iter().map(|k| format!("exit.{k}.")).collect();
    let trainable = |name: &str| prefixes.iter().any(|p| name.starts_with(p.as_str()));
    let mut active = vec![false; layers];
    for &k in exits {
        active[k] = true;
    }
    let spec = LoopSpec {
        stage: "fit-exits",
        plan,
        seed,
        forward: ForwardOptions {
            active_exits: active,
            gradient_equilibrium: false,
        },
        trainable: &trainable,
        eval,
    };
    run_loop(student, inputs, spec, log, &mut |g, nodes, _, idx| {
        let mut out = vec![None; layers];
        for (k, z) in nodes.logits.iter().enumerate() {
            if let Some(z) = *z {
                out[k] = Some(pred_node(g, z, &rows_of(&targets[k], idx), plan.temperature)?);
            }
        }
        let terms: Vec<NodeId> = out.iter().flatten().copied().collect();
        Ok((g.add_all(&terms)?, out))
    })
}
