use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::distill::predict_all;
use crate::error::{Error, Result};
use crate::exit::{pareto_sweep, split_simple_instances, ParetoPoint, Threshold};
use crate::model::accounting::{count_flops, count_params, ModelShape, ParamBreakdown, ParamOptions};
use crate::model::MultiExitModel;
use crate::taskgen::Dataset;

/// Exit depth at the probe threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub threshold: Threshold,
    pub accuracy: f64,
    pub mean_exit_layer: f64,
    pub mean_flops: f64,
    pub task_mean_exit_layer: BTreeMap<String, f64>,
    /// Instances strictly shorter than the median length.
    pub simple_mean_exit_layer: f64,
    pub rest_mean_exit_layer: f64,
    pub n_simple: usize,
    pub n_rest: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub n_instances: usize,
    /// Static accuracy of every exit, 1-based order.
    pub exit_accuracy: Vec<f64>,
    pub task_exit_accuracy: BTreeMap<String, Vec<f64>>,
    pub final_accuracy: f64,
    pub mean_exit_accuracy: f64,
    /// Mean over exits `1..=L/2`.
    pub shallow_exit_accuracy: f64,
    pub pareto: Vec<ParetoPoint>,
    pub probe: ProbeReport,
    pub params: ParamBreakdown,
    pub teacher_params: ParamBreakdown,
    pub params_reduction: f64,
    /// Full-depth FLOPs at the teacher's `seq_len`.
    pub static_flops: u64,
    pub teacher_static_flops: u64,
    pub static_flops_reduction: f64,
    /// Teacher full-depth FLOPs over this model's mean dynamic FLOPs at the
    /// probe threshold, both on the dev instances' own lengths.
    pub dynamic_flops_reduction: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Static, dynamic and accounting evaluation of `model` on `dev`.
pub fn evaluate(
    cfg: &PipelineConfig,
    label: &str,
    seed: u64,
    model: &MultiExitModel,
    dev: &Dataset,
    threads: usize,
) -> Result<EvalReport> {
    if dev.instances.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let inputs: Vec<Vec<u32>> = dev.instances.iter().map(|i| i.ids.clone()).collect();
    let labels: Vec<usize> = dev.instances.iter().map(|i| i.label).collect();
    let layers = model.num_layers();

    let logits = predict_all(model, &inputs)?;
    let acc_over = |idx: &[usize]| -> Vec<f64> {
        logits
            .iter()
            .map(|z| idx.iter().filter(|&&i| z.argmax_row(i) == labels[i]).count() as f64 / idx.len() as f64)
            .collect()
    };
    let all: Vec<usize> = (0..inputs.len()).collect();
    let exit_accuracy = acc_over(&all);
    let mut kinds: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, inst) in dev.instances.iter().enumerate() {
        kinds.entry(inst.tag.kind.to_string()).or_default().push(i);
    }
    let task_exit_accuracy = kinds.iter().map(|(k, idx)| (k.clone(), acc_over(idx))).collect();

    let sweep = pareto_sweep(model, &inputs, &labels, &cfg.thresholds, threads)?;
    let t = cfg.probe_threshold;
    let depth = sweep.exit_layers(t);
    let mean_depth = |idx: &[usize]| idx.iter().map(|&i| depth[i] as f64).sum::<f64>() / idx.len() as f64;
    let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let (simple, rest) = split_simple_instances(&lengths);
    let probe_flops: Vec<f64> = sweep
        .profiles
        .iter()
        .zip(&depth)
        .map(|(p, &k)| p.flops[k - 1] as f64)
        .collect();
    let probe_correct = sweep
        .profiles
        .iter()
        .zip(&depth)
        .zip(&labels)
        .filter(|((p, &k), &y)| p.predictions[k - 1] == y)
        .count();
    let probe = ProbeReport {
        threshold: t,
        accuracy: probe_correct as f64 / inputs.len() as f64,
        mean_exit_layer: mean_depth(&all),
        mean_flops: mean(&probe_flops),
        task_mean_exit_layer: kinds.iter().map(|(k, idx)| (k.clone(), mean_depth(idx))).collect(),
        simple_mean_exit_layer: mean_depth(&simple),
        rest_mean_exit_layer: mean_depth(&rest),
        n_simple: simple.len(),
        n_rest: rest.len(),
    };

    let shape = ModelShape::from(model);
    let teacher_shape = ModelShape::from(&cfg.teacher);
    let params = count_params(&shape, ParamOptions::MULTI_EXIT);
    let teacher_params = count_params(&teacher_shape, ParamOptions::MULTI_EXIT);
    let n = cfg.teacher.seq_len;
    let static_flops = count_flops(&shape, n, layers)?.cumulative;
    let teacher_static_flops = count_flops(&teacher_shape, n, teacher_shape.layers.len())?.cumulative;
    let teacher_dynamic: Vec<f64> = lengths
        .iter()
        .map(|&len| count_flops(&teacher_shape, len, teacher_shape.layers.len()).map(|f| f.cumulative as f64))
        .collect::<Result<_>>()?;

    Ok(EvalReport {
        label: label.to_string(),
        seed,
        n_instances: inputs.len(),
        final_accuracy: exit_accuracy[layers - 1],
        mean_exit_accuracy: mean(&exit_accuracy),
        shallow_exit_accuracy: mean(&exit_accuracy[..(layers / 2).max(1)]),
        exit_accuracy,
        task_exit_accuracy,
        pareto: sweep.points,
        dynamic_flops_reduction: mean(&teacher_dynamic) / probe.mean_flops,
        probe,
        params_reduction: teacher_params.total as f64 / params.total as f64,
        params,
        teacher_params,
        static_flops_reduction: teacher_static_flops as f64 / static_flops as f64,
        static_flops,
        teacher_static_flops,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let m = mean(&values);
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean: m, sd, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub final_accuracy: Stat,
    pub task_final_accuracy: BTreeMap<String, Stat>,
    pub exit_accuracy: Vec<Stat>,
    pub mean_exit_accuracy: Stat,
    pub shallow_exit_accuracy: Stat,
    pub probe_accuracy: Stat,
    pub probe_mean_exit_layer: Stat,
    pub probe_task_exit_layer: BTreeMap<String, Stat>,
    pub params_reduction: Stat,
    pub static_flops_reduction: Stat,
    pub dynamic_flops_reduction: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// In order of first appearance.
    pub labels: Vec<LabelSummary>,
}

impl Summary {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for r in reports {
            if !order.contains(&r.label.as_str()) {
                order.push(&r.label);
            }
        }
        let labels = order
            .into_iter()
            .map(|label| {
                let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.label == label).collect();
                let stat = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(rs.iter().map(|r| f(r)).collect());
                let keyed = |f: &dyn Fn(&EvalReport) -> &BTreeMap<String, f64>| -> BTreeMap<String, Stat> {
                    f(rs[0])
                        .keys()
                        .map(|k| (k.clone(), Stat::of(rs.iter().map(|r| f(r)[k]).collect())))
                        .collect()
                };
                LabelSummary {
                    label: label.to_string(),
                    seeds: rs.iter().map(|r| r.seed).collect(),
                    final_accuracy: stat(&|r| r.final_accuracy),
                    task_final_accuracy: rs[0]
                        .task_exit_accuracy
                        .keys()
                        .map(|k| {
                            let v = rs.iter().map(|r| *r.task_exit_accuracy[k].last().expect("exits")).collect();
                            (k.clone(), Stat::of(v))
                        })
                        .collect(),
                    exit_accuracy: (0..rs[0].exit_accuracy.len())
                        .map(|k| Stat::of(rs.iter().map(|r| r.exit_accuracy[k]).collect()))
                        .collect(),
                    mean_exit_accuracy: stat(&|r| r.mean_exit_accuracy),
                    shallow_exit_accuracy: stat(&|r| r.shallow_exit_accuracy),
                    probe_accuracy: stat(&|r| r.probe.accuracy),
                    probe_mean_exit_layer: stat(&|r| r.probe.mean_exit_layer),
                    probe_task_exit_layer: keyed(&|r| &r.probe.task_mean_exit_layer),
                    params_reduction: stat(&|r| r.params_reduction),
                    static_flops_reduction: stat(&|r| r.static_flops_reduction),
                    dynamic_flops_reduction: stat(&|r| r.dynamic_flops_reduction),
                }
            })
            .collect();
        Summary { labels }
    }

    pub fn get(&self, label: &str) -> Option<&LabelSummary> {
        self.labels.iter().find(|l| l.label == label)
    }

    /// Fixed-width table of mean ± sd per label.
    pub fn to_text(&self) -> String {
        let pm = |s: &Stat| format!("{:.4} ± {:.4}", s.mean, s.sd);
        let mut out = String::new();
        for l in &self.labels {
            let _ = writeln!(out, "[{}] seeds {:?}", l.label, l.seeds);
            let _ = writeln!(out, "  final accuracy        {}", pm(&l.final_accuracy));
            for (k, s) in &l.task_final_accuracy {
                let _ = writeln!(out, "    {k:<20}{}", pm(s));
            }
            let _ = writeln!(out, "  mean over exits       {}", pm(&l.mean_exit_accuracy));
            let _ = writeln!(out, "  shallow exits         {}", pm(&l.shallow_exit_accuracy));
            let exits: Vec<String> = l.exit_accuracy.iter().map(|s| format!("{:.3}", s.mean)).collect();
            let _ = writeln!(out, "  per exit              {}", exits.join(" "));
            let _ = writeln!(out, "  probe accuracy        {}", pm(&l.probe_accuracy));
            let _ = writeln!(out, "  probe exit layer      {}", pm(&l.probe_mean_exit_layer));
            for (k, s) in &l.probe_task_exit_layer {
                let _ = writeln!(out, "    {k:<20}{}", pm(s));
            }
            let _ = writeln!(out, "  params reduction      {}", pm(&l.params_reduction));
            let _ = writeln!(out, "  static FLOPs red.     {}", pm(&l.static_flops_reduction));
            let _ = writeln!(out, "  dynamic FLOPs red.    {}", pm(&l.dynamic_flops_reduction));
        }
        out
    }
}
