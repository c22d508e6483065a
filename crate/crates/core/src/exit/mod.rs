//! Entropy-gated dynamic inference: a frozen multi-exit model runs one
//! instance at a time, layer by layer, and stops at the first exit whose
//! prediction entropy is at or below the threshold.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::accounting::{count_flops, ModelShape};
use crate::model::{Batch, BoundModel, MultiExitModel};
use crate::tensor::{argmax, softmax};


const SUM_TOLERANCE: f64 = 1e-9;

/// Entropy in nats, `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h.max(0.0))
}

/// Exit gate. `NeverExitEarly` always runs to the last layer; `Nats(t)`
/// exits at the first layer whose entropy is `≤ t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    NeverExitEarly,
    Nats(f64),
}

impl Threshold {
    pub fn nats(t: f64) -> Result<Self> {
        if t.is_nan() || t < 0.0 {
            return Err(Error::InvalidArgument(format!("entropy threshold {t}")));
        }
        Ok(Threshold::Nats(t))
    }

    pub fn admits(self, entropy: f64) -> bool {
        match self {
            Threshold::NeverExitEarly => false,
            Threshold::Nats(t) => entropy <= t,
        }
    }

    /// `NeverExitEarly` sorts below every numeric threshold.
    pub fn rank(self) -> f64 {
        match self {
            Threshold::NeverExitEarly => f64::NEG_INFINITY,
            Threshold::Nats(t) => t,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::NeverExitEarly => f.write_str("never"),
            Threshold::Nats(t) if t.is_infinite() => f.write_str("inf"),
            Threshold::Nats(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Nats(t) if t.is_finite() => s.serialize_f64(*t),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Word(String),
        }
        let t = match Raw::deserialize(d)? {
            Raw::Number(t) => t,
            Raw::Word(w) => match w.as_str() {
                "never" => return Ok(Threshold::NeverExitEarly),
                "inf" => f64::INFINITY,
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "threshold `{other}`: expected a number, \"inf\" or \"never\""
                    )))
                }
            },
        };
        Threshold::nats(t).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub threshold: Threshold,
    /// 1-based layer at which inference stops regardless of entropy;
    /// `None` means the last layer.
    pub max_layer: Option<usize>,
}

impl ExitPolicy {
    pub fn new(threshold: Threshold) -> Self {
        ExitPolicy {
            threshold,
            max_layer: None,
        }
    }

    fn last_layer(&self, layers: usize) -> Result<usize> {
        match self.max_layer {
            None => Ok(layers),
            Some(m) if (1..=layers).contains(&m) => Ok(m),
            Some(m) => Err(Error::InvalidArgument(format!(
                "max_layer {m} outside 1..={layers}"
            ))),
        }
    }
}

/// One instance's dynamic inference outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    /// 1-based.
    pub exit_layer: usize,
    pub entropy: f64,
    pub predicted: usize,
    pub logits: Vec<f64>,
    /// Cumulative FLOPs up to and including the exit head.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub records: Vec<ExitRecord>,
    pub accuracy: f64,
    pub mean_exit_layer: f64,
    pub mean_flops: f64,
}

impl ExitTrace {
    fn from_records(records: Vec<ExitRecord>, labels: &[usize]) -> Self {
        let n = records.len().max(1) as f64;
        let correct = records.iter().zip(labels).filter(|(r, &y)| r.predicted == y).count();
        ExitTrace {
            accuracy: correct as f64 / n,
            mean_exit_layer: records.iter().map(|r| r.exit_layer as f64).sum::<f64>() / n,
            mean_flops: records.iter().map(|r| r.flops as f64).sum::<f64>() / n,
            records,
        }
    }

    /// Mean exit layer over a subset of instance indices (`NaN` if empty).
    pub fn mean_exit_layer_of(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.records[i].exit_layer as f64).sum::<f64>() / indices.len() as f64
    }

    /// One JSON object per instance.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `ids` through `model` one layer at a time, stopping at the first
/// admitted exit.
pub fn run_dynamic(model: &MultiExitModel, ids: &[u32], policy: &ExitPolicy) -> Result<ExitRecord> {
    let last = policy.last_layer(model.num_layers())?;
    let batch = Batch::from_sequences(&[ids])?;
    let shape = ModelShape::from(model);
    let mut g = Graph::new();
    let bound = BoundModel::bind(model, &mut g, false);
    let mut h = bound.embed(&mut g, &batch)?;
    for k in 0..last {
        h = bound.layer(&mut g, k, h, &batch)?;
        let z = bound.exit(&mut g, k, h, batch.seq_len)?;
        let logits = g.value(z).row(0).to_vec();
        let e = entropy(&softmax(&logits))?;
        if policy.threshold.admits(e) || k + 1 == last {
            return Ok(ExitRecord {
                exit_layer: k + 1,
                entropy: e,
                predicted: argmax(&logits),
                flops: count_flops(&shape, ids.len(), k + 1)?.cumulative,
                logits,
            });
        }
    }
    unreachable!("loop returns at the last layer")
}

/// Applies `f` to `0..n` on up to `threads` scoped threads; results are in
/// index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn check_dataset(inputs: &[Vec<u32>], labels: &[usize]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Dynamic inference over a dataset.
pub fn evaluate_dynamic(
    model: &MultiExitModel,
    inputs: &[Vec<u32>],
    labels: &[usize],
    policy: &ExitPolicy,
    threads: usize,
) -> Result<ExitTrace> {
    check_dataset(inputs, labels)?;
    let records = parallel_map(inputs.len(), threads, |i| run_dynamic(model, &inputs[i], policy))?;
    Ok(ExitTrace::from_records(records, labels))
}

/// Every exit's entropy, prediction and cumulative FLOPs for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitProfile {
    pub entropies: Vec<f64>,
    pub predictions: Vec<usize>,
    pub flops: Vec<u64>,
}

impl ExitProfile {
    /// 1-based exit layer under `threshold`.
    pub fn exit_layer(&self, threshold: Threshold) -> usize {
        self.entropies
            .iter()
            .position(|&e| threshold.admits(e))
            .map_or(self.entropies.len(), |k| k + 1)
    }
}

pub fn exit_profile(model: &MultiExitModel, ids: &[u32]) -> Result<ExitProfile> {
    let record = model.forward_all(&Batch::from_sequences(&[ids])?)?;
    let shape = ModelShape::from(model);
    let mut p = ExitProfile {
        entropies: Vec::with_capacity(record.logits.len()),
        predictions: Vec::with_capacity(record.logits.len()),
        flops: Vec::with_capacity(record.logits.len()),
    };
    for (k, z) in record.logits.iter().enumerate() {
        p.entropies.push(entropy(&softmax(z.row(0)))?);
        p.predictions.push(argmax(z.row(0)));
        p.flops.push(count_flops(&shape, ids.len(), k + 1)?.cumulative);
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub threshold: Threshold,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub mean_exit_layer: f64,
    pub n_instances: usize,
}

/// Result of a threshold sweep, with the per-instance profiles it was
/// computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<ParetoPoint>,
    pub profiles: Vec<ExitProfile>,
}

impl Sweep {
    /// Exit layers of every instance under `threshold`.
    pub fn exit_layers(&self, threshold: Threshold) -> Vec<usize> {
        self.profiles.iter().map(|p| p.exit_layer(threshold)).collect()
    }
}

/// One point per threshold. Entropies are computed once per instance.
pub fn pareto_sweep(
    model: &MultiExitModel,
    inputs: &[Vec<u32>],
    labels: &[usize],
    thresholds: &[Threshold],
    threads: usize,
) -> Result<Sweep> {
    check_dataset(inputs, labels)?;
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold list".into()));
    }
    if thresholds.windows(2).any(|w| w[0].rank() > w[1].rank()) {
        return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    let profiles = parallel_map(inputs.len(), threads, |i| exit_profile(model, &inputs[i]))?;
    let n = inputs.len() as f64;
    let points = thresholds
        .iter()
        .map(|&t| {
            let (mut correct, mut layers, mut flops) = (0usize, 0.0, 0.0);
            for (p, &y) in profiles.iter().zip(labels) {
                let k = p.exit_layer(t);
                correct += usize::from(p.predictions[k - 1] == y);
                layers += k as f64;
                flops += p.flops[k - 1] as f64;
            }
            ParetoPoint {
                threshold: t,
                accuracy: correct as f64 / n,
                mean_flops: flops / n,
                mean_exit_layer: layers / n,
                n_instances: inputs.len(),
            }
        })
        .collect();
    Ok(Sweep { points, profiles })
}

/// Points not dominated by a cheaper-or-equal, at-least-as-accurate point,
/// ordered by FLOPs.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.mean_flops.total_cmp(&b.mean_flops).then(b.accuracy.total_cmp(&a.accuracy)));
    let mut out: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|q| p.accuracy > q.accuracy) {
            out.push(p);
        }
    }
    out
}

pub const PARETO_HEADER: &str = "threshold,accuracy,mean_flops,mean_exit_layer,n_instances";

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut s = String::from(PARETO_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.threshold, p.accuracy, p.mean_flops, p.mean_exit_layer, p.n_instances
        ));
    }
    s
}

pub fn write_pareto_csv(path: &Path, points: &[ParetoPoint]) -> Result<()> {
    std::fs::write(path, pareto_csv(points)).map_err(|e| Error::io(path, e))
}

/// Indices of instances strictly shorter than the median length, and the
/// rest.
pub fn split_simple_instances(lengths: &[usize]) -> (Vec<usize>, Vec<usize>) {
    if lengths.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    (0..m).partition(|&i| (lengths[i] as f64) < median)
}
