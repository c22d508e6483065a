use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every leaf entry.
    pub max_relative_error: f64,
    pub worst_leaf: usize,
    pub worst_entry: usize,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives one trainable leaf per matrix in `point` and must return
/// a scalar loss node. It is called once for the analytic pass and twice per
/// leaf entry for the numeric pass.
pub fn grad_check<F>(build: F, point: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }

    let evaluate = |values: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|m| g.param(m)).collect();
        let loss = build(&mut g, &leaves)?;
        g.check_finite()?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = point.iter().map(|m| g.param(m)).collect();
    let loss = build(&mut g, &leaves)?;
    g.check_finite()?;
    g.backward(loss)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| g.take_grad(l)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_leaf: 0,
        worst_entry: 0,
        entries_checked: 0,
    };
    let mut probe: Vec<Matrix> = point.to_vec();
    for (leaf, grad) in analytic.iter().enumerate() {
        for entry in 0..grad.len() {
            let original = probe[leaf].as_slice()[entry];
            probe[leaf].as_mut_slice()[entry] = original + step;
            let plus = evaluate(&probe)?;
            probe[leaf].as_mut_slice()[entry] = original - step;
            let minus = evaluate(&probe)?;
            probe[leaf].as_mut_slice()[entry] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.as_slice()[entry] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_leaf = leaf;
                report.worst_entry = entry;
            }
        }
    }
    Ok(report)
}
