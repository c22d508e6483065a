//! Distillation losses, both as plain values and as graph nodes.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {t} must be > 0")))
    }
}

/// Row-wise `softmax(z / t)`.
pub fn soft_targets(z: &Matrix, t: f64) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let scaled: Vec<f64> = z.row(r).iter().map(|v| v / t).collect();
        out.row_mut(r).copy_from_slice(&softmax(&scaled));
    }
    out
}

/// `Σ_layers mean_batch −Σ_c softmax(z_teacher/T)·log softmax(z_student/T)`.
pub fn pred_distill_loss(teacher: &[Matrix], student: &[Matrix], t: f64) -> Result<f64> {
    check_temperature(t)?;
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = 0.0;
    for (zt, zs) in teacher.iter().zip(student) {
        if zt.shape() != zs.shape() {
            return Err(Error::shape(
                "pred_distill_loss",
                format!("{:?} vs {:?}", zt.shape(), zs.shape()),
            ));
        }
        let p = soft_targets(zt, t);
        let mut layer = 0.0;
        for r in 0..zs.rows() {
            let s: Vec<f64> = zs.row(r).iter().map(|v| v / t).collect();
            let lse = log_sum_exp(&s);
            layer -= p.row(r).iter().zip(&s).map(|(pi, si)| pi * (si - lse)).sum::<f64>();
        }
        total += layer / zs.rows() as f64;
    }
    Ok(total)
}

/// `Σ_states MSE(H_teacher, H_student)`, each MSE a mean over all entries.
pub fn feat_distill_loss(teacher: &[Matrix], student: &[Matrix]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher states vs {} student states",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in teacher.iter().zip(student) {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "feat_distill_loss",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        total += a.sub(b).frobenius_sq() / a.len() as f64;
    }
    Ok(total)
}

/// Mean of the gradients of one layer's parameters with respect to each
/// downstream exit loss. `None` marks a gradient that was not computed.
pub fn gradient_equilibrium_rescale(per_exit: &[Option<Matrix>]) -> Result<Matrix> {
    let first = per_exit
        .first()
        .ok_or_else(|| Error::InvalidArgument("no exit gradients".into()))?;
    let shape = first
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("missing gradient from exit 0".into()))?
        .shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for (i, g) in per_exit.iter().enumerate() {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient from exit {i}")))?;
        if g.shape() != shape {
            return Err(Error::shape(
                "gradient_equilibrium_rescale",
                format!("{shape:?} vs {:?}", g.shape()),
            ));
        }
        acc.add_assign(g);
    }
    Ok(acc.scaled(1.0 / per_exit.len() as f64))
}

/// Graph node for one exit's soft cross-entropy against fixed teacher
/// logits at temperature `t`.
pub fn pred_node(g: &mut Graph<'_>, student: NodeId, teacher: &Matrix, t: f64) -> Result<NodeId> {
    check_temperature(t)?;
    let z = if t == 1.0 { student } else { g.scale(student, 1.0 / t) };
    g.soft_cross_entropy(z, soft_targets(teacher, t))
}

/// Graph node for cross-entropy against hard labels.
pub fn label_node(g: &mut Graph<'_>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let c = g.value(logits).cols();
    let mut targets = Matrix::zeros(labels.len(), c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} with {c} classes")));
        }
        targets[(r, y)] = 1.0;
    }
    g.soft_cross_entropy(logits, targets)
}
