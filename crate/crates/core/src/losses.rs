//! Feature-distillation objectives.
//!
//! `cos_loss` aligns each sample's feature vector (rows), `space_loss` aligns
//! each feature dimension across the batch (columns). Both return the gradient
//! with respect to the student features only; the teacher is a constant.

use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, Matrix, Result};

/// Norm below which a row/column is treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub cos_component: f64,
    pub space_component: f64,
    /// Weight on the cosine term; 1 except for the space-only ablation.
    pub cos_weight: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_student: Matrix,
    /// Rows (or columns) whose norm fell below [`NORM_EPS`].
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossOutput {
    pub value: LossValue,
    pub grad_student: Matrix,
    pub degenerate: usize,
}

fn check_shapes(op: &'static str, teacher: &Matrix, student: &Matrix) -> Result<()> {
    if teacher.shape() != student.shape() || teacher.rows() == 0 || teacher.cols() == 0 {
        return Err(KernelError::Shape {
            op,
            left: teacher.shape_str(),
            right: student.shape_str(),
        });
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - mean_i cos(teacher_i, student_i)` over rows, with gradient w.r.t. student rows.
fn row_cosine_loss(teacher: &Matrix, student: &Matrix) -> LossOutput {
    let (n, d) = student.shape();
    let mut grad = Matrix::zeros(n, d);
    let mut cos_sum = 0.0;
    let mut degenerate = 0;
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let t = teacher.row(i);
        let s = student.row(i);
        let (nt, ns) = (norm(t), norm(s));
        if nt < NORM_EPS || ns < NORM_EPS {
            degenerate += 1;
            continue;
        }
        let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
        let c = dot / (nt * ns);
        cos_sum += c;
        // d cos / d s = t / (|t||s|) - cos * s / |s|^2
        for ((g, &tv), &sv) in grad.row_mut(i).iter_mut().zip(t).zip(s) {
            *g = -scale * (tv / (nt * ns) - c * sv / (ns * ns));
        }
    }
    LossOutput {
        value: 1.0 - scale * cos_sum,
        grad_student: grad,
        degenerate,
    }
}

/// Instance-level cosine loss over the `B` rows of `B x d` feature matrices.
pub fn cos_loss(f_teacher: &Matrix, f_student: &Matrix) -> Result<LossOutput> {
    check_shapes("cos_loss", f_teacher, f_student)?;
    Ok(row_cosine_loss(f_teacher, f_student))
}

/// Space-similarity loss: the cosine loss over the `d` columns (feature
/// dimensions) of `B x d` feature matrices.
pub fn space_loss(f_teacher: &Matrix, f_student: &Matrix) -> Result<LossOutput> {
    check_shapes("space_loss", f_teacher, f_student)?;
    let out = row_cosine_loss(&f_teacher.transpose(), &f_student.transpose());
    Ok(LossOutput {
        value: out.value,
        grad_student: out.grad_student.transpose(),
        degenerate: out.degenerate,
    })
}

/// `cos_weight * L_cos + lambda * L_space` with the matching student gradient.
pub fn weighted_loss(
    f_teacher: &Matrix,
    f_student: &Matrix,
    cos_weight: f64,
    lambda: f64,
) -> Result<TotalLossOutput> {
    if !(lambda >= 0.0 && cos_weight >= 0.0) {
        return Err(KernelError::Invalid(format!(
            "loss weights must be >= 0, got cos_weight={cos_weight} lambda={lambda}"
        )));
    }
    let c = cos_loss(f_teacher, f_student)?;
    let s = space_loss(f_teacher, f_student)?;
    let mut grad = c.grad_student;
    for (g, gs) in grad.data_mut().iter_mut().zip(s.grad_student.data()) {
        *g = cos_weight * *g + lambda * gs;
    }
    Ok(TotalLossOutput {
        value: LossValue {
            total: cos_weight * c.value + lambda * s.value,
            cos_component: c.value,
            space_component: s.value,
            cos_weight,
            lambda,
        },
        grad_student: grad,
        degenerate: c.degenerate + s.degenerate,
    })
}

/// `L_cos + lambda * L_space`.
pub fn total_loss(f_teacher: &Matrix, f_student: &Matrix, lambda: f64) -> Result<TotalLossOutput> {
    weighted_loss(f_teacher, f_student, 1.0, lambda)
}
