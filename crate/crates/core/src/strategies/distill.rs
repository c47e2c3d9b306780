//! Knowledge distillation shared by LwF and iCaRL.

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tape, Tensor, Var, LOG_CLAMP};

pub const DISTILL_TEMPERATURE: f64 = 2.0;

/// `(T²/B) Σ_i Σ_j −q_ij log p_ij` with `q = softmax(teacher/T)`,
/// `p = softmax(student/T)`, both row-major `[B×cols]`.
pub fn distill_loss(
    student: &[f64],
    teacher: &[f64],
    cols: usize,
    temperature: f64,
) -> Result<f64> {
    if cols == 0 || student.len() != teacher.len() || !student.len().is_multiple_of(cols) {
        return Err(Error::Shape {
            op: "distill_loss",
            left: vec![student.len()],
            right: vec![teacher.len(), cols],
        });
    }
    let rows = student.len() / cols;
    if rows == 0 {
        return Err(Error::Empty("distillation batch".into()));
    }
    let scale = |v: &[f64]| v.iter().map(|x| x / temperature).collect::<Vec<_>>();
    let p = softmax_rows(&scale(student), cols);
    let q = softmax_rows(&scale(teacher), cols);
    let ce: f64 = q
        .iter()
        .zip(&p)
        .map(|(q, p)| -q * p.max(LOG_CLAMP).ln())
        .sum();
    Ok(ce * temperature * temperature / rows as f64)
}

/// Mixing weights `(1/j, 1 − 1/j)` for new-task and distillation terms at task `j`.
pub fn lwf_weights(task_index: usize) -> (f64, f64) {
    let j = task_index.max(1) as f64;
    (1.0 / j, 1.0 - 1.0 / j)
}

/// `(1/j)·new + (1 − 1/j)·distill`.
pub fn lwf_total_loss(new_loss: f64, distill: f64, task_index: usize) -> f64 {
    let (a, b) = lwf_weights(task_index);
    a * new_loss + b * distill
}

/// Records the distillation term against `teacher` on columns `0..old`
/// and mixes it with `base`. Task 1 (or no old columns) returns `base`.
pub(crate) fn mix_distill(
    tape: &mut Tape,
    logits: Var,
    base: Var,
    teacher: Option<&Tensor<f32>>,
    old: usize,
    task_index: usize,
    temperature: f64,
) -> Result<Var> {
    let Some(teacher) = teacher else {
        return Ok(base);
    };
    if task_index < 2 || old == 0 {
        return Ok(base);
    }
    let cols: Vec<usize> = (0..old).collect();
    let d = tape.distill(logits, teacher, &cols, temperature)?;
    let (a, b) = lwf_weights(task_index);
    tape.lin_comb(&[(base, a), (d, b)])
}
