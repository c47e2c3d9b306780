use crate::numerics::tensor::Tensor;

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    theta: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = theta.clone();
    let mut out = Tensor::zeros(theta.shape());
    for i in 0..theta.len() {
        let x = theta.data()[i];
        probe.data_mut()[i] = x + h;
        let up = f(&probe);
        probe.data_mut()[i] = x - h;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Relative error used by the gradient gate: `|a−b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t.get(0).powi(2), &Tensor::scalar(3.0), 1e-4);
        assert!((g.get(0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_diff_grad(|t| t.get(0).sin(), &Tensor::scalar(0.0), 1e-4);
        assert!((g.get(0) - 1.0).abs() < 1e-8);
    }
}
