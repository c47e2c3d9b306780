use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam optimizer state for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<S: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Real> AdamState<S> {
    pub fn new(params: &[Tensor<S>], lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let zeros: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(AdamState {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len(), self.first.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.require_same_shape(g, "adam_step")?;
            p.require_same_shape(m, "adam_step")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = gi.to_f64();
                let m_new = self.beta1 * mi.to_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * vi.to_f64() + (1.0 - self.beta2) * g * g;
                *mi = S::from_f64(m_new);
                *vi = S::from_f64(v_new);
                let update = self.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                if update != 0.0 {
                    *pi = S::from_f64(pi.to_f64() - update);
                }
            }
        }
        Ok(())
    }
}
