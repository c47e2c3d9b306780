use super::{pad_set, quadratic_penalty, Batch, Strategy, StrategyParams, TaskContext};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, Model};
use crate::numerics::{Tape, Tensor, Var};

/// Parameters and diagonal Fisher frozen at the end of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcAnchor {
    pub theta: Vec<Tensor<f32>>,
    pub fisher: Vec<Tensor<f32>>,
}

impl EwcAnchor {
    fn pad_to(&self, like: &[Tensor<f32>]) -> Result<EwcAnchor> {
        Ok(EwcAnchor {
            theta: pad_set(&self.theta, like, false)?,
            fisher: pad_set(&self.fisher, like, false)?,
        })
    }
}

/// Mean of squared per-sample gradients over at most `cap` of `n` samples,
/// taken at evenly strided indices.
pub fn empirical_fisher<F>(n: usize, cap: usize, mut grad_of: F) -> Result<Vec<Tensor<f32>>>
where
    F: FnMut(usize) -> Result<Vec<Tensor<f32>>>,
{
    if n == 0 {
        return Err(Error::Empty("Fisher estimation data".into()));
    }
    let k = n.min(cap.max(1));
    let mut acc: Option<Vec<Vec<f64>>> = None;
    let mut shapes = Vec::new();
    for s in 0..k {
        let grads = grad_of(s * n / k)?;
        let acc = acc.get_or_insert_with(|| {
            shapes = grads.iter().map(|g| g.shape().to_vec()).collect();
            grads.iter().map(|g| vec![0.0; g.len()]).collect()
        });
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (a, &v) in a.iter_mut().zip(g.data()) {
                *a += (v as f64).powi(2);
            }
        }
    }
    let acc = acc.unwrap_or_default();
    acc.into_iter()
        .zip(shapes)
        .map(|(a, shape)| {
            Tensor::new(
                shape,
                a.into_iter().map(|v| (v / k as f64) as f32).collect(),
            )
        })
        .collect()
}

/// Empirical diagonal Fisher of the unweighted log-likelihood, eval mode.
pub fn fisher_estimate(model: &Model, data: &Dataset, cap: usize) -> Result<Vec<Tensor<f32>>> {
    let ones = vec![1.0; model.num_classes()];
    empirical_fisher(data.len(), cap, |i| {
        let (x, y) = data.batch(&[i])?;
        let mut tape = Tape::new();
        let vars = model.forward_tape(&mut tape, &x, None)?;
        let loss = tape.softmax_xent(vars.logits, &y, &ones)?;
        let mut g = tape.backward(loss)?;
        Ok(vars.params.iter().map(|&p| g.take(p)).collect())
    })
}

/// `(λ/2) Σ F (θ − θ*)²` on flat vectors.
pub fn ewc_penalty(theta: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> f64 {
    0.5 * lambda
        * theta
            .iter()
            .zip(anchor)
            .zip(fisher)
            .map(|((t, a), f)| f * (t - a).powi(2))
            .sum::<f64>()
}

/// One quadratic anchor per completed task.
#[derive(Clone, Debug)]
pub struct Ewc {
    pub lambda: f64,
    pub fisher_cap: usize,
    anchors: Vec<EwcAnchor>,
}

impl Ewc {
    pub fn new(lambda: f64, fisher_cap: usize) -> Self {
        Ewc {
            lambda,
            fisher_cap,
            anchors: Vec::new(),
        }
    }

    pub fn anchors(&self) -> &[EwcAnchor] {
        &self.anchors
    }
}

impl Strategy for Ewc {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "ewc"
    }

    fn set_params(&mut self, params: &StrategyParams) {
        self.lambda = params.lambda;
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::Ewc)
    }

    fn before_task(
        &mut self,
        _ctx: &TaskContext,
        model: &mut Model,
        _train: &Dataset,
    ) -> Result<Option<Dataset>> {
        self.anchors = self
            .anchors
            .iter()
            .map(|a| a.pad_to(model.params()))
            .collect::<Result<_>>()?;
        Ok(None)
    }

    fn augment_loss(
        &mut self,
        _ctx: &TaskContext,
        tape: &mut Tape,
        vars: &ForwardVars,
        _batch: &Batch,
        base: Var,
    ) -> Result<Var> {
        if self.lambda == 0.0 || self.anchors.is_empty() {
            return Ok(base);
        }
        let mut terms = vec![(base, 1.0)];
        for a in &self.anchors {
            for v in quadratic_penalty(tape, &vars.params, &a.theta, &a.fisher)? {
                terms.push((v, 0.5 * self.lambda));
            }
        }
        tape.lin_comb(&terms)
    }

    fn after_task(&mut self, _ctx: &TaskContext, model: &Model, train: &Dataset) -> Result<()> {
        let fisher = fisher_estimate(model, train, self.fisher_cap)?;
        self.anchors.push(EwcAnchor {
            theta: model.params().to_vec(),
            fisher,
        });
        Ok(())
    }
}
