use super::{
    ewc::fisher_estimate, pad_set, quadratic_penalty, Batch, Strategy, StrategyParams, TaskContext,
};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, Model};
use crate::numerics::{Tape, Tensor, Var};

/// `γ·F_run + F_new`, elementwise. `F_run` is zero-padded to `F_new`'s shapes.
pub fn online_ewc_merge(
    running: Option<&[Tensor<f32>]>,
    new: &[Tensor<f32>],
    gamma: f64,
) -> Result<Vec<Tensor<f32>>> {
    let Some(running) = running else {
        return Ok(new.to_vec());
    };
    let running = pad_set(running, new, false)?;
    running
        .iter()
        .zip(new)
        .map(|(r, n)| {
            if r.shape() != n.shape() {
                return Err(Error::Shape {
                    op: "online_ewc_merge",
                    left: r.shape().to_vec(),
                    right: n.shape().to_vec(),
                });
            }
            let data = r
                .data()
                .iter()
                .zip(n.data())
                .map(|(&r, &n)| (gamma * r as f64 + n as f64) as f32)
                .collect();
            Tensor::new(n.shape().to_vec(), data)
        })
        .collect()
}

/// Single running Fisher and anchor, decayed by `gamma` each task.
#[derive(Clone, Debug)]
pub struct OnlineEwc {
    pub lambda: f64,
    pub gamma: f64,
    pub fisher_cap: usize,
    theta: Option<Vec<Tensor<f32>>>,
    fisher: Option<Vec<Tensor<f32>>>,
}

impl OnlineEwc {
    pub fn new(lambda: f64, gamma: f64, fisher_cap: usize) -> Self {
        OnlineEwc {
            lambda,
            gamma,
            fisher_cap,
            theta: None,
            fisher: None,
        }
    }

    pub fn running_fisher(&self) -> Option<&[Tensor<f32>]> {
        self.fisher.as_deref()
    }
}

impl Strategy for OnlineEwc {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "online_ewc"
    }

    fn set_params(&mut self, params: &StrategyParams) {
        self.lambda = params.lambda;
        self.gamma = params.gamma;
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::OnlineEwc)
    }

    fn before_task(
        &mut self,
        _ctx: &TaskContext,
        model: &mut Model,
        _train: &Dataset,
    ) -> Result<Option<Dataset>> {
        if let (Some(t), Some(f)) = (&self.theta, &self.fisher) {
            self.theta = Some(pad_set(t, model.params(), false)?);
            self.fisher = Some(pad_set(f, model.params(), false)?);
        }
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
        let (Some(theta), Some(fisher)) = (&self.theta, &self.fisher) else {
            return Ok(base);
        };
        if self.lambda == 0.0 {
            return Ok(base);
        }
        let mut terms = vec![(base, 1.0)];
        for v in quadratic_penalty(tape, &vars.params, theta, fisher)? {
            terms.push((v, 0.5 * self.lambda));
        }
        tape.lin_comb(&terms)
    }

    fn after_task(&mut self, _ctx: &TaskContext, model: &Model, train: &Dataset) -> Result<()> {
        let new = fisher_estimate(model, train, self.fisher_cap)?;
        self.fisher = Some(online_ewc_merge(self.fisher.as_deref(), &new, self.gamma)?);
        self.theta = Some(model.params().to_vec());
        Ok(())
    }
}
