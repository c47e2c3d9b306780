use super::{pad_set, Batch, Strategy, StrategyParams, TaskContext};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, Model};
use crate::numerics::{Tape, Tensor, Var};

/// Path-integral importance state on flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SiState {
    /// Running `−Σ g·Δθ` for the current task.
    pub w: Vec<f64>,
    pub omega: Vec<f64>,
    /// Parameters at the end of the previous task (start of the current one).
    pub theta_prev: Vec<f64>,
    pub damp: f64,
    shapes: Vec<Vec<usize>>,
}

impl SiState {
    pub fn new(params: &[Tensor<f32>], damp: f64) -> Self {
        let theta_prev: Vec<f64> = params.iter().flat_map(|p| p.to_f64_vec()).collect();
        SiState {
            w: vec![0.0; theta_prev.len()],
            omega: vec![0.0; theta_prev.len()],
            theta_prev,
            damp,
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    fn split(&self, flat: &[f64]) -> Result<Vec<Tensor<f64>>> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut at = 0;
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            out.push(Tensor::new(shape.clone(), flat[at..at + n].to_vec())?);
            at += n;
        }
        Ok(out)
    }

    /// Grows to the model's current shapes. New entries get zero `w`/`Ω` and
    /// take their current value as starting point.
    pub fn pad_to(&mut self, params: &[Tensor<f32>]) -> Result<()> {
        let like: Vec<Tensor<f64>> = params.iter().map(Tensor::cast).collect();
        let join = |ts: Vec<Tensor<f64>>| {
            ts.into_iter()
                .flat_map(Tensor::into_data)
                .collect::<Vec<f64>>()
        };
        let w = join(pad_set(&self.split(&self.w)?, &like, false)?);
        let omega = join(pad_set(&self.split(&self.omega)?, &like, false)?);
        let theta_prev = join(pad_set(&self.split(&self.theta_prev)?, &like, true)?);
        self.w = w;
        self.omega = omega;
        self.theta_prev = theta_prev;
        self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
        Ok(())
    }
}

/// `w += −g ⊙ Δθ` for one optimizer step.
pub fn si_accumulate(state: &mut SiState, grad: &[f64], delta: &[f64]) -> Result<()> {
    if grad.len() != state.w.len() || delta.len() != state.w.len() {
        return Err(Error::Shape {
            op: "si_accumulate",
            left: vec![state.w.len()],
            right: vec![grad.len(), delta.len()],
        });
    }
    for ((w, g), d) in state.w.iter_mut().zip(grad).zip(delta) {
        *w -= g * d;
    }
    Ok(())
}

/// `Ω += max(w, 0) / ((θ_end − θ_prev)² + damp)`, then resets `w` and moves
/// the anchor to `θ_end`.
pub fn si_consolidate(state: &mut SiState, theta_end: &[f64]) -> Result<()> {
    if theta_end.len() != state.w.len() {
        return Err(Error::Shape {
            op: "si_consolidate",
            left: vec![state.w.len()],
            right: vec![theta_end.len()],
        });
    }
    for i in 0..theta_end.len() {
        let d = theta_end[i] - state.theta_prev[i];
        state.omega[i] += state.w[i].max(0.0) / (d * d + state.damp);
        state.w[i] = 0.0;
    }
    state.theta_prev = theta_end.to_vec();
    Ok(())
}

/// `c · Σ Ω (θ* − θ)²` with `θ*` the last consolidated parameters.
pub fn si_penalty(state: &SiState, theta: &[f64], c: f64) -> f64 {
    c * state
        .omega
        .iter()
        .zip(&state.theta_prev)
        .zip(theta)
        .map(|((o, a), t)| o * (a - t).powi(2))
        .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct Si {
    pub c: f64,
    pub damp: f64,
    state: Option<SiState>,
    consolidated: bool,
}

impl Si {
    pub fn new(c: f64, damp: f64) -> Self {
        Si {
            c,
            damp,
            state: None,
            consolidated: false,
        }
    }

    pub fn state(&self) -> Option<&SiState> {
        self.state.as_ref()
    }
}

impl Strategy for Si {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "si"
    }

    fn set_params(&mut self, params: &StrategyParams) {
        self.c = params.c;
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::Si)
    }

    fn before_task(
        &mut self,
        _ctx: &TaskContext,
        model: &mut Model,
        _train: &Dataset,
    ) -> Result<Option<Dataset>> {
        match &mut self.state {
            None => self.state = Some(SiState::new(model.params(), self.damp)),
            Some(s) => s.pad_to(model.params())?,
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
        let Some(state) = &self.state else {
            return Ok(base);
        };
        if self.c == 0.0 || !self.consolidated {
            return Ok(base);
        }
        let mut terms = vec![(base, 1.0)];
        let mut at = 0;
        for &p in &vars.params {
            let n = tape.value(p).len();
            let v = tape.weighted_sq_dist(
                p,
                state.theta_prev[at..at + n].to_vec(),
                state.omega[at..at + n].to_vec(),
            )?;
            terms.push((v, self.c));
            at += n;
        }
        tape.lin_comb(&terms)
    }

    fn tracks_steps(&self) -> bool {
        true
    }

    fn after_step(&mut self, grad: &[f32], delta: &[f32]) {
        if let Some(state) = &mut self.state {
            let g: Vec<f64> = grad.iter().map(|&v| v as f64).collect();
            let d: Vec<f64> = delta.iter().map(|&v| v as f64).collect();
            // lengths always match the padded model
            let _ = si_accumulate(state, &g, &d);
        }
    }

    fn after_task(&mut self, _ctx: &TaskContext, model: &Model, _train: &Dataset) -> Result<()> {
        let state = self
            .state
            .get_or_insert_with(|| SiState::new(model.params(), self.damp));
        si_consolidate(state, &model.flat_params())?;
        self.consolidated = true;
        Ok(())
    }
}
