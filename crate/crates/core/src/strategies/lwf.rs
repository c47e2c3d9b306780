use super::distill::mix_distill;
use super::{Batch, Strategy, TaskContext};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{ForwardVars, Model};
use crate::numerics::{Tape, Var};

/// Distills the previous model's old-class outputs into the current one.
#[derive(Clone, Debug)]
pub struct Lwf {
    pub temperature: f64,
    teacher: Option<Model>,
}

impl Lwf {
    pub fn new(temperature: f64) -> Self {
        Lwf {
            temperature,
            teacher: None,
        }
    }
}

impl Strategy for Lwf {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "lwf"
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::Lwf)
    }

    fn augment_loss(
        &mut self,
        ctx: &TaskContext,
        tape: &mut Tape,
        vars: &ForwardVars,
        batch: &Batch,
        base: Var,
    ) -> Result<Var> {
        let teacher = match &self.teacher {
            Some(t) if ctx.task_index >= 2 => t.logits(batch.x)?,
            _ => return Ok(base),
        };
        mix_distill(
            tape,
            vars.logits,
            base,
            Some(&teacher),
            ctx.old_classes,
            ctx.task_index,
            self.temperature,
        )
    }

    fn after_task(&mut self, _ctx: &TaskContext, model: &Model, _train: &Dataset) -> Result<()> {
        self.teacher = Some(model.clone());
        Ok(())
    }
}
