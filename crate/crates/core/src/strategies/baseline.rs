use super::{Strategy, TaskContext};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{Model, ModelConfig};

/// Plain fine-tuning: every hook is the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoStrategy;

impl Strategy for NoStrategy {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(*self)
    }

    fn name(&self) -> &'static str {
        "none"
    }
}

/// Upper bound: task `k` trains a fresh model on the pooled data of tasks
/// `1..=k`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Joint;

impl Strategy for Joint {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(*self)
    }

    fn name(&self) -> &'static str {
        "joint"
    }

    fn fresh_model(&self) -> bool {
        true
    }

    fn before_task(
        &mut self,
        ctx: &TaskContext,
        model: &mut Model,
        train: &Dataset,
    ) -> Result<Option<Dataset>> {
        if ctx.history.is_empty() {
            return Ok(None);
        }
        let config = ModelConfig {
            num_classes: ctx.num_classes,
            ..model.config().clone()
        };
        *model = Model::new(config)?;
        let parts: Vec<Dataset> = ctx
            .history
            .iter()
            .chain(std::iter::once(train))
            .map(|d| d.clone().with_num_classes(ctx.num_classes))
            .collect::<Result<_>>()?;
        let refs: Vec<&Dataset> = parts.iter().collect();
        Dataset::concat(&refs).map(Some)
    }
}
