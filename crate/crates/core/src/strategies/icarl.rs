use super::distill::mix_distill;
use super::{Batch, Strategy, StrategyParams, TaskContext};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::Result;
use crate::memory::{
    budget_per_class, compute_class_means, ncm_classify, ClassMeanSet, ExemplarStore,
    SelectionPolicy,
};
use crate::model::{ForwardVars, Model};
use crate::numerics::{Tape, Tensor, Var};

#[allow(clippy::too_many_arguments)]
/// Task loss for iCaRL on one batch: class-weighted cross-entropy over all
/// current columns mixed with distillation on the old columns.
pub fn icarl_task_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: &[f64],
    teacher: Option<&Tensor<f32>>,
    old_classes: usize,
    task_index: usize,
    temperature: f64,
) -> Result<Var> {
    let base = tape.softmax_xent(logits, labels, class_weights)?;
    mix_distill(
        tape,
        logits,
        base,
        teacher,
        old_classes,
        task_index,
        temperature,
    )
}

/// Exemplar rehearsal, distillation and nearest-class-mean prediction.
#[derive(Clone, Debug)]
pub struct Icarl {
    pub budget: f64,
    pub temperature: f64,
    pub policy: SelectionPolicy,
    pub seed: u64,
    store: Option<ExemplarStore>,
    teacher: Option<Model>,
    means: Option<ClassMeanSet>,
}

impl Icarl {
    pub fn new(p: &StrategyParams) -> Self {
        Icarl {
            budget: p.budget,
            temperature: p.temperature,
            policy: p.policy,
            seed: p.seed,
            store: None,
            teacher: None,
            means: None,
        }
    }

    pub fn store(&self) -> Option<&ExemplarStore> {
        self.store.as_ref()
    }

    pub fn class_means(&self) -> Option<&ClassMeanSet> {
        self.means.as_ref()
    }
}

impl Strategy for Icarl {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "icarl"
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::Icarl)
    }

    fn before_task(
        &mut self,
        ctx: &TaskContext,
        _model: &mut Model,
        train: &Dataset,
    ) -> Result<Option<Dataset>> {
        let store = self.store.get_or_insert_with(|| {
            let budget = (self.budget * ctx.total_train as f64).floor() as usize;
            ExemplarStore::new(
                budget,
                self.policy,
                self.seed,
                train.timesteps(),
                train.features(),
            )
        });
        match store.to_dataset(ctx.num_classes)? {
            Some(ex) => {
                let train = train.clone().with_num_classes(ctx.num_classes)?;
                Dataset::concat(&[&train, &ex]).map(Some)
            }
            None => Ok(None),
        }
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

    fn after_task(&mut self, ctx: &TaskContext, model: &Model, train: &Dataset) -> Result<()> {
        let store = self.store.get_or_insert_with(|| {
            let budget = (self.budget * ctx.total_train as f64).floor() as usize;
            ExemplarStore::new(
                budget,
                self.policy,
                self.seed,
                train.timesteps(),
                train.features(),
            )
        });
        let m = budget_per_class(store.budget, ctx.num_classes);
        store.reduce_exemplars(m);
        for class in train.present_classes() {
            store.add_class(model, train, class, m)?;
        }
        self.means = Some(compute_class_means(store, model)?);
        self.teacher = Some(model.clone());
        Ok(())
    }

    fn predict(&self, model: &Model, x: &Tensor<f32>) -> Result<Option<Vec<usize>>> {
        let Some(means) = &self.means else {
            return Ok(None);
        };
        let feats = model.extract_features(x)?;
        Ok(Some(
            ncm_classify(&feats, means)?
                .into_iter()
                .map(usize::from)
                .collect(),
        ))
    }

    fn exemplar_bytes(&self) -> usize {
        self.store.as_ref().map_or(0, ExemplarStore::byte_size)
    }
}
