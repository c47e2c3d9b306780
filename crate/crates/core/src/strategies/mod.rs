//! Incremental-learning strategies behind one hook contract.
//!
//! The training loop in [`crate::protocol`] drives a `Box<dyn Strategy>`
//! through `before_task → (augment_loss → post_backward → after_step)* →
//! after_task`. Strategies are created by name from a [`Registry`], so new
//! methods plug in without touching the loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::costs::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::SelectionPolicy;
use crate::model::{ForwardVars, Model};
use crate::numerics::{Real, Tape, Tensor, Var};

mod baseline;
mod distill;
mod ewc;
mod gem;
mod icarl;
mod lwf;
mod online_ewc;
mod si;

pub use baseline::{Joint, NoStrategy};
pub use distill::{distill_loss, lwf_total_loss, lwf_weights, DISTILL_TEMPERATURE};
pub use ewc::{empirical_fisher, ewc_penalty, fisher_estimate, Ewc, EwcAnchor};
pub use gem::{gem_project, gem_reference_grads, Gem, GEM_MAX_ITERS, GEM_TOL};
pub use icarl::{icarl_task_loss, Icarl};
pub use lwf::Lwf;
pub use online_ewc::{online_ewc_merge, OnlineEwc};
pub use si::{si_accumulate, si_consolidate, si_penalty, Si, SiState};

/// Where the loop currently is in the task sequence.
#[derive(Clone, Copy, Debug)]
pub struct TaskContext<'a> {
    /// 1-based task index.
    pub task_index: usize,
    pub num_tasks: usize,
    /// Head columns that existed before this task.
    pub old_classes: usize,
    /// Head columns after this task's expansion.
    pub num_classes: usize,
    /// Training windows over the whole corpus (all tasks), the base for
    /// exemplar budgets.
    pub total_train: usize,
    pub seed: u64,
    /// Training sets of the tasks already completed, in order.
    pub history: &'a [Dataset],
}

/// A minibatch as seen by the loss hook.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

/// Per-method hyperparameters. Fields irrelevant to a method are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyParams {
    /// EWC / Online EWC penalty strength.
    pub lambda: f64,
    /// Online EWC Fisher decay.
    pub gamma: f64,
    /// SI penalty strength.
    pub c: f64,
    /// SI dampening added to the squared task displacement.
    pub si_damp: f64,
    /// Samples used per Fisher estimate.
    pub fisher_cap: usize,
    pub temperature: f64,
    /// Exemplar budget as a fraction of the total training corpus.
    pub budget: f64,
    pub policy: SelectionPolicy,
    pub seed: u64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        StrategyParams {
            lambda: 1000.0,
            gamma: 1.0,
            c: 0.6,
            si_damp: 0.1,
            fisher_cap: 1024,
            temperature: DISTILL_TEMPERATURE,
            budget: 0.2,
            policy: SelectionPolicy::Herding,
            seed: 0,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.c >= 0.0) {
            return bad(format!("c must be ≥ 0, got {}", self.c));
        }
        if !(self.si_damp >= 0.0) {
            return bad(format!("si_damp must be ≥ 0, got {}", self.si_damp));
        }
        if self.fisher_cap == 0 {
            return bad("fisher_cap must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(self.budget >= 0.0 && self.budget <= 1.0) {
            return bad(format!("budget must lie in [0, 1], got {}", self.budget));
        }
        Ok(())
    }

    /// Total exemplar samples for a corpus of `total_train` windows.
    pub fn budget_samples(&self, total_train: usize) -> usize {
        (self.budget * total_train as f64).floor() as usize
    }
}

/// Hook contract for one incremental-learning method. Every default is the
/// identity, so the None baseline implements nothing.
pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    fn box_clone(&self) -> Box<dyn Strategy>;

    /// Replaces the tunable method parameters, keeping consolidated state.
    fn set_params(&mut self, _params: &StrategyParams) {}

    /// Storage formula this method is accounted under, if any.
    fn storage_method(&self) -> Option<Method> {
        None
    }

    /// Runs after the head has been expanded for the task. May swap the model
    /// or return a replacement training set.
    fn before_task(
        &mut self,
        _ctx: &TaskContext,
        _model: &mut Model,
        _train: &Dataset,
    ) -> Result<Option<Dataset>> {
        Ok(None)
    }

    /// Adds method terms to the base loss.
    fn augment_loss(
        &mut self,
        _ctx: &TaskContext,
        _tape: &mut Tape,
        _vars: &ForwardVars,
        _batch: &Batch,
        base: Var,
    ) -> Result<Var> {
        Ok(base)
    }

    /// Rewrites the flattened gradient before the optimizer step.
    fn post_backward(
        &mut self,
        _ctx: &TaskContext,
        _model: &Model,
        _grad: &mut [f32],
    ) -> Result<()> {
        Ok(())
    }

    /// Whether [`Strategy::after_step`] wants the per-step displacement.
    fn tracks_steps(&self) -> bool {
        false
    }

    /// Called after each optimizer step with the applied gradient and the
    /// parameter displacement, both flattened.
    fn after_step(&mut self, _grad: &[f32], _delta: &[f32]) {}

    /// Consolidation once the task's epochs are done.
    fn after_task(&mut self, _ctx: &TaskContext, _model: &Model, _train: &Dataset) -> Result<()> {
        Ok(())
    }

    /// Class predictions when the method does not use argmax over logits.
    fn predict(&self, _model: &Model, _x: &Tensor<f32>) -> Result<Option<Vec<usize>>> {
        Ok(None)
    }

    /// True when each task trains a freshly initialized model.
    fn fresh_model(&self) -> bool {
        false
    }

    /// Bytes of stored samples (exemplars or episodic memories).
    fn exemplar_bytes(&self) -> usize {
        0
    }
}

pub type Constructor = fn(&StrategyParams) -> Result<Box<dyn Strategy>>;

/// Name → constructor table.
#[derive(Clone)]
pub struct Registry {
    entries: BTreeMap<String, Constructor>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with every built-in method.
    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        r.register("none", |_| Ok(Box::new(NoStrategy)));
        r.register("joint", |_| Ok(Box::new(Joint)));
        r.register("ewc", |p| Ok(Box::new(Ewc::new(p.lambda, p.fisher_cap))));
        r.register("online_ewc", |p| {
            Ok(Box::new(OnlineEwc::new(p.lambda, p.gamma, p.fisher_cap)))
        });
        r.register("si", |p| Ok(Box::new(Si::new(p.c, p.si_damp))));
        r.register("lwf", |p| Ok(Box::new(Lwf::new(p.temperature))));
        r.register("icarl", |p| Ok(Box::new(Icarl::new(p))));
        r.register("gem", |p| Ok(Box::new(Gem::new(p.budget, p.seed))));
        r
    }

    /// Adds or replaces `name`.
    pub fn register(&mut self, name: &str, ctor: Constructor) {
        self.entries.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn create(&self, name: &str, params: &StrategyParams) -> Result<Box<dyn Strategy>> {
        params.validate()?;
        let ctor = self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "strategy",
            name: name.to_string(),
        })?;
        ctor(params)
    }
}

impl Clone for Box<dyn Strategy> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}

/// Concatenates tensors into one `f64` vector.
pub fn flatten(params: &[Tensor<f32>]) -> Vec<f64> {
    params.iter().flat_map(|p| p.to_f64_vec()).collect()
}

/// Grows each tensor of `set` to the shape of the matching entry in `like`.
/// New entries are copied from `like` when `fill_from_like` is set, zero otherwise.
pub(crate) fn pad_set<S: Real>(
    set: &[Tensor<S>],
    like: &[Tensor<S>],
    fill_from_like: bool,
) -> Result<Vec<Tensor<S>>> {
    if set.len() != like.len() {
        return Err(Error::contract(format!(
            "parameter set has {} tensors, model has {}",
            set.len(),
            like.len()
        )));
    }
    set.iter()
        .zip(like)
        .map(|(s, l)| {
            if s.shape() == l.shape() {
                return Ok(s.clone());
            }
            let padded = s.pad_to(l.shape())?;
            if !fill_from_like {
                return Ok(padded);
            }
            // keep `s` where it existed, take `l` elsewhere
            let marker = Tensor::<S>::filled(s.shape(), 1.0).pad_to(l.shape())?;
            let data = padded
                .data()
                .iter()
                .zip(l.data())
                .zip(marker.data())
                .map(|((&p, &x), &m)| if m.to_f64() == 1.0 { p } else { x })
                .collect();
            Tensor::new(l.shape().to_vec(), data)
        })
        .collect()
}

/// `Σ_p weight[p]·(θ[p] − anchor[p])²` over every parameter tensor, recorded on the tape.
pub(crate) fn quadratic_penalty(
    tape: &mut Tape,
    params: &[Var],
    anchor: &[Tensor<f32>],
    weight: &[Tensor<f32>],
) -> Result<Vec<Var>> {
    params
        .iter()
        .zip(anchor.iter().zip(weight))
        .map(|(&p, (a, w))| tape.weighted_sq_dist(p, a.to_f64_vec(), w.to_f64_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_builtins() {
        let r = Registry::builtin();
        for name in [
            "none",
            "joint",
            "ewc",
            "online_ewc",
            "si",
            "lwf",
            "icarl",
            "gem",
        ] {
            let s = r.create(name, &StrategyParams::default()).unwrap();
            assert_eq!(s.name(), name);
        }
        assert!(matches!(
            r.create("mas", &StrategyParams::default()),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn custom_registration() {
        let mut r = Registry::empty();
        r.register("plain", |_| Ok(Box::new(NoStrategy)));
        assert_eq!(r.names(), vec!["plain"]);
        assert!(r.create("plain", &StrategyParams::default()).is_ok());
    }

    #[test]
    fn params_validation() {
        let bad = StrategyParams {
            gamma: 0.0,
            ..StrategyParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = StrategyParams {
            budget: 1.5,
            ..StrategyParams::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            StrategyParams {
                budget: 0.05,
                ..StrategyParams::default()
            }
            .budget_samples(600),
            30
        );
    }

    #[test]
    fn pad_set_fills() {
        let small = vec![Tensor::<f32>::from_f64s(&[2], &[1.0, 2.0]).unwrap()];
        let like = vec![Tensor::<f32>::from_f64s(&[3], &[7.0, 8.0, 9.0]).unwrap()];
        assert_eq!(
            pad_set(&small, &like, false).unwrap()[0].data(),
            &[1.0, 2.0, 0.0]
        );
        assert_eq!(
            pad_set(&small, &like, true).unwrap()[0].data(),
            &[1.0, 2.0, 9.0]
        );
    }
}
