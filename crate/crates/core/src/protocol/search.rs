//! Two-stage selection: architecture on task 1, then learning rate and
//! method parameters over tasks 2..k from the task-1 winner.

use serde::{Deserialize, Serialize};

use super::metrics::AccuracyMatrix;
use super::tasks::TaskSequence;
use super::train::{
    evaluate, head_seed, train_one_task, TaskOutcome, TrainOptions, BATCH_SIZE, TASK1_LR,
};
use crate::costs::{model_bytes, storage_bytes, TaskTiming};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, HIDDEN_GRID, LAYER_GRID};
use crate::strategies::{NoStrategy, Registry, Strategy, StrategyParams, TaskContext};

pub const LR_GRID: [f64; 2] = [1e-3, 1e-4];
pub const LAMBDA_GRID: [f64; 7] = [1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6];
pub const GAMMA_GRID: [f64; 2] = [0.5, 1.0];
pub const C_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub hidden: usize,
}

/// Every `L × S` pair of the architectural grid.
pub fn arch_grid() -> Vec<Arch> {
    LAYER_GRID
        .iter()
        .flat_map(|&layers| {
            HIDDEN_GRID
                .iter()
                .map(move |&hidden| Arch { layers, hidden })
        })
        .collect()
}

/// Method-specific parameter points, each a copy of `base` with the swept
/// fields replaced. Methods without tunable parameters get `[base]`.
pub fn il_grid(strategy: &str, base: &StrategyParams) -> Vec<StrategyParams> {
    match strategy {
        "ewc" => LAMBDA_GRID
            .iter()
            .map(|&lambda| StrategyParams {
                lambda,
                ..base.clone()
            })
            .collect(),
        "online_ewc" => LAMBDA_GRID
            .iter()
            .flat_map(|&lambda| {
                GAMMA_GRID.iter().map(move |&gamma| StrategyParams {
                    lambda,
                    gamma,
                    ..base.clone()
                })
            })
            .collect(),
        "si" => C_GRID
            .iter()
            .map(|&c| StrategyParams { c, ..base.clone() })
            .collect(),
        _ => vec![base.clone()],
    }
}

/// One stage-2 configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub params: StrategyParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub arch: Vec<Arch>,
    pub lr: Vec<f64>,
    pub il: Vec<StrategyParams>,
}

impl SearchGrid {
    /// The full grid for `strategy`.
    pub fn standard(strategy: &str, base: &StrategyParams) -> Self {
        SearchGrid {
            arch: arch_grid(),
            lr: LR_GRID.to_vec(),
            il: il_grid(strategy, base),
        }
    }

    /// A single point: the search degenerates to one run.
    pub fn single(arch: Arch, lr: f64, params: StrategyParams) -> Self {
        SearchGrid {
            arch: vec![arch],
            lr: vec![lr],
            il: vec![params],
        }
    }

    /// Stage-2 points, method parameters outermost.
    pub fn points(&self) -> Vec<GridPoint> {
        self.il
            .iter()
            .flat_map(|p| {
                self.lr.iter().map(move |&lr| GridPoint {
                    lr,
                    params: p.clone(),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.is_empty() || self.lr.is_empty() || self.il.is_empty() {
            return Err(Error::Config("search grid has an empty axis".into()));
        }
        if let Some(lr) = self.lr.iter().find(|lr| !(**lr > 0.0)) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for p in &self.il {
            p.validate()?;
        }
        Ok(())
    }
}

/// Shared inputs of every run in an experiment.
#[derive(Clone, Copy)]
pub struct Experiment<'a> {
    pub tasks: &'a TaskSequence,
    pub registry: &'a Registry,
    pub strategy: &'a str,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<'a> Experiment<'a> {
    pub fn new(
        tasks: &'a TaskSequence,
        registry: &'a Registry,
        strategy: &'a str,
        epochs: usize,
        seed: u64,
    ) -> Self {
        Experiment {
            tasks,
            registry,
            strategy,
            epochs,
            batch_size: BATCH_SIZE,
            seed,
        }
    }

    fn opts(&self, lr: f64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    fn context(&self, k: usize, history: &'a [crate::data::Dataset]) -> TaskContext<'a> {
        TaskContext {
            task_index: k,
            num_tasks: self.tasks.len(),
            old_classes: if k > 1 {
                self.tasks.columns_through(k - 1)
            } else {
                0
            },
            num_classes: self.tasks.columns_through(k),
            total_train: self.tasks.total_train(),
            seed: self.seed,
            history,
        }
    }

    fn model_config(&self, arch: Arch, num_classes: usize) -> ModelConfig {
        let t = &self.tasks.tasks[0].train;
        ModelConfig::new(
            arch.layers,
            arch.hidden,
            t.timesteps(),
            t.features(),
            num_classes,
            self.seed,
        )
    }
}

/// Task-1 result for one architecture, keeping the best-epoch snapshot.
#[derive(Clone)]
pub struct StageOne {
    pub arch: Arch,
    /// Best task-1 test score over epochs.
    pub q1: f64,
    pub outcome: TaskOutcome,
    pub model: Model,
    pub strategy: Box<dyn Strategy>,
}

/// Serializable summary of a stage-1 point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneSummary {
    pub arch: Arch,
    pub q1: f64,
    pub best_epoch: Option<usize>,
    pub epoch_scores: Vec<f64>,
}

impl StageOne {
    pub fn summary(&self) -> StageOneSummary {
        StageOneSummary {
            arch: self.arch,
            q1: self.q1,
            best_epoch: self.outcome.best_epoch,
            epoch_scores: self.outcome.epoch_scores.clone(),
        }
    }
}

fn require_tasks(exp: &Experiment, min: usize) -> Result<()> {
    if exp.tasks.len() < min {
        return Err(Error::Config(format!(
            "need at least {min} tasks, got {}",
            exp.tasks.len()
        )));
    }
    Ok(())
}

/// Trains task 1 with architecture `arch`, keeping the epoch with the best
/// task-1 test score.
pub fn stage_one_point(exp: &Experiment, arch: Arch, params: &StrategyParams) -> Result<StageOne> {
    require_tasks(exp, 1)?;
    let task = &exp.tasks.tasks[0];
    let mut model = Model::new(exp.model_config(arch, exp.tasks.columns_through(1)))?;
    let mut strategy = exp.registry.create(exp.strategy, params)?;
    let ctx = exp.context(1, &[]);
    let outcome = train_one_task(
        &mut model,
        &mut strategy,
        &ctx,
        &task.train,
        &exp.opts(TASK1_LR),
        Some(&task.test),
        true,
    )?;
    let q1 = outcome.epoch_scores.iter().copied().fold(0.0, f64::max);
    Ok(StageOne {
        arch,
        q1,
        outcome,
        model,
        strategy,
    })
}

/// Highest `q1`; ties keep grid order.
pub fn select_stage_one(points: Vec<StageOne>) -> Result<StageOne> {
    let mut best: Option<StageOne> = None;
    for p in points {
        if best.as_ref().is_none_or(|b| p.q1 > b.q1) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::Config("empty architecture grid".into()))
}

/// One complete run from the stage-1 winner through the last task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: Arch,
    pub point: GridPoint,
    pub matrix: AccuracyMatrix,
    /// Union-test score `q_j` after each task.
    pub union_scores: Vec<f64>,
    pub outcomes: Vec<TaskOutcome>,
    pub param_count: usize,
    pub exemplar_bytes: usize,
    /// Storage formula applied to the final model, when the method has one.
    pub storage_bytes: Option<f64>,
}

impl RunResult {
    /// Final `q_k`.
    pub fn final_score(&self) -> f64 {
        self.union_scores.last().copied().unwrap_or(0.0)
    }

    pub fn timings(&self) -> Vec<TaskTiming> {
        self.outcomes.iter().map(|o| o.timing).collect()
    }
}

/// Continues from the stage-1 snapshot over tasks `2..=k` with `point`.
/// Returns the run record and the final model.
pub fn stage_two_point(
    exp: &Experiment,
    s1: &StageOne,
    point: &GridPoint,
) -> Result<(RunResult, Model)> {
    require_tasks(exp, 1)?;
    point.params.validate()?;
    let tasks = exp.tasks;
    let mut model = s1.model.clone();
    let mut strategy = s1.strategy.clone();
    strategy.set_params(&point.params);

    let mut matrix = AccuracyMatrix::new();
    let first = evaluate(&model, strategy.as_ref(), &tasks.tasks[0].test)?;
    matrix.push_row(vec![first])?;
    let mut union_scores = vec![first];
    let mut outcomes = vec![s1.outcome.clone()];
    let mut history = vec![tasks.tasks[0].train.clone()];

    for k in 2..=tasks.len() {
        let task = &tasks.tasks[k - 1];
        model.expand_head(task.classes.len(), head_seed(exp.seed, k))?;
        let union = tasks.pooled_test(k)?;
        let ctx = exp.context(k, &history);
        let outcome = train_one_task(
            &mut model,
            &mut strategy,
            &ctx,
            &task.train,
            &exp.opts(point.lr),
            Some(&union),
            false,
        )?;
        let row = (1..=k)
            .map(|j| evaluate(&model, strategy.as_ref(), &tasks.tasks[j - 1].test))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
        union_scores.push(evaluate(&model, strategy.as_ref(), &union)?);
        outcomes.push(outcome);
        history.push(task.train.clone());
    }

    let param_count = model.param_count();
    let exemplar_bytes = strategy.exemplar_bytes();
    let storage = strategy
        .storage_method()
        .map(|m| {
            storage_bytes(
                m,
                model_bytes(param_count) as f64,
                tasks.len(),
                exemplar_bytes as f64,
            )
        })
        .transpose()?;
    Ok((
        RunResult {
            arch: s1.arch,
            point: point.clone(),
            matrix,
            union_scores,
            outcomes,
            param_count,
            exemplar_bytes,
            storage_bytes: storage,
        },
        model,
    ))
}

/// Index of the highest final `q_k`; ties keep grid order.
pub fn select_winner(runs: &[RunResult]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if best.is_none_or(|b| r.final_score() > runs[b].final_score()) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Config("empty stage-2 grid".into()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub stage_one: Vec<StageOneSummary>,
    pub arch: Arch,
    pub runs: Vec<RunResult>,
    pub winner: usize,
}

/// Both stages, sequentially. Stage 1 trains with the first method-parameter
/// point; method parameters only act from task 2 on.
pub fn two_stage_search(exp: &Experiment, grid: &SearchGrid) -> Result<SearchResult> {
    grid.validate()?;
    require_tasks(exp, 2)?;
    let points = grid
        .arch
        .iter()
        .map(|&a| stage_one_point(exp, a, &grid.il[0]))
        .collect::<Result<Vec<_>>>()?;
    let stage_one = points.iter().map(StageOne::summary).collect();
    let s1 = select_stage_one(points)?;
    let runs = grid
        .points()
        .iter()
        .map(|p| stage_two_point(exp, &s1, p).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let winner = select_winner(&runs)?;
    Ok(SearchResult {
        stage_one,
        arch: s1.arch,
        runs,
        winner,
    })
}

/// Joint reference for the first `k` tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointScore {
    pub k: usize,
    pub arch: Arch,
    pub a_star: f64,
    pub best_epoch: Option<usize>,
}

/// Fresh model on the pooled data of tasks `1..=k`, scored on the pooled
/// test set at its best epoch.
pub fn joint_point(exp: &Experiment, k: usize, arch: Arch) -> Result<JointScore> {
    let train = exp.tasks.pooled_train(k)?;
    let test = exp.tasks.pooled_test(k)?;
    let mut model = Model::new(exp.model_config(arch, exp.tasks.columns_through(k)))?;
    let mut strategy: Box<dyn Strategy> = Box::new(NoStrategy);
    let ctx = TaskContext {
        task_index: 1,
        num_tasks: 1,
        old_classes: 0,
        num_classes: exp.tasks.columns_through(k),
        total_train: train.len(),
        seed: exp.seed,
        history: &[],
    };
    let out = train_one_task(
        &mut model,
        &mut strategy,
        &ctx,
        &train,
        &exp.opts(TASK1_LR),
        Some(&test),
        true,
    )?;
    Ok(JointScore {
        k,
        arch,
        a_star: out.epoch_scores.iter().copied().fold(0.0, f64::max),
        best_epoch: out.best_epoch,
    })
}

/// `a*_k` for every `k`, each the best over `arch` (ties keep grid order).
pub fn joint_baseline(exp: &Experiment, arch: &[Arch]) -> Result<Vec<JointScore>> {
    if arch.is_empty() {
        return Err(Error::Config("empty architecture grid".into()));
    }
    (1..=exp.tasks.len())
        .map(|k| {
            let mut best: Option<JointScore> = None;
            for &a in arch {
                let s = joint_point(exp, k, a)?;
                if best.as_ref().is_none_or(|b| s.a_star > b.a_star) {
                    best = Some(s);
                }
            }
            Ok(best.expect("non-empty grid"))
        })
        .collect()
}
