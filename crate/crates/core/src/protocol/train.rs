use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::weighted_f1;
use crate::costs::TaskTiming;
use crate::data::{class_weights, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamState, Tape, Tensor};
use crate::strategies::{Batch, Strategy, TaskContext};

pub const BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 20;
pub const TASK1_LR: f64 = 1e-3;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainOptions {
            epochs,
            lr,
            batch_size: BATCH_SIZE,
            seed,
        }
    }
}

/// What one task's training produced.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TaskOutcome {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Score on the evaluation set after each epoch (argmax path).
    pub epoch_scores: Vec<f64>,
    /// 1-based epoch whose snapshot was kept, when snapshotting.
    pub best_epoch: Option<usize>,
    pub timing: TaskTiming,
}

/// Stream id for the per-task training generator.
fn task_rng(seed: u64, task_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_index as u64);
    rng
}

/// Seed for the head columns added at `task_index`.
pub fn head_seed(seed: u64, task_index: usize) -> u64 {
    seed ^ (task_index as u64).wrapping_mul(0xA076_1D64_78BD_642F)
}

/// Trains one task: `before_task`, `epochs` passes of minibatch Adam with
/// the strategy hooks, then `after_task`.
///
/// With `eval` given, the argmax score is recorded after every epoch. With
/// `keep_best` also set, the model and strategy state from the best-scoring
/// epoch replace the final ones before `after_task`.
pub fn train_one_task(
    model: &mut Model,
    strategy: &mut Box<dyn Strategy>,
    ctx: &TaskContext,
    train: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Dataset>,
    keep_best: bool,
) -> Result<TaskOutcome> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if keep_best && eval.is_none() {
        return Err(Error::contract(
            "best-epoch snapshot needs an evaluation set",
        ));
    }
    let wall = Instant::now();
    let mut il = 0.0;
    let mut eval_time = 0.0;

    let t0 = Instant::now();
    let replaced = strategy.before_task(ctx, model, train)?;
    il += t0.elapsed().as_secs_f64();
    let data = replaced.as_ref().unwrap_or(train);
    if data.is_empty() {
        return Err(Error::Empty("task training set".into()));
    }
    let ncls = model.num_classes();
    if let Some(&bad) = data.labels().iter().find(|&&y| y as usize >= ncls) {
        return Err(Error::Index {
            what: "training label",
            index: bad as usize,
            len: ncls,
        });
    }
    let labels: Vec<usize> = data.labels().iter().map(|&y| y as usize).collect();
    let weights = class_weights(&labels, ncls);

    let mut rng = task_rng(opts.seed, ctx.task_index);
    let mut adam = AdamState::new(model.params(), opts.lr)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut outcome = TaskOutcome::default();
    let mut best: Option<(f64, Model, Box<dyn Strategy>)> = None;
    let tracks = strategy.tracks_steps();

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let vars = model.forward_tape(&mut tape, &x, Some(&mut rng))?;
            let base = tape.softmax_xent(vars.logits, &y, &weights)?;

            let t = Instant::now();
            let loss =
                strategy.augment_loss(ctx, &mut tape, &vars, &Batch { x: &x, labels: &y }, base)?;
            il += t.elapsed().as_secs_f64();

            loss_sum += tape.scalar(loss) * chunk.len() as f64;
            let g = tape.backward(loss)?;
            let mut flat: Vec<f32> = vars
                .params
                .iter()
                .flat_map(|&p| g.wrt(p).into_data())
                .collect();

            let t = Instant::now();
            strategy.post_backward(ctx, model, &mut flat)?;
            il += t.elapsed().as_secs_f64();

            let grads = unflatten(&flat, model.params())?;
            let before = tracks.then(|| flat_f32(model.params()));
            adam.step(model.params_mut(), &grads)?;
            if let Some(before) = before {
                let t = Instant::now();
                let after = flat_f32(model.params());
                let delta: Vec<f32> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
                strategy.after_step(&flat, &delta);
                il += t.elapsed().as_secs_f64();
            }
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        outcome.epoch_losses.push(mean_loss);

        if let Some(test) = eval {
            let t = Instant::now();
            let q = evaluate_argmax(model, test)?;
            outcome.epoch_scores.push(q);
            if keep_best && best.as_ref().is_none_or(|(b, _, _)| q > *b) {
                best = Some((q, model.clone(), strategy.clone()));
                outcome.best_epoch = Some(epoch);
            }
            eval_time += t.elapsed().as_secs_f64();
        }
    }
    if let Some((_, m, s)) = best {
        *model = m;
        *strategy = s;
    }

    let t = Instant::now();
    strategy.after_task(ctx, model, train)?;
    il += t.elapsed().as_secs_f64();

    let wall_time = wall.elapsed().as_secs_f64();
    outcome.timing = TaskTiming {
        train_time: (wall_time - il - eval_time).max(0.0),
        il_time: il,
        eval_time,
        wall_time,
    };
    Ok(outcome)
}

fn flat_f32(params: &[Tensor<f32>]) -> Vec<f32> {
    params
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect()
}

fn unflatten(flat: &[f32], like: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut at = 0;
    like.iter()
        .map(|p| {
            let n = p.len();
            let t = Tensor::new(p.shape().to_vec(), flat[at..at + n].to_vec());
            at += n;
            t
        })
        .collect()
}

fn check_seen(model: &Model, data: &Dataset) -> Result<()> {
    let n = model.num_classes();
    match data.labels().iter().find(|&&y| y as usize >= n) {
        Some(&bad) => Err(Error::Index {
            what: "test class not yet learned",
            index: bad as usize,
            len: n,
        }),
        None => Ok(()),
    }
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predictions by argmax over eval-mode logits, or through the strategy's
/// own rule when it has one.
pub fn predict(
    model: &Model,
    strategy: Option<&dyn Strategy>,
    data: &Dataset,
) -> Result<Vec<usize>> {
    check_seen(model, data)?;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        match strategy
            .map(|s| s.predict(model, &x))
            .transpose()?
            .flatten()
        {
            Some(p) => out.extend(p),
            None => out.extend(argmax_rows(&model.logits(&x)?)),
        }
    }
    Ok(out)
}

/// Weighted F1 of the model (NCM for iCaRL) on `data`.
pub fn evaluate(model: &Model, strategy: &dyn Strategy, data: &Dataset) -> Result<f64> {
    let labels: Vec<usize> = data.labels().iter().map(|&y| y as usize).collect();
    weighted_f1(&predict(model, Some(strategy), data)?, &labels)
}

/// Weighted F1 through argmax logits regardless of strategy.
pub fn evaluate_argmax(model: &Model, data: &Dataset) -> Result<f64> {
    let labels: Vec<usize> = data.labels().iter().map(|&y| y as usize).collect();
    weighted_f1(&predict(model, None, data)?, &labels)
}
