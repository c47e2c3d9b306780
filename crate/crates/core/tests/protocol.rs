use std::time::Instant;

use driftbench::data::{make_scenario, normalize, synth_generate, Dataset, Scenario, SynthSpec};
use driftbench::model::{Model, ModelConfig};
use driftbench::protocol::*;
use driftbench::strategies::{
    fisher_estimate, NoStrategy, Registry, Strategy, StrategyParams, TaskContext,
};

fn small_tasks(seed: u64) -> TaskSequence {
    let spec = SynthSpec {
        timesteps: 8,
        features: 4,
        train_per_class: 24,
        test_per_class: 10,
        seed,
        ..SynthSpec::default()
    };
    let (tr, te) = synth_generate(&spec).unwrap();
    let (tr, te, _) = normalize(&tr, &te).unwrap();
    let split = make_scenario(&[0, 1, 2, 3, 4, 5], Scenario::Halves, seed).unwrap();
    TaskSequence::build(&tr, &te, &split).unwrap()
}

const ARCH: Arch = Arch {
    layers: 1,
    hidden: 8,
};

fn run(
    tasks: &TaskSequence,
    name: &str,
    params: StrategyParams,
    epochs: usize,
) -> (RunResult, Model) {
    let reg = Registry::builtin();
    let exp = Experiment::new(tasks, &reg, name, epochs, 3);
    let s1 = stage_one_point(&exp, ARCH, &params).unwrap();
    stage_two_point(&exp, &s1, &GridPoint { lr: 1e-3, params }).unwrap()
}

fn ctx1(n: usize) -> TaskContext<'static> {
    TaskContext {
        task_index: 1,
        num_tasks: 1,
        old_classes: 0,
        num_classes: n,
        total_train: 0,
        seed: 0,
        history: &[],
    }
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let tasks = small_tasks(0);
    let t = &tasks.tasks[0];
    let mut model = Model::new(ModelConfig::new(1, 8, 8, 4, 3, 1)).unwrap();
    let before = model.clone();
    let mut s: Box<dyn Strategy> = Box::new(NoStrategy);
    let out = train_one_task(
        &mut model,
        &mut s,
        &ctx1(3),
        &t.train,
        &TrainOptions::new(0, 1e-3, 0),
        None,
        false,
    )
    .unwrap();
    assert_eq!(model, before);
    assert!(out.epoch_losses.is_empty());
}

#[test]
fn loss_falls_on_separable_data() {
    let tasks = small_tasks(1);
    let t = &tasks.tasks[0];
    let mut model = Model::new(ModelConfig::new(1, 8, 8, 4, 3, 1)).unwrap();
    let mut s: Box<dyn Strategy> = Box::new(NoStrategy);
    let out = train_one_task(
        &mut model,
        &mut s,
        &ctx1(3),
        &t.train,
        &TrainOptions::new(6, 1e-3, 0),
        None,
        false,
    )
    .unwrap();
    assert!(out.epoch_losses.last().unwrap() <= out.epoch_losses.first().unwrap());
}

#[test]
fn identity_strategies_match_plain_training() {
    let tasks = small_tasks(2);
    let (_, none) = run(&tasks, "none", StrategyParams::default(), 3);
    let (_, ewc) = run(
        &tasks,
        "ewc",
        StrategyParams {
            lambda: 0.0,
            ..Default::default()
        },
        3,
    );
    let (_, si) = run(
        &tasks,
        "si",
        StrategyParams {
            c: 0.0,
            ..Default::default()
        },
        3,
    );
    assert_eq!(none.params(), ewc.params());
    assert_eq!(none.params(), si.params());
    let (_, strong) = run(
        &tasks,
        "ewc",
        StrategyParams {
            lambda: 1e4,
            ..Default::default()
        },
        3,
    );
    assert_ne!(none.params(), strong.params());
}

#[test]
fn union_score_equals_pooled_predictions() {
    let tasks = small_tasks(3);
    let (_, model) = run(&tasks, "none", StrategyParams::default(), 2);
    let s = NoStrategy;
    let pooled = tasks.pooled_test(2).unwrap();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for t in &tasks.tasks {
        let test = t.test.clone().with_num_classes(6).unwrap();
        preds.extend(predict(&model, Some(&s), &test).unwrap());
        labels.extend(test.labels().iter().map(|&y| y as usize));
    }
    let want = weighted_f1(&preds, &labels).unwrap();
    assert!((evaluate(&model, &s, &pooled).unwrap() - want).abs() < 1e-12);
}

#[test]
fn unseen_test_class_is_an_error() {
    let tasks = small_tasks(4);
    let model = Model::new(ModelConfig::new(1, 8, 8, 4, 3, 1)).unwrap();
    assert!(evaluate(&model, &NoStrategy, &tasks.tasks[1].test).is_err());
}

#[test]
fn singleton_grid_is_one_run() {
    let tasks = small_tasks(5);
    let reg = Registry::builtin();
    let exp = Experiment::new(&tasks, &reg, "lwf", 2, 3);
    let params = StrategyParams::default();
    let search = two_stage_search(&exp, &SearchGrid::single(ARCH, 1e-3, params.clone())).unwrap();
    let (direct, _) = run(&tasks, "lwf", params, 2);
    assert_eq!(search.runs.len(), 1);
    assert_eq!(search.runs[0].matrix, direct.matrix);
    assert_eq!(search.runs[0].union_scores, direct.union_scores);
}

#[test]
fn stage_one_snapshot_is_shared() {
    let tasks = small_tasks(6);
    let reg = Registry::builtin();
    let exp = Experiment::new(&tasks, &reg, "ewc", 2, 3);
    let grid = SearchGrid {
        arch: vec![
            ARCH,
            Arch {
                layers: 1,
                hidden: 4,
            },
        ],
        lr: vec![1e-3, 1e-4],
        il: vec![
            StrategyParams {
                lambda: 1.0,
                ..Default::default()
            },
            StrategyParams {
                lambda: 100.0,
                ..Default::default()
            },
        ],
    };
    let r = two_stage_search(&exp, &grid).unwrap();
    assert_eq!(r.stage_one.len(), 2);
    assert_eq!(r.runs.len(), 4);
    let first = r.runs[0].matrix.get(1, 1).unwrap();
    assert!(r
        .runs
        .iter()
        .all(|run| run.matrix.get(1, 1).unwrap() == first));
    let best = r.runs[r.winner].final_score();
    assert!(r.runs.iter().all(|run| run.final_score() <= best));
    let q1 = r.stage_one.iter().map(|s| s.q1).fold(0.0, f64::max);
    assert_eq!(
        r.stage_one.iter().find(|s| s.arch == r.arch).unwrap().q1,
        q1
    );
}

#[test]
fn winner_survives_rescaling() {
    let tasks = small_tasks(7);
    let (mut a, _) = run(&tasks, "none", StrategyParams::default(), 1);
    let mut b = a.clone();
    let mut c = a.clone();
    a.union_scores = vec![0.5, 0.2];
    b.union_scores = vec![0.5, 0.6];
    c.union_scores = vec![0.5, 0.4];
    let runs = vec![a, b, c];
    let w = select_winner(&runs).unwrap();
    let scaled: Vec<RunResult> = runs
        .iter()
        .cloned()
        .map(|mut r| {
            r.union_scores.iter_mut().for_each(|q| *q *= 0.5);
            r
        })
        .collect();
    assert_eq!(w, 1);
    assert_eq!(select_winner(&scaled).unwrap(), w);
}

#[test]
fn joint_first_task_equals_stage_one() {
    let tasks = small_tasks(8);
    let reg = Registry::builtin();
    let exp = Experiment::new(&tasks, &reg, "none", 3, 3);
    let s1 = stage_one_point(&exp, ARCH, &StrategyParams::default()).unwrap();
    let joint = joint_baseline(&exp, &[ARCH]).unwrap();
    assert_eq!(joint.len(), 2);
    assert_eq!(joint[0].a_star, s1.q1);
    assert_eq!(joint[0].best_epoch, s1.outcome.best_epoch);
    assert!(joint.iter().all(|j| (0.0..=1.0).contains(&j.a_star)));
}

#[test]
fn pooling_identical_tasks_keeps_every_copy() {
    let tasks = small_tasks(9);
    let pooled = tasks.pooled_train(2).unwrap();
    assert_eq!(pooled.len(), tasks.total_train());
    let t1 = &tasks.tasks[0].train;
    let doubled = Dataset::concat(&[t1, t1]).unwrap();
    assert_eq!(doubled.len(), 2 * t1.len());
}

#[test]
fn runs_are_deterministic() {
    let tasks = small_tasks(10);
    let (a, _) = run(&tasks, "icarl", StrategyParams::default(), 2);
    let (b, _) = run(&tasks, "icarl", StrategyParams::default(), 2);
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.union_scores, b.union_scores);
    assert_eq!(a.exemplar_bytes, b.exemplar_bytes);
}

#[test]
fn icarl_storage_is_model_plus_exemplars() {
    let tasks = small_tasks(11);
    let (r, _) = run(&tasks, "icarl", StrategyParams::default(), 1);
    let m = (r.param_count * 4) as f64;
    assert!(r.exemplar_bytes > 0);
    assert_eq!(r.storage_bytes.unwrap(), m + r.exemplar_bytes as f64);
    let (none, _) = run(&tasks, "none", StrategyParams::default(), 1);
    assert_eq!(none.storage_bytes, None);
}

#[test]
fn timing_parts_cover_wall_clock() {
    let tasks = small_tasks(12);
    let (r, _) = run(&tasks, "ewc", StrategyParams::default(), 2);
    for t in r.timings() {
        let parts = t.train_time + t.il_time + t.eval_time;
        assert!((parts - t.wall_time).abs() <= 0.02 * t.wall_time + 1e-6);
        assert!(t.il_time > 0.0);
    }
}

#[test]
fn fisher_time_scales_with_cap() {
    let spec = SynthSpec {
        timesteps: 8,
        features: 4,
        train_per_class: 100,
        ..SynthSpec::default()
    };
    let (tr, _) = synth_generate(&spec).unwrap();
    let model = Model::new(ModelConfig::new(1, 16, 8, 4, 6, 0)).unwrap();
    let time = |cap: usize| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                fisher_estimate(&model, &tr, cap).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let ratio = time(256) / time(128);
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}
