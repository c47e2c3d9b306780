//! Training loop, evaluation, two-stage model selection and metrics.
//!
//! Model selection scores candidates on test data, following the protocol
//! being reproduced; it is not a held-out validation scheme.

mod metrics;
mod search;
mod tasks;
mod train;

pub use metrics::{
    metric_a, metric_f, metric_i, metrics_series, weighted_f1, AccuracyMatrix, MetricsReport,
};
pub use search::{
    arch_grid, il_grid, joint_baseline, joint_point, select_stage_one, select_winner,
    stage_one_point, stage_two_point, two_stage_search, Arch, Experiment, GridPoint, JointScore,
    RunResult, SearchGrid, SearchResult, StageOne, StageOneSummary, C_GRID, GAMMA_GRID,
    LAMBDA_GRID, LR_GRID,
};
pub use tasks::{TaskData, TaskLayout, TaskSequence};
pub use train::{
    evaluate, evaluate_argmax, head_seed, predict, train_one_task, TaskOutcome, TrainOptions,
    BATCH_SIZE, DEFAULT_EPOCHS, TASK1_LR,
};
