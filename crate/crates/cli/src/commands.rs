//! Subcommand implementations. Each returns what it wrote so tests can
//! inspect results without reparsing files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use driftbench::data::{save_dataset, synth_generate, NormStats, SynthSpec};
use driftbench::model::Model;
use driftbench::protocol::{
    joint_baseline, select_stage_one, stage_one_point, stage_two_point, Experiment, JointScore,
    RunResult, SearchGrid, StageOne,
};
use driftbench::strategies::Registry;

use crate::config::{config_err, seed_override, RunConfig};
use crate::report::{
    summarize, summary_csv, summary_text, RunReport, MATRIX_FILE, REPORT_FILE, SCHEMA_VERSION,
};
use crate::{Format, RunArgs};

pub const TRAIN_FILE: &str = "train.dbds";
pub const TEST_FILE: &str = "test.dbds";
pub const STATS_FILE: &str = "stats.json";
pub const MODEL_FILE: &str = "model.dbmd";
pub const LEADERBOARD_FILE: &str = "leaderboard.json";
pub const JOINT_FILE: &str = "joint.json";

/// Refuses to replace any of `files` inside `dir` unless `force`.
fn prepare_out(dir: &Path, files: &[&str], force: bool) -> anyhow::Result<()> {
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(config_err(format!(
                "{} exists; pass --force to overwrite",
                f.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require_out(out: &Option<PathBuf>) -> anyhow::Result<&Path> {
    out.as_deref()
        .ok_or_else(|| config_err("--out is required"))
}

/// Sidecar written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub schema_version: u32,
    pub spec: SynthSpec,
    pub train_windows: usize,
    pub test_windows: usize,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    /// Per-feature statistics of the training split.
    pub train_stats: NormStats,
}

pub fn cmd_synth(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    force: bool,
    dry_run: bool,
) -> anyhow::Result<Option<SynthStats>> {
    let mut spec = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| config_err(format!("invalid synth spec: {e}")))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed_override(seed)? {
        spec.seed = s;
    }
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    if dry_run {
        return Ok(None);
    }
    prepare_out(out, &[TRAIN_FILE, TEST_FILE, STATS_FILE], force)?;
    let (train, test) = synth_generate(&spec)?;
    save_dataset(&train, &out.join(TRAIN_FILE))?;
    save_dataset(&test, &out.join(TEST_FILE))?;
    let stats = SynthStats {
        schema_version: SCHEMA_VERSION,
        spec,
        train_windows: train.len(),
        test_windows: test.len(),
        train_class_counts: train.class_counts(),
        test_class_counts: test.class_counts(),
        train_stats: NormStats::fit(&train),
    };
    write_json(&out.join(STATS_FILE), &stats)?;
    Ok(Some(stats))
}

/// Loads, seeds and validates a run configuration.
pub fn load_config(args: &RunArgs, registry: &Registry) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.resolve_seed(args.seed)?;
    cfg.validate(registry)?;
    for p in [&cfg.data.train, &cfg.data.test].into_iter().flatten() {
        if !p.is_file() {
            return Err(config_err(format!("dataset {} not found", p.display())));
        }
    }
    if args.jobs == 0 {
        return Err(config_err("--jobs must be at least 1"));
    }
    Ok(cfg)
}

fn pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn save_model(model: &Model, path: &Path) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    model.write_checkpoint(BufWriter::new(f))?;
    Ok(())
}

fn write_run(dir: &Path, report: &RunReport, model: &Model) -> anyhow::Result<()> {
    write_json(&dir.join(REPORT_FILE), report)?;
    let mut csv = Vec::new();
    report.matrix.write_csv(&mut csv)?;
    std::fs::write(dir.join(MATRIX_FILE), csv)?;
    save_model(model, &dir.join(MODEL_FILE))
}

/// One configuration: the grid collapses to a single architecture and point.
pub fn cmd_run(args: &RunArgs) -> anyhow::Result<Option<RunReport>> {
    let registry = Registry::builtin();
    let cfg = load_config(args, &registry)?;
    let tasks = cfg.build_tasks()?;
    if tasks.len() < 2 {
        return Err(config_err("the scenario produced fewer than two tasks"));
    }
    if args.dry_run {
        return Ok(None);
    }
    let out = require_out(&args.out)?;
    prepare_out(out, &[REPORT_FILE, MATRIX_FILE, MODEL_FILE], args.force)?;

    let exp = Experiment::new(&tasks, &registry, &cfg.strategy, cfg.epochs, cfg.seed);
    let grid = SearchGrid::single(cfg.arch(), cfg.lr, cfg.params.clone());
    let s1 = stage_one_point(&exp, cfg.arch(), &grid.il[0])?;
    let summary = vec![s1.summary()];
    let (run, model) = stage_two_point(&exp, &s1, &grid.points()[0])?;
    let joint = if cfg.joint {
        Some(joint_baseline(&exp, &[cfg.arch()])?)
    } else {
        None
    };
    let report = RunReport::build(&cfg, &tasks, summary, &run, joint)?;
    write_run(out, &report, &model)?;
    Ok(Some(report))
}

/// Search output: the winning report plus every stage-2 run, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub schema_version: u32,
    pub strategy: String,
    pub scenario: u8,
    pub seed: u64,
    pub jobs: usize,
    pub rows: Vec<RunReport>,
}

/// Descending final `q_k`, ties broken by the serialized grid point.
pub fn rank(rows: &mut [RunReport]) {
    let key = |r: &RunReport| serde_json::to_string(&r.point).expect("grid points serialize");
    rows.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then_with(|| key(a).cmp(&key(b)))
    });
}

pub fn cmd_search(args: &RunArgs) -> anyhow::Result<Option<Leaderboard>> {
    let registry = Registry::builtin();
    let cfg = load_config(args, &registry)?;
    let tasks = cfg.build_tasks()?;
    if tasks.len() < 2 {
        return Err(config_err("the scenario produced fewer than two tasks"));
    }
    if args.dry_run {
        return Ok(None);
    }
    let out = require_out(&args.out)?;
    prepare_out(
        out,
        &[REPORT_FILE, MATRIX_FILE, MODEL_FILE, LEADERBOARD_FILE],
        args.force,
    )?;

    let grid = cfg.search_grid();
    let exp = Experiment::new(&tasks, &registry, &cfg.strategy, cfg.epochs, cfg.seed);
    let pool = pool(args.jobs)?;

    let stage_one: Vec<StageOne> = pool.install(|| {
        grid.arch
            .par_iter()
            .map(|&a| stage_one_point(&exp, a, &grid.il[0]))
            .collect::<driftbench::Result<Vec<_>>>()
    })?;
    let summaries = stage_one.iter().map(StageOne::summary).collect::<Vec<_>>();
    let s1 = select_stage_one(stage_one)?;

    // Strategies are Send but not Sync, so each point gets its own copy.
    let jobs: Vec<_> = grid.points().into_iter().map(|p| (s1.clone(), p)).collect();
    let runs: Vec<(RunResult, Model)> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(s, p)| stage_two_point(&exp, &s, &p))
            .collect::<driftbench::Result<Vec<_>>>()
    })?;

    let joint = if cfg.joint {
        Some(joint_baseline(&exp, &grid.arch)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(runs.len());
    let mut models = Vec::with_capacity(runs.len());
    for (run, model) in &runs {
        let r = RunReport::build(&cfg, &tasks, summaries.clone(), run, joint.clone())?;
        models.push((serde_json::to_string(&r.point)?, model));
        rows.push(r);
    }
    rank(&mut rows);
    let winner = &rows[0];
    let key = serde_json::to_string(&winner.point)?;
    let model = models
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, m)| *m)
        .expect("winner has a model");
    write_run(out, winner, model)?;
    let board = Leaderboard {
        schema_version: SCHEMA_VERSION,
        strategy: cfg.strategy.clone(),
        scenario: cfg.scenario,
        seed: cfg.seed,
        jobs: args.jobs,
        rows,
    };
    write_json(&out.join(LEADERBOARD_FILE), &board)?;
    Ok(Some(board))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub scores: Vec<JointScore>,
}

pub fn cmd_joint(args: &RunArgs) -> anyhow::Result<Option<JointReport>> {
    let registry = Registry::builtin();
    let cfg = load_config(args, &registry)?;
    let tasks = cfg.build_tasks()?;
    if args.dry_run {
        return Ok(None);
    }
    let out = require_out(&args.out)?;
    prepare_out(out, &[JOINT_FILE], args.force)?;
    let exp = Experiment::new(&tasks, &registry, &cfg.strategy, cfg.epochs, cfg.seed);
    let grid = cfg.search_grid();
    let report = JointReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        scores: joint_baseline(&exp, &grid.arch)?,
    };
    write_json(&out.join(JOINT_FILE), &report)?;
    Ok(Some(report))
}

pub fn cmd_report(dirs: &[PathBuf], format: Format) -> anyhow::Result<String> {
    let reports = dirs
        .iter()
        .map(|d| RunReport::load(d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let rows = summarize(&reports)?;
    Ok(match format {
        Format::Csv => summary_csv(&rows),
        Format::Text => summary_text(&rows),
    })
}
