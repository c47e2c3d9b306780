use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use driftbench::costs::{storage_bytes, Method};
use driftbench::data::load_dataset;
use driftbench_cli::commands::{cmd_report, cmd_run, cmd_search, cmd_synth, rank};
use driftbench_cli::report::{summarize, RunReport};
use driftbench_cli::{Format, RunArgs};

const BIN: &str = env!("CARGO_BIN_EXE_driftbench");

const TINY: &str = r#"
scenario = 2
epochs = 2
hidden = 8

[data.synth]
timesteps = 8
features = 3
train_per_class = 12
test_per_class = 6
"#;

fn write_config(dir: &Path, strategy: &str, extra: &str) -> PathBuf {
    let p = dir.join(format!("{strategy}.toml"));
    std::fs::write(&p, format!("strategy = \"{strategy}\"\n{TINY}\n{extra}")).unwrap();
    p
}

fn args(config: PathBuf, out: PathBuf) -> RunArgs {
    RunArgs {
        config,
        out: Some(out),
        jobs: 1,
        ..Default::default()
    }
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn status(args: &[&str]) -> i32 {
    Command::new(BIN)
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn synth_round_trips_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stats = cmd_synth(None, Some(4), &a, false, false).unwrap().unwrap();
    cmd_synth(None, Some(4), &b, false, false).unwrap();
    let train = load_dataset(&a.join("train.dbds")).unwrap();
    assert_eq!(train.len(), stats.train_windows);
    assert_eq!(
        load_dataset(&a.join("test.dbds")).unwrap().len(),
        stats.test_windows
    );
    for f in ["train.dbds", "test.dbds", "stats.json"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "n_classes = 1\n").unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        status(&[
            "synth",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
    assert!(!out.exists());

    let unknown = tmp.path().join("u.toml");
    std::fs::write(
        &unknown,
        format!("strategy = \"ewc\"\n{TINY}\nwhatever = 3\n"),
    )
    .unwrap();
    assert_eq!(
        status(&["run", "--config", unknown.to_str().unwrap(), "--dry-run"]),
        2
    );

    let missing = tmp.path().join("m.toml");
    std::fs::write(
        &missing,
        "strategy = \"ewc\"\nscenario = 2\n[data]\ntrain = \"nope.dbds\"\ntest = \"nope.dbds\"\n",
    )
    .unwrap();
    assert_eq!(
        status(&["run", "--config", missing.to_str().unwrap(), "--dry-run"]),
        2
    );

    let cfg = write_config(tmp.path(), "none", "");
    assert_eq!(
        status(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"]),
        0
    );
    assert_eq!(
        status(&["run", "--config", cfg.to_str().unwrap(), "--seed", "x"]),
        2
    );
}

#[test]
fn dry_run_writes_nothing_and_reruns_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "none", "");
    let out = tmp.path().join("run");
    let mut a = args(cfg, out.clone());
    a.dry_run = true;
    assert!(cmd_run(&a).unwrap().is_none());
    assert!(!out.exists());
    a.dry_run = false;
    cmd_run(&a).unwrap();
    let err = cmd_run(&a).unwrap_err();
    assert_eq!(driftbench_cli::exit_code(&err), 2);
    a.force = true;
    cmd_run(&a).unwrap();
}

#[test]
fn forgetting_shows_in_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("none.toml");
    std::fs::write(&cfg, "strategy = \"none\"\nscenario = 2\nepochs = 10\nhidden = 16\njoint = false\n[data.synth]\ntrain_per_class = 40\ntest_per_class = 10\n").unwrap();
    let r = cmd_run(&args(cfg, tmp.path().join("r"))).unwrap().unwrap();
    let drop = r.matrix.get(1, 1).unwrap() - r.matrix.get(2, 1).unwrap();
    assert!(drop > 0.3, "a[1][1] − a[2][1] = {drop}");
    assert!(r.joint.is_none() && r.metrics[1].i.is_none());
}

#[test]
fn icarl_storage_is_model_plus_exemplars() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "icarl", "[params]\nbudget = 0.2\n");
    let r = cmd_run(&args(cfg, tmp.path().join("r"))).unwrap().unwrap();
    let s = r.storage.unwrap();
    assert!(s.exemplar_bytes > 0);
    let want = storage_bytes(
        Method::Icarl,
        s.model_bytes as f64,
        s.tasks,
        s.exemplar_bytes as f64,
    )
    .unwrap();
    assert_eq!(s.total_bytes, want);
    assert_eq!(s.total_bytes, (s.model_bytes + s.exemplar_bytes) as f64);
    assert_eq!(s.model_bytes % 4, 0);
}

fn strip_timing(r: &RunReport) -> serde_json::Value {
    let mut v = serde_json::to_value(r).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn singleton_search_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[grid]\nlayers = [1]\nhidden = [8]\nlr = [0.001]\nlambda = [1000.0]\n";
    let cfg = write_config(tmp.path(), "ewc", extra);
    let run = cmd_run(&args(cfg.clone(), tmp.path().join("run")))
        .unwrap()
        .unwrap();
    let board = cmd_search(&args(cfg, tmp.path().join("search")))
        .unwrap()
        .unwrap();
    assert_eq!(board.rows.len(), 1);
    assert_eq!(strip_timing(&board.rows[0]), strip_timing(&run));
}

#[test]
fn leaderboard_is_a_sorted_permutation_of_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[grid]\nlayers = [1]\nhidden = [4, 8]\nlr = [0.001, 0.0001]\nc = [0.2, 1.0]\n";
    let cfg = write_config(tmp.path(), "si", extra);
    let mut a = args(cfg, tmp.path().join("s1"));
    let board = cmd_search(&a).unwrap().unwrap();
    assert_eq!(board.rows.len(), 4);
    let mut seen: Vec<(u64, u64)> = board
        .rows
        .iter()
        .map(|r| (r.point.lr.to_bits(), r.point.params.c.to_bits()))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 4);
    let best = board
        .rows
        .iter()
        .map(|r| r.final_score)
        .fold(f64::MIN, f64::max);
    assert_eq!(board.rows[0].final_score, best);
    assert!(board
        .rows
        .windows(2)
        .all(|w| w[0].final_score >= w[1].final_score));
    assert_eq!(board.rows[0].stage_one.len(), 2);
    let winner = RunReport::load(&tmp.path().join("s1")).unwrap();
    assert_eq!(strip_timing(&winner), strip_timing(&board.rows[0]));

    // Parallel execution gives the same leaderboard.
    a.out = Some(tmp.path().join("s2"));
    a.jobs = 3;
    let par = cmd_search(&a).unwrap().unwrap();
    let strip = |rows: &[RunReport]| rows.iter().map(strip_timing).collect::<Vec<_>>();
    assert_eq!(strip(&par.rows), strip(&board.rows));

    let mut shuffled = board.rows.clone();
    shuffled.reverse();
    rank(&mut shuffled);
    assert_eq!(strip(&shuffled), strip(&board.rows));
}

#[test]
fn report_aggregates_and_rejects_mixed_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lwf", "");
    let mut dirs = Vec::new();
    for seed in 0..3u64 {
        let d = tmp.path().join(format!("lwf{seed}"));
        let mut a = args(cfg.clone(), d.clone());
        a.seed = Some(seed);
        cmd_run(&a).unwrap();
        dirs.push(d);
    }
    let one = RunReport::load(&dirs[0]).unwrap();
    let rows = summarize(std::slice::from_ref(&one)).unwrap();
    let m = one.final_metrics().unwrap();
    assert_eq!(rows[0].a.unwrap().mean, m.a);
    assert_eq!(rows[0].f.unwrap().mean, m.f.unwrap());
    assert_eq!(rows[0].i.unwrap().mean, m.i.unwrap());

    let all: Vec<RunReport> = dirs.iter().map(|d| RunReport::load(d).unwrap()).collect();
    let rows = summarize(&all).unwrap();
    assert_eq!(rows[0].runs, 3);
    let a: Vec<f64> = all.iter().map(|r| r.final_metrics().unwrap().a).collect();
    let mean = a.iter().sum::<f64>() / 3.0;
    let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((rows[0].a.unwrap().se - sd / 3f64.sqrt()).abs() < 1e-12);
    let csv = cmd_report(&dirs, Format::Csv).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(cmd_report(&dirs, Format::Text).unwrap().contains("lwf"));

    let s3 = tmp.path().join("s3.toml");
    std::fs::write(
        &s3,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("scenario = 2", "scenario = 1"),
    )
    .unwrap();
    let d3 = tmp.path().join("s3");
    cmd_run(&args(s3, d3.clone())).unwrap();
    let d0 = dirs[0].to_str().unwrap();
    assert_eq!(status(&["report", d0, d3.to_str().unwrap()]), 2);
    assert_eq!(status(&["report", "--format", "csv", d0]), 0);
}
