//! JSON run reports and the cross-run summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use driftbench::costs::{megabytes, model_bytes, profile, LatencyProfile, Method};
use driftbench::protocol::{
    metrics_series, AccuracyMatrix, Arch, GridPoint, JointScore, MetricsReport, RunResult,
    StageOneSummary, TaskSequence,
};

use crate::config::{config_err, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "matrix.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub method: Method,
    pub model_bytes: usize,
    pub tasks: usize,
    pub exemplar_bytes: usize,
    pub total_bytes: f64,
    pub total_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: usize,
    pub classes: Vec<u16>,
    pub columns: Vec<usize>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub epoch_losses: Vec<f64>,
    pub epoch_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Everything one run produced. `timing` is the only non-deterministic field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub strategy: String,
    pub scenario: u8,
    pub seed: u64,
    pub class_order: Vec<u16>,
    pub arch: Arch,
    pub point: GridPoint,
    pub stage_one: Vec<StageOneSummary>,
    pub tasks: Vec<TaskRecord>,
    pub matrix: AccuracyMatrix,
    pub union_scores: Vec<f64>,
    pub final_score: f64,
    pub joint: Option<Vec<JointScore>>,
    pub metrics: Vec<MetricsReport>,
    pub storage: Option<StorageReport>,
    pub notes: Vec<String>,
    pub timing: LatencyProfile,
}

pub fn notes() -> Vec<String> {
    vec![
        "model selection scores candidates on test data, as in the reproduced protocol".into(),
        "the optimizer state is reset at the start of every task".into(),
        "timings are comparable only between single-threaded runs".into(),
    ]
}

impl RunReport {
    pub fn build(
        config: &RunConfig,
        tasks: &TaskSequence,
        stage_one: Vec<StageOneSummary>,
        run: &RunResult,
        joint: Option<Vec<JointScore>>,
    ) -> anyhow::Result<RunReport> {
        let a_star: Option<Vec<f64>> = joint.as_ref().map(|j| j.iter().map(|s| s.a_star).collect());
        let metrics = metrics_series(&run.matrix, a_star.as_deref())?;
        let storage = run.storage_bytes.map(|total| StorageReport {
            method: config
                .strategy
                .parse()
                .expect("storage implies a known method"),
            model_bytes: model_bytes(run.param_count),
            tasks: tasks.len(),
            exemplar_bytes: run.exemplar_bytes,
            total_bytes: total,
            total_mb: megabytes(total),
        });
        let task_records = tasks
            .layout()
            .into_iter()
            .zip(&run.outcomes)
            .enumerate()
            .map(|(i, (l, o))| TaskRecord {
                index: i + 1,
                classes: l.classes,
                columns: l.columns,
                train_windows: l.train_windows,
                test_windows: l.test_windows,
                epoch_losses: o.epoch_losses.clone(),
                epoch_scores: o.epoch_scores.clone(),
                best_epoch: o.best_epoch,
            })
            .collect();
        Ok(RunReport {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            strategy: config.strategy.clone(),
            scenario: config.scenario,
            seed: config.seed,
            class_order: tasks.class_order.clone(),
            arch: run.arch,
            point: run.point.clone(),
            stage_one,
            tasks: task_records,
            matrix: run.matrix.clone(),
            union_scores: run.union_scores.clone(),
            final_score: run.final_score(),
            joint,
            metrics,
            storage,
            notes: notes(),
            timing: profile(&run.timings()),
        })
    }

    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.metrics.last()
    }

    pub fn load(dir: &Path) -> anyhow::Result<RunReport> {
        let path = if dir.is_dir() {
            dir.join(REPORT_FILE)
        } else {
            dir.to_path_buf()
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let report: RunReport = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{} is not a run report: {e}", path.display())))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "{} has schema version {}, expected {SCHEMA_VERSION}",
                path.display(),
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Mean and standard error (sample deviation over √n; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Some(MeanSe { mean, se })
}

/// One method's row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub scenario: u8,
    pub runs: usize,
    pub a: Option<MeanSe>,
    pub f: Option<MeanSe>,
    pub a_kk: Option<MeanSe>,
    pub i: Option<MeanSe>,
}

/// Final-task metrics averaged per strategy. All reports must share a scenario.
pub fn summarize(reports: &[RunReport]) -> anyhow::Result<Vec<SummaryRow>> {
    let first = reports
        .first()
        .ok_or_else(|| config_err("no reports given"))?;
    if let Some(r) = reports.iter().find(|r| r.scenario != first.scenario) {
        return Err(config_err(format!(
            "reports mix scenarios {} and {}",
            first.scenario, r.scenario
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        let m = r
            .final_metrics()
            .ok_or_else(|| config_err("report without metrics"))?;
        groups.entry(&r.strategy).or_default().push(m);
    }
    let all = |ms: &[&MetricsReport], pick: fn(&MetricsReport) -> Option<f64>| -> Option<MeanSe> {
        let v: Option<Vec<f64>> = ms.iter().map(|m| pick(m)).collect();
        v.and_then(|v| mean_se(&v))
    };
    Ok(groups
        .into_iter()
        .map(|(strategy, ms)| SummaryRow {
            strategy: strategy.to_string(),
            scenario: first.scenario,
            runs: ms.len(),
            a: all(&ms, |m| Some(m.a)),
            f: all(&ms, |m| m.f),
            a_kk: all(&ms, |m| Some(m.a_kk)),
            i: all(&ms, |m| m.i),
        })
        .collect())
}

const HEADER: [&str; 11] = [
    "strategy", "scenario", "runs", "A", "A_se", "F", "F_se", "a_kk", "a_kk_se", "I", "I_se",
];

fn cells(row: &SummaryRow) -> Vec<String> {
    let mut out = vec![
        row.strategy.clone(),
        row.scenario.to_string(),
        row.runs.to_string(),
    ];
    for m in [row.a, row.f, row.a_kk, row.i] {
        match m {
            Some(m) => {
                out.push(format!("{:.4}", m.mean));
                out.push(format!("{:.4}", m.se));
            }
            None => {
                out.push("-".into());
                out.push("-".into());
            }
        }
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&cells(r).join(","));
        s.push('\n');
    }
    s
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![HEADER.iter().map(|h| h.to_string()).collect()];
    table.extend(rows.iter().map(cells));
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &table {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}"))
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_convention() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = mean_se(&v).unwrap();
        let sd = (v.iter().map(|x| (x - 4.5f64).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert_eq!(m.mean, 4.5);
        assert!((m.se - sd / 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_se(&[0.3]).unwrap().se, 0.0);
        assert!(mean_se(&[]).is_none());
    }
}
