//! Storage accounting per method and the training/IL latency split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Incremental-learning methods with a storage formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ewc,
    OnlineEwc,
    Si,
    Lwf,
    Icarl,
    Gem,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ewc,
        Method::OnlineEwc,
        Method::Si,
        Method::Lwf,
        Method::Icarl,
        Method::Gem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ewc => "ewc",
            Method::OnlineEwc => "online_ewc",
            Method::Si => "si",
            Method::Lwf => "lwf",
            Method::Icarl => "icarl",
            Method::Gem => "gem",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "storage method",
                name: s.to_string(),
            })
    }
}

/// Required storage in bytes given model bytes `m`, task count `t` and
/// exemplar bytes `b`.
///
/// | method     | bytes      |
/// |------------|------------|
/// | EWC        | `2·M·T`    |
/// | Online EWC | `2·M`      |
/// | SI         | `3·M`      |
/// | LwF        | `M`        |
/// | iCaRL      | `M + B`    |
/// | GEM        | `T·M + B`  |
pub fn storage_bytes(method: Method, m: f64, t: usize, b: f64) -> Result<f64> {
    if !(m > 0.0) || t == 0 || !(b >= 0.0) {
        return Err(Error::contract(format!(
            "storage inputs out of range: M={m} T={t} B={b}"
        )));
    }
    let t = t as f64;
    Ok(match method {
        Method::Ewc => 2.0 * m * t,
        Method::OnlineEwc => 2.0 * m,
        Method::Si => 3.0 * m,
        Method::Lwf => m,
        Method::Icarl => m + b,
        Method::Gem => t * m + b,
    })
}

/// Model bytes at single precision.
pub fn model_bytes(param_count: usize) -> usize {
    param_count * 4
}

/// Megabytes as 10⁶ bytes.
pub fn megabytes(bytes: f64) -> f64 {
    bytes / 1e6
}

/// Wall-clock seconds for one task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    /// Plain loop: forward, base loss, backward, optimizer step.
    pub train_time: f64,
    /// Strategy hooks.
    pub il_time: f64,
    /// Per-epoch test scoring, outside both of the above.
    pub eval_time: f64,
    /// Outer timer around the whole task.
    pub wall_time: f64,
}

impl TaskTiming {
    pub fn total(&self) -> f64 {
        self.train_time + self.il_time
    }
}

/// Per-task timings with averages. Only meaningful for single-threaded runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub tasks: Vec<TaskTiming>,
    pub mean_train_time: f64,
    pub mean_il_time: f64,
    pub total_train_time: f64,
    pub total_il_time: f64,
    pub total_eval_time: f64,
    pub total_wall_time: f64,
}

/// Aggregates per-task timings.
pub fn profile(tasks: &[TaskTiming]) -> LatencyProfile {
    let n = tasks.len().max(1) as f64;
    let total_train_time: f64 = tasks.iter().map(|t| t.train_time).sum();
    let total_il_time: f64 = tasks.iter().map(|t| t.il_time).sum();
    LatencyProfile {
        tasks: tasks.to_vec(),
        mean_train_time: total_train_time / n,
        mean_il_time: total_il_time / n,
        total_train_time,
        total_il_time,
        total_eval_time: tasks.iter().map(|t| t.eval_time).sum(),
        total_wall_time: tasks.iter().map(|t| t.wall_time).sum(),
    }
}
