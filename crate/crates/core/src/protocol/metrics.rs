//! Weighted F1 and the A/F/I forgetting metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Support-weighted mean of per-class F1 over the classes present in `labels`.
pub fn weighted_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "weighted_f1",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("weighted_f1 labels".into()));
    }
    let n = labels.iter().chain(predictions).max().map_or(0, |&m| m + 1);
    let mut tp = vec![0usize; n];
    let mut pred = vec![0usize; n];
    let mut support = vec![0usize; n];
    for (&p, &y) in predictions.iter().zip(labels) {
        pred[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let mut score = 0.0;
    for c in 0..n {
        if support[c] == 0 || tp[c] == 0 {
            continue;
        }
        let precision = tp[c] as f64 / pred[c] as f64;
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = 2.0 * precision * recall / (precision + recall);
        score += f1 * support[c] as f64;
    }
    Ok(score / labels.len() as f64)
}

/// Lower-triangular `a[k][j]`: score after training task `k` on task `j`,
/// both 1-based, `j ≤ k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    /// Builds from complete rows; row `k` must hold `k` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if row.len() != k {
            return Err(Error::contract(format!(
                "row {k} needs {k} entries, got {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("score {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Tasks trained so far.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, k: usize, j: usize) -> Result<f64> {
        if k == 0 || j == 0 || j > k || k > self.rows.len() {
            return Err(Error::Index {
                what: "accuracy matrix entry",
                index: k * 1000 + j,
                len: self.rows.len(),
            });
        }
        Ok(self.rows[k - 1][j - 1])
    }

    /// CSV with header `k,a_1,…,a_K`; cells above the diagonal are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.rows.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|j| format!("a_{j}")));
        out.write_record(&header).map_err(csv_err)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend((0..n).map(|j| row.get(j).map_or(String::new(), |v| format!("{v}"))));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `A_k = (1/k) Σ_{j≤k} a[k][j]`.
pub fn metric_a(m: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > m.tasks() {
        return Err(Error::contract(format!(
            "row {k} is not complete ({} rows)",
            m.tasks()
        )));
    }
    Ok(m.rows[k - 1].iter().sum::<f64>() / k as f64)
}

/// `F_k` and the per-task forgetting `f_j^k = max_{l∈[j, k−1]} a[l][j] − a[k][j]`.
pub fn metric_f(m: &AccuracyMatrix, k: usize) -> Result<(f64, Vec<f64>)> {
    if k < 2 {
        return Err(Error::contract("forgetting needs at least two tasks"));
    }
    if k > m.tasks() {
        return Err(Error::contract(format!(
            "row {k} is not complete ({} rows)",
            m.tasks()
        )));
    }
    let per: Vec<f64> = (1..k)
        .map(|j| {
            let best = (j..k)
                .map(|l| m.rows[l - 1][j - 1])
                .fold(f64::NEG_INFINITY, f64::max);
            best - m.rows[k - 1][j - 1]
        })
        .collect();
    Ok((per.iter().sum::<f64>() / (k - 1) as f64, per))
}

/// `I_k = a*_k − a[k][k]`; negative when the model beats the joint reference.
pub fn metric_i(a_star: f64, a_kk: f64) -> f64 {
    a_star - a_kk
}

/// Metrics after task `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub a: f64,
    /// Absent for `k = 1`.
    pub f: Option<f64>,
    pub forgetting: Vec<f64>,
    pub a_kk: f64,
    pub a_star: Option<f64>,
    pub i: Option<f64>,
}

/// One report per completed row; `joint[k−1]` is `a*_k` when available.
pub fn metrics_series(m: &AccuracyMatrix, joint: Option<&[f64]>) -> Result<Vec<MetricsReport>> {
    (1..=m.tasks())
        .map(|k| {
            let (f, forgetting) = if k >= 2 {
                let (f, per) = metric_f(m, k)?;
                (Some(f), per)
            } else {
                (None, Vec::new())
            };
            let a_kk = m.get(k, k)?;
            let a_star = joint.and_then(|j| j.get(k - 1).copied());
            Ok(MetricsReport {
                k,
                a: metric_a(m, k)?,
                f,
                forgetting,
                a_kk,
                a_star,
                i: a_star.map(|s| metric_i(s, a_kk)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_hand_example() {
        // labels A,A,B; preds A,B,B
        let s = weighted_f1(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_extremes() {
        assert_eq!(weighted_f1(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[1, 1, 1], &[0, 0, 0]).unwrap(), 0.0);
        assert!(weighted_f1(&[0], &[0, 1]).is_err());
        assert!(weighted_f1(&[], &[]).is_err());
    }

    #[test]
    fn f1_ignores_classes_absent_from_labels() {
        // class 2 is only predicted: it lowers precision of nothing it does not touch
        let s = weighted_f1(&[0, 2], &[0, 1]).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn a_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert!((metric_a(&m, 2).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(metric_a(&m, 1).unwrap(), 0.9);
        assert!(metric_a(&m, 3).is_err());
    }

    #[test]
    fn f_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.5, 0.8]]).unwrap();
        let (f, per) = metric_f(&m, 2).unwrap();
        assert!((f - 0.4).abs() < 1e-12);
        assert!((per[0] - 0.4).abs() < 1e-12);
        assert!(metric_f(&m, 1).is_err());
        let flat = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.7, 0.5], vec![0.7, 0.5, 0.9]])
            .unwrap();
        assert_eq!(metric_f(&flat, 3).unwrap().0, 0.0);
    }

    #[test]
    fn i_examples() {
        assert_eq!(metric_i(0.7, 0.7), 0.0);
        assert!((metric_i(0.9, 0.7) - 0.2).abs() < 1e-12);
        assert!((metric_i(0.6, 0.7) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.25, 1.0]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "k,a_1,a_2\n1,0.5,\n2,0.25,1\n"
        );
    }

    fn matrix(k: usize) -> impl Strategy<Value = AccuracyMatrix> {
        proptest::collection::vec(0.0f64..=1.0, k * (k + 1) / 2).prop_map(move |v| {
            let mut rows = Vec::new();
            let mut at = 0;
            for r in 1..=k {
                rows.push(v[at..at + r].to_vec());
                at += r;
            }
            AccuracyMatrix::from_rows(rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn non_decreasing_columns_never_forget(m in matrix(5)) {
            let mut rows: Vec<Vec<f64>> = m.rows().to_vec();
            for j in 0..5 {
                for k in j + 1..5 {
                    rows[k][j] = rows[k][j].max(rows[k - 1][j]);
                }
            }
            let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
            for k in 2..=5 {
                prop_assert!(metric_f(&m, k).unwrap().0 <= 0.0);
            }
            // Constant columns forget exactly nothing.
            for j in 0..5 {
                for k in j + 1..5 {
                    rows[k][j] = rows[j][j];
                }
            }
            let m = AccuracyMatrix::from_rows(rows).unwrap();
            for k in 2..=5 {
                prop_assert_eq!(metric_f(&m, k).unwrap().0, 0.0);
            }
        }

        #[test]
        fn forgetting_bounded(m in matrix(4)) {
            for k in 2..=4 {
                let (f, per) = metric_f(&m, k).unwrap();
                prop_assert!((-1.0..=1.0).contains(&f));
                prop_assert!(per.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
