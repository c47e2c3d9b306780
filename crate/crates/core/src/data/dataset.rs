use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Numerical floor for per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Windowed time-series data: `N` windows of `T` steps by `D` features, with
/// one class id per window drawn from `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    windows: Tensor<f32>,
    labels: Vec<u16>,
    num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        windows: Tensor<f32>,
        labels: Vec<u16>,
        num_classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if windows.shape().len() != 3 {
            return Err(Error::Shape {
                op: "dataset windows",
                left: windows.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no windows".into()));
        }
        if windows.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset labels",
                left: windows.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Index {
                what: "class list",
                index: bad as usize,
                len: num_classes,
            });
        }
        Ok(Dataset {
            windows,
            labels,
            num_classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.windows.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn window_len(&self) -> usize {
        self.timesteps() * self.features()
    }

    pub fn windows(&self) -> &Tensor<f32> {
        &self.windows
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let w = self.window_len();
        &self.windows.data()[i * w..(i + 1) * w]
    }

    /// Distinct classes present, ascending.
    pub fn present_classes(&self) -> Vec<u16> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    /// Stacks the given windows into a `[B×T×D]` batch with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let w = self.window_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "dataset window",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.window(i));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(vec![indices.len(), self.timesteps(), self.features()], data)?;
        Ok((t, labels))
    }

    /// All windows as one batch.
    pub fn full_batch(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (windows, labels) = self.batch(indices)?;
        Dataset::new(
            windows,
            labels.into_iter().map(|y| y as u16).collect(),
            self.num_classes,
            self.split,
            self.provenance.clone(),
        )
    }

    /// Keeps windows whose label is in `classes`, preserving order and labels.
    pub fn filter_by_classes(&self, classes: &[u16]) -> Result<Dataset> {
        if classes.is_empty() {
            return Err(Error::Empty("class filter set".into()));
        }
        let keep: BTreeSet<u16> = classes.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        if idx.is_empty() {
            return Err(Error::Empty(format!("no windows with classes {classes:?}")));
        }
        self.subset(&idx)
    }

    /// Rewrites labels through `map` (old id → new id) into `num_classes` slots.
    pub fn relabel(&self, map: &[Option<u16>], num_classes: usize) -> Result<Dataset> {
        let labels = self
            .labels
            .iter()
            .map(|&y| {
                map.get(y as usize).copied().flatten().ok_or(Error::Index {
                    what: "label map",
                    index: y as usize,
                    len: map.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(
            self.windows.clone(),
            labels,
            num_classes,
            self.split,
            self.provenance.clone(),
        )
    }

    /// Concatenation in argument order. All parts must share `T`, `D`.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of no datasets".into()))?;
        let (t, d) = (first.timesteps(), first.features());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut classes = 0;
        for p in parts {
            if p.timesteps() != t || p.features() != d {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.windows.shape().to_vec(),
                    right: p.windows.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.windows.data());
            labels.extend_from_slice(&p.labels);
            classes = classes.max(p.num_classes);
        }
        let n = labels.len();
        Dataset::new(
            Tensor::new(vec![n, t, d], data)?,
            labels,
            classes,
            first.split,
            first.provenance.clone(),
        )
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes
            < self
                .labels
                .iter()
                .map(|&y| y as usize + 1)
                .max()
                .unwrap_or(0)
        {
            return Err(Error::contract("class count below largest label"));
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

/// Per-feature-dimension statistics computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.features();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let rows = data.windows.data().chunks(d);
        let count = (data.len() * data.timesteps()) as f64;
        for row in rows {
            for (k, &x) in row.iter().enumerate() {
                sum[k] += x as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for row in data.windows.data().chunks(d) {
            for (k, &x) in row.iter().enumerate() {
                sq[k] += (x as f64 - mean[k]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count).sqrt().max(STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let d = data.features();
        if d != self.mean.len() {
            return Err(Error::Shape {
                op: "normalize",
                left: vec![d],
                right: vec![self.mean.len()],
            });
        }
        let mut out = data.clone();
        for row in out.windows.data_mut().chunks_mut(d) {
            for (k, x) in row.iter_mut().enumerate() {
                *x = ((*x as f64 - self.mean[k]) / self.std[k]) as f32;
            }
        }
        Ok(out)
    }
}

/// Zero-mean, unit-variance scaling per feature dimension using statistics
/// from `train` only.
pub fn normalize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, NormStats)> {
    let stats = NormStats::fit(train);
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Inverse-frequency class weights over `num_classes` slots, normalized so
/// the mean per-sample weight is 1. Absent classes get weight 0.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return vec![0.0; num_classes];
    }
    // w_c = N / (present · count_c) gives Σ_c w_c·count_c = N
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (present as f64 * c as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[u16], t: usize, d: usize) -> Dataset {
        let n = labels.len();
        let data = (0..n * t * d).map(|i| (i as f32 * 0.37).sin()).collect();
        Dataset::new(
            Tensor::new(vec![n, t, d], data).unwrap(),
            labels.to_vec(),
            4,
            Split::Train,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let mut ds = toy(&[0, 1, 2], 2, 2);
        for (i, x) in ds.windows.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *x = 5.0;
            }
        }
        let (tr, _, stats) = normalize(&ds, &ds).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        assert!(tr.windows.data().iter().step_by(2).all(|&x| x == 0.0));
    }

    #[test]
    fn renormalizing_is_idempotent() {
        let ds = toy(&[0, 1, 2, 3, 0], 3, 2);
        let (once, _, _) = normalize(&ds, &ds).unwrap();
        let (twice, _, _) = normalize(&once, &once).unwrap();
        for (a, b) in once.windows.data().iter().zip(twice.windows.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn test_split_uses_train_statistics() {
        let train = toy(&[0, 1, 2, 3], 3, 2);
        let mut test = toy(&[1, 2], 3, 2);
        for x in test.windows.data_mut() {
            *x += 2.0;
        }
        let (_, te, stats) = normalize(&train, &test).unwrap();
        // loop oracle over the test windows
        let mut mean = [0.0f64; 2];
        let mut cnt = 0.0;
        for row in train.windows.data().chunks(2) {
            mean[0] += row[0] as f64;
            mean[1] += row[1] as f64;
            cnt += 1.0;
        }
        mean[0] /= cnt;
        mean[1] /= cnt;
        let mut var = [0.0f64; 2];
        for row in train.windows.data().chunks(2) {
            var[0] += (row[0] as f64 - mean[0]).powi(2);
            var[1] += (row[1] as f64 - mean[1]).powi(2);
        }
        for k in 0..2 {
            assert!((stats.mean[k] - mean[k]).abs() < 1e-9);
        }
        for (i, (raw, got)) in test
            .windows
            .data()
            .iter()
            .zip(te.windows.data())
            .enumerate()
        {
            let k = i % 2;
            let want = (*raw as f64 - mean[k]) / (var[k] / cnt).sqrt();
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn filter_partition_and_errors() {
        let ds = toy(&[0, 1, 2, 3, 0, 2], 2, 1);
        assert_eq!(ds.filter_by_classes(&[0, 1, 2, 3]).unwrap(), ds);
        let a = ds.filter_by_classes(&[0, 2]).unwrap();
        let b = ds.filter_by_classes(&[1, 3]).unwrap();
        assert_eq!(a.len() + b.len(), ds.len());
        assert_eq!(a.labels(), &[0, 2, 0, 2]);
        assert!(ds.filter_by_classes(&[]).is_err());
        let only01 = ds.filter_by_classes(&[0, 1]).unwrap();
        assert!(only01.filter_by_classes(&[3]).is_err());
    }

    #[test]
    fn class_weights_cases() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2), vec![1.0, 1.0]);
        assert_eq!(class_weights(&[2, 2], 3), vec![0.0, 0.0, 1.0]);
        // counts (90, 10): 90·w0 + 10·w1 = 100 and w0/w1 = 1/9 → w0 = 5/9, w1 = 5
        let mut labels = vec![0usize; 90];
        labels.extend(vec![1usize; 10]);
        let w = class_weights(&labels, 2);
        assert!((w[0] - 5.0 / 9.0).abs() < 1e-12);
        assert!((w[1] - 5.0).abs() < 1e-12);
    }
}
