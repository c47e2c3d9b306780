//! Exemplar storage with herding selection and nearest-class-mean classification.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ByteReader, Model};
use crate::numerics::Tensor;

const STORE_MAGIC: &[u8; 4] = b"DBEX";
const STORE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    Herding,
    Random,
}

/// `floor(total_budget / n_classes)`.
pub fn budget_per_class(total_budget: usize, n_classes: usize) -> usize {
    assert!(n_classes >= 1, "budget_per_class needs at least one class");
    total_budget / n_classes
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Rows of `features` as unit-length `f64` vectors (zero rows stay zero).
pub fn normalized_rows(features: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = features.cols();
    features
        .data()
        .chunks(d)
        .map(|row| {
            let mut v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            l2_normalize(&mut v);
            v
        })
        .collect()
}

/// Greedy herding order over `features` (rows assumed unit-normalized).
///
/// Step `k` picks the unused row that brings the running mean of the chosen
/// set closest to the mean of all rows; ties go to the lowest index.
pub fn herd_select(features: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if m > n {
        return Err(Error::contract(format!(
            "cannot herd {m} exemplars from {n} samples"
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let d = features[0].len();
    let mut mu = vec![0.0f64; d];
    for f in features {
        for (a, x) in mu.iter_mut().zip(f) {
            *a += x;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);

    let mut used = vec![false; n];
    let mut running = vec![0.0f64; d];
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(&running)
                .zip(f)
                .map(|((u, s), x)| (u - (s + x) / k as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("m ≤ n leaves a candidate");
        used[i] = true;
        for (s, x) in running.iter_mut().zip(&features[i]) {
            *s += x;
        }
        order.push(i);
    }
    Ok(order)
}

/// Per-class ordered exemplar windows under a global sample budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarStore {
    classes: BTreeMap<u16, Vec<Vec<f32>>>,
    pub budget: usize,
    pub policy: SelectionPolicy,
    pub seed: u64,
    timesteps: usize,
    features: usize,
}

impl ExemplarStore {
    pub fn new(
        budget: usize,
        policy: SelectionPolicy,
        seed: u64,
        timesteps: usize,
        features: usize,
    ) -> Self {
        ExemplarStore {
            classes: BTreeMap::new(),
            budget,
            policy,
            seed,
            timesteps,
            features,
        }
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn class_ids(&self) -> Vec<u16> {
        self.classes.keys().copied().collect()
    }

    pub fn class_len(&self, class: u16) -> usize {
        self.classes.get(&class).map_or(0, Vec::len)
    }

    pub fn exemplars(&self, class: u16) -> &[Vec<f32>] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Bytes per stored sample: the `f32` window plus a `u16` label.
    pub fn sample_bytes(&self) -> usize {
        self.timesteps * self.features * 4 + 2
    }

    pub fn byte_size(&self) -> usize {
        self.total() * self.sample_bytes()
    }

    /// Selects `m` exemplars (at least one when samples exist) of `class`
    /// from `data` and stores them, replacing any previous list.
    pub fn add_class(
        &mut self,
        model: &Model<f32>,
        data: &Dataset,
        class: u16,
        m: usize,
    ) -> Result<()> {
        let own = data.filter_by_classes(&[class])?;
        let m = m.max(1).min(own.len());
        let order = match self.policy {
            SelectionPolicy::Herding => {
                let (x, _) = own.full_batch()?;
                let feats = normalized_rows(&model.extract_features(&x)?);
                herd_select(&feats, m)?
            }
            SelectionPolicy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut idx: Vec<usize> = (0..own.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(m);
                idx
            }
        };
        let list = order.into_iter().map(|i| own.window(i).to_vec()).collect();
        self.classes.insert(class, list);
        Ok(())
    }

    /// Truncates every class to its first `new_m` entries, keeping at least one.
    pub fn reduce_exemplars(&mut self, new_m: usize) {
        let keep = new_m.max(1);
        for list in self.classes.values_mut() {
            list.truncate(keep);
        }
    }

    /// Exemplars as a dataset with `num_classes` label slots.
    pub fn to_dataset(&self, num_classes: usize) -> Result<Option<Dataset>> {
        let n = self.total();
        if n == 0 {
            return Ok(None);
        }
        let mut data = Vec::with_capacity(n * self.timesteps * self.features);
        let mut labels = Vec::with_capacity(n);
        for (&c, list) in &self.classes {
            for w in list {
                data.extend_from_slice(w);
                labels.push(c);
            }
        }
        let windows = Tensor::new(vec![n, self.timesteps, self.features], data)?;
        Dataset::new(windows, labels, num_classes, Split::Train, "exemplars").map(Some)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        for v in [
            self.timesteps,
            self.features,
            self.budget,
            self.classes.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[match self.policy {
            SelectionPolicy::Herding => 0u8,
            SelectionPolicy::Random => 1u8,
        }])?;
        w.write_all(&self.seed.to_le_bytes())?;
        for (&c, list) in &self.classes {
            w.write_all(&c.to_le_bytes())?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for win in list {
                for x in win {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut rd = ByteReader::new(r);
        if &rd.bytes::<4>()? != STORE_MAGIC {
            return Err(Error::format(0, "bad exemplar store magic"));
        }
        let version = rd.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported store version {version}"),
            ));
        }
        let timesteps = rd.u32()? as usize;
        let features = rd.u32()? as usize;
        let budget = rd.u32()? as usize;
        let n_classes = rd.u32()? as usize;
        let policy = match rd.bytes::<1>()?[0] {
            0 => SelectionPolicy::Herding,
            1 => SelectionPolicy::Random,
            p => {
                return Err(Error::format(
                    rd.offset() - 1,
                    format!("unknown selection policy {p}"),
                ))
            }
        };
        let seed = u64::from_le_bytes(rd.bytes::<8>()?);
        let mut store = ExemplarStore::new(budget, policy, seed, timesteps, features);
        for _ in 0..n_classes {
            let c = rd.u16()?;
            let count = rd.u32()? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let mut win = Vec::with_capacity(timesteps * features);
                for _ in 0..timesteps * features {
                    win.push(rd.f32()?);
                }
                list.push(win);
            }
            store.classes.insert(c, list);
        }
        rd.expect_end()?;
        Ok(store)
    }
}

/// Unit-norm mean feature per class, keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeanSet {
    pub means: BTreeMap<u16, Vec<f64>>,
}

/// Mean of the normalized exemplar features for each stored class,
/// re-normalized to unit length.
pub fn compute_class_means(store: &ExemplarStore, model: &Model<f32>) -> Result<ClassMeanSet> {
    let mut means = BTreeMap::new();
    for (&c, list) in &store.classes {
        if list.is_empty() {
            return Err(Error::Empty(format!("class {c} has no exemplars")));
        }
        let data: Vec<f32> = list.iter().flatten().copied().collect();
        let x = Tensor::new(vec![list.len(), store.timesteps, store.features], data)?;
        let feats = normalized_rows(&model.extract_features(&x)?);
        means.insert(c, mean_direction(&feats));
    }
    Ok(ClassMeanSet { means })
}

/// Unit-length direction of the mean of `feats`.
pub fn mean_direction(feats: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; feats.first().map_or(0, Vec::len)];
    for f in feats {
        for (a, v) in mean.iter_mut().zip(f) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= feats.len() as f64);
    l2_normalize(&mut mean);
    mean
}

/// Nearest-class-mean prediction on normalized features; ties go to the lowest class id.
pub fn ncm_classify(features: &Tensor<f32>, means: &ClassMeanSet) -> Result<Vec<u16>> {
    if means.means.is_empty() {
        return Err(Error::Empty("class mean set".into()));
    }
    Ok(normalized_rows(features)
        .iter()
        .map(|f| {
            let mut best = (u16::MAX, f64::INFINITY);
            for (&c, mu) in &means.means {
                let dist: f64 = f.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn unit_rows(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mut v = r.to_vec();
                l2_normalize(&mut v);
                v
            })
            .collect()
    }

    #[test]
    fn budget_floor() {
        assert_eq!(budget_per_class(100, 10), 10);
        assert_eq!(budget_per_class(7, 3), 2);
        assert_eq!(budget_per_class(5, 10), 0);
    }

    #[test]
    fn herding_full_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut order = herd_select(&feats, 7).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..7).collect::<Vec<_>>());
        assert!(herd_select(&feats, 8).is_err());
    }

    #[test]
    fn herding_picks_point_at_mean_first() {
        let feats = vec![vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(herd_select(&feats, 1).unwrap(), vec![1]);
    }

    fn store_with(lists: &[(u16, usize)]) -> ExemplarStore {
        let mut s = ExemplarStore::new(100, SelectionPolicy::Herding, 0, 2, 1);
        for &(c, n) in lists {
            s.classes
                .insert(c, (0..n).map(|i| vec![i as f32, c as f32]).collect());
        }
        s
    }

    #[test]
    fn reduce_keeps_prefix_and_guard() {
        let mut s = store_with(&[(0, 4), (1, 2)]);
        let before = s.clone();
        s.reduce_exemplars(10);
        assert_eq!(s, before);
        s.reduce_exemplars(2);
        assert_eq!(s.exemplars(0), &before.exemplars(0)[..2]);
        s.reduce_exemplars(0);
        assert_eq!(s.class_len(0), 1);
        assert_eq!(s.class_len(1), 1);
        assert_eq!(s.exemplars(0)[0], before.exemplars(0)[0]);
    }

    #[test]
    fn byte_size_formula() {
        let s = store_with(&[(0, 3), (2, 4)]);
        assert_eq!(s.byte_size(), 7 * (2 * 4 + 2));
    }

    #[test]
    fn store_round_trip() {
        let s = store_with(&[(0, 3), (5, 1)]);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(ExemplarStore::read_from(&buf[..]).unwrap(), s);
        assert!(ExemplarStore::read_from(&buf[..buf.len() - 2]).is_err());
    }

    fn mean_set(rows: &[(u16, &[f64])]) -> ClassMeanSet {
        ClassMeanSet {
            means: rows
                .iter()
                .map(|&(c, v)| (c, unit_rows(&[v]).remove(0)))
                .collect(),
        }
    }

    #[test]
    fn ncm_exact_and_tie() {
        let means = mean_set(&[(3, &[1.0, 0.0]), (1, &[0.0, 1.0])]);
        let f = Tensor::<f32>::from_f64s(&[3, 2], &[2.0, 0.0, 0.0, 5.0, 1.0, 1.0]).unwrap();
        assert_eq!(ncm_classify(&f, &means).unwrap(), vec![3, 1, 1]);
        let empty = ClassMeanSet {
            means: BTreeMap::new(),
        };
        assert!(ncm_classify(&f, &empty).is_err());
    }

    #[test]
    fn ncm_zero_feature_uses_tie_rule() {
        let means = mean_set(&[(4, &[1.0, 0.0]), (2, &[0.0, 1.0])]);
        let f = Tensor::<f32>::zeros(&[1, 2]);
        assert_eq!(ncm_classify(&f, &means).unwrap(), vec![2]);
    }

    #[test]
    fn ncm_matches_loop_oracle_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let means = ClassMeanSet {
            means: (0..5u16)
                .map(|c| {
                    let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    l2_normalize(&mut v);
                    (c, v)
                })
                .collect(),
        };
        let raw: Vec<f64> = (0..50 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = Tensor::<f32>::from_f64s(&[50, 4], &raw).unwrap();
        let got = ncm_classify(&f, &means).unwrap();
        for i in 0..50 {
            let mut x: Vec<f64> = (0..4).map(|k| f.at(i, k)).collect();
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            x.iter_mut().for_each(|a| *a /= n);
            let mut best = 0u16;
            let mut bd = f64::INFINITY;
            for c in 0..5u16 {
                let d: f64 = x
                    .iter()
                    .zip(&means.means[&c])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            assert_eq!(got[i], best);
        }
        let scaled = f.map(|x| 3.5 * x);
        assert_eq!(ncm_classify(&scaled, &means).unwrap(), got);
    }

    #[test]
    fn class_means_are_unit_and_duplicate_invariant() {
        let model = Model::<f32>::new(ModelConfig::new(1, 4, 2, 1, 2, 3)).unwrap();
        let single = store_with(&[(0, 1), (1, 1)]);
        let means = compute_class_means(&single, &model).unwrap();
        for (c, mu) in &means.means {
            assert!((mu.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            let x = Tensor::new(vec![1, 2, 1], single.exemplars(*c)[0].clone()).unwrap();
            let f = normalized_rows(&model.extract_features(&x).unwrap()).remove(0);
            for (a, b) in mu.iter().zip(&f) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let mut doubled = store_with(&[(0, 3)]);
        let base = compute_class_means(&doubled, &model).unwrap();
        let list = doubled.classes[&0].clone();
        doubled.classes.get_mut(&0).unwrap().extend(list);
        let again = compute_class_means(&doubled, &model).unwrap();
        for (a, b) in base.means[&0].iter().zip(&again.means[&0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut empty = store_with(&[(0, 1)]);
        empty.classes.insert(1, Vec::new());
        assert!(compute_class_means(&empty, &model).is_err());
    }

    #[test]
    fn orthogonal_pair_mean_is_diagonal() {
        let mean = mean_direction(&unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mean[0] - h).abs() < 1e-12 && (mean[1] - h).abs() < 1e-12);
    }
}
