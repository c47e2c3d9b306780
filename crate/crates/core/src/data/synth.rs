use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const STREAM_OFFSETS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

/// Parameters of the AR(1) class-conditional generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub timesteps: usize,
    pub features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub ar_coeff: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 6,
            timesteps: 20,
            features: 6,
            train_per_class: 100,
            test_per_class: 34,
            separation: 3.0,
            ar_coeff: 0.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.n_classes > u16::MAX as usize {
            return Err(Error::Config(
                "n_classes exceeds the u16 label range".into(),
            ));
        }
        if self.timesteps == 0
            || self.features == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::Config(
                "timesteps, features and per-class counts must be positive".into(),
            ));
        }
        if !(self.separation >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "separation and noise must be non-negative".into(),
            ));
        }
        if !(self.ar_coeff > 0.0 && self.ar_coeff < 1.0) {
            return Err(Error::Config(format!(
                "ar_coeff must lie in (0, 1), got {}",
                self.ar_coeff
            )));
        }
        Ok(())
    }

    /// Per-class offset vectors of length `separation`. The first
    /// `min(C, D)` directions are mutually orthogonal.
    pub fn class_offsets(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, STREAM_OFFSETS);
        let d = self.features;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(self.n_classes);
        for _ in 0..self.n_classes {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if dirs.len() < d {
                for u in &dirs {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(u) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        dirs.into_iter()
            .map(|u| u.into_iter().map(|x| x * self.separation).collect())
            .collect()
    }

    fn sample(
        &self,
        offsets: &[Vec<f64>],
        per_class: usize,
        rng: &mut ChaCha8Rng,
        split: Split,
    ) -> Result<Dataset> {
        let (t_len, d, c) = (self.timesteps, self.features, self.n_classes);
        let rho = self.ar_coeff;
        let stationary_sd = self.noise / (1.0 - rho * rho).sqrt();
        let mut data = Vec::with_capacity(per_class * c * t_len * d);
        let mut labels = Vec::with_capacity(per_class * c);
        for _ in 0..per_class {
            for (class, mu) in offsets.iter().enumerate() {
                // start from the stationary law of x_t = ρ·x_{t−1} + η_t + μ
                let mut x: Vec<f64> = mu
                    .iter()
                    .map(|m| m / (1.0 - rho) + stationary_sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for _ in 0..t_len {
                    for (k, xk) in x.iter_mut().enumerate() {
                        let eta: f64 = rng.sample(StandardNormal);
                        *xk = rho * *xk + self.noise * eta + mu[k];
                        data.push(*xk as f32);
                    }
                }
                labels.push(class as u16);
            }
        }
        let n = labels.len();
        Dataset::new(
            Tensor::new(vec![n, t_len, d], data)?,
            labels,
            c,
            split,
            format!("synthetic:seed={}", self.seed),
        )
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates train and test splits from disjoint random streams.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let offsets = spec.class_offsets();
    let train = spec.sample(
        &offsets,
        spec.train_per_class,
        &mut stream(spec.seed, STREAM_TRAIN),
        Split::Train,
    )?;
    let test = spec.sample(
        &offsets,
        spec.test_per_class,
        &mut stream(spec.seed, STREAM_TEST),
        Split::Test,
    )?;
    Ok((train, test))
}
