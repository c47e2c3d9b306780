//! Stacked-LSTM sequence classifier with a class-incrementally growable head.

use std::io::{Read, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const DROPOUT_INPUT: f64 = 0.2;
pub const DROPOUT_HIDDEN: f64 = 0.5;
pub const LAYER_GRID: [usize; 2] = [1, 2];
pub const HIDDEN_GRID: [usize; 2] = [32, 64];
/// Half-width of the uniform init for newly added head columns.
pub const HEAD_EXPAND_INIT: f64 = 0.05;

const CHECKPOINT_MAGIC: &[u8; 4] = b"DBMD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub timesteps: usize,
    pub features: usize,
    pub num_classes: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        hidden: usize,
        timesteps: usize,
        features: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            layers,
            hidden,
            timesteps,
            features,
            num_classes,
            dropout_input: DROPOUT_INPUT,
            dropout_hidden: DROPOUT_HIDDEN,
            seed,
        }
    }

    /// Checks structural validity. With `strict_grid`, L and S must also come
    /// from the architectural search grid.
    pub fn validate(&self, strict_grid: bool) -> Result<()> {
        if self.layers == 0
            || self.hidden == 0
            || self.timesteps == 0
            || self.features == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_input) || !(0.0..1.0).contains(&self.dropout_hidden) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if strict_grid
            && (!LAYER_GRID.contains(&self.layers) || !HIDDEN_GRID.contains(&self.hidden))
        {
            return Err(Error::Config(format!(
                "architecture L={} S={} is off the search grid (set arch_override to allow)",
                self.layers, self.hidden
            )));
        }
        Ok(())
    }
}

/// Closed-form parameter count: `Σ_l 4·(S·(in_l+S)+S) + S·C + C`.
pub fn param_count(config: &ModelConfig) -> usize {
    let s = config.hidden;
    let lstm: usize = (0..config.layers)
        .map(|l| {
            let input = if l == 0 { config.features } else { s };
            4 * (s * (input + s) + s)
        })
        .sum();
    lstm + s * config.num_classes + config.num_classes
}

/// Forward-pass handles on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
    pub features: Var,
    pub logits: Var,
}

/// Parameters are kept in declaration order: for each layer `w_x [in×4S]`,
/// `w_h [S×4S]`, `b [4S]` (gate blocks i, f, g, o), then `head_w [S×C]`,
/// `head_b [C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Real = f32> {
    config: ModelConfig,
    params: Vec<Tensor<S>>,
}

impl<S: Real> Model<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate(false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.hidden;
        let bound = 1.0 / (s as f64).sqrt();
        let mut params = Vec::with_capacity(3 * config.layers + 2);
        for l in 0..config.layers {
            let input = if l == 0 { config.features } else { s };
            params.push(Tensor::uniform(&[input, 4 * s], bound, &mut rng));
            params.push(Tensor::uniform(&[s, 4 * s], bound, &mut rng));
            params.push(Tensor::uniform(&[4 * s], bound, &mut rng));
        }
        params.push(Tensor::uniform(&[s, config.num_classes], bound, &mut rng));
        params.push(Tensor::uniform(&[config.num_classes], bound, &mut rng));
        Ok(Model { config, params })
    }

    /// Builds a model from explicit parameter tensors (checked against `config`).
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<S>>) -> Result<Self> {
        config.validate(false)?;
        let shapes = Self::param_shapes(&config, params.last().map(|b| b.len()).unwrap_or(0));
        if params.len() != shapes.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::Shape {
                    op: "from_params",
                    left: p.shape().to_vec(),
                    right: s.clone(),
                });
            }
        }
        Ok(Model { config, params })
    }

    fn param_shapes(config: &ModelConfig, classes: usize) -> Vec<Vec<usize>> {
        let s = config.hidden;
        let mut shapes = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 { config.features } else { s };
            shapes.push(vec![input, 4 * s]);
            shapes.push(vec![s, 4 * s]);
            shapes.push(vec![4 * s]);
        }
        shapes.push(vec![s, classes]);
        shapes.push(vec![classes]);
        shapes
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Classes currently represented by the head.
    pub fn num_classes(&self) -> usize {
        self.params.last().map(|b| b.len()).unwrap_or(0)
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.to_f64_vec()).collect()
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<(usize, usize)> {
        let shape = batch.shape();
        if shape.len() != 3 || shape[2] != self.config.features {
            return Err(Error::Shape {
                op: "forward",
                left: shape.to_vec(),
                right: vec![0, self.config.timesteps, self.config.features],
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Records the forward pass on `tape`. Dropout is applied only when `rng`
    /// is given (training mode).
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        batch: &Tensor<S>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardVars> {
        let (b, t_len) = self.check_batch(batch)?;
        let d = self.config.features;
        let s = self.config.hidden;
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();

        let mut inputs: Vec<Var> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut step = Vec::with_capacity(b * d);
            for i in 0..b {
                let off = (i * t_len + t) * d;
                step.extend_from_slice(&batch.data()[off..off + d]);
            }
            let x = tape.constant(Tensor::new(vec![b, d], step)?);
            let x = match rng.as_deref_mut() {
                Some(r) => dropout(tape, x, self.config.dropout_input, r)?,
                None => x,
            };
            inputs.push(x);
        }

        let mut top = inputs[0];
        for layer in 0..self.config.layers {
            let (wx, wh, bias) = (
                params[3 * layer],
                params[3 * layer + 1],
                params[3 * layer + 2],
            );
            let mut h = tape.constant(Tensor::zeros(&[b, s]));
            let mut c = tape.constant(Tensor::zeros(&[b, s]));
            let mut outputs = Vec::with_capacity(t_len);
            for &x in &inputs {
                let zx = tape.matmul(x, wx)?;
                let zh = tape.matmul(h, wh)?;
                let z = tape.add(zx, zh)?;
                let z = tape.add_bias(z, bias)?;
                let i_pre = tape.slice_cols(z, 0, s)?;
                let f_pre = tape.slice_cols(z, s, 2 * s)?;
                let g_pre = tape.slice_cols(z, 2 * s, 3 * s)?;
                let o_pre = tape.slice_cols(z, 3 * s, 4 * s)?;
                let i_gate = tape.sigmoid(i_pre);
                let f_gate = tape.sigmoid(f_pre);
                let g_gate = tape.tanh(g_pre);
                let o_gate = tape.sigmoid(o_pre);
                let keep = tape.mul(f_gate, c)?;
                let write = tape.mul(i_gate, g_gate)?;
                c = tape.add(keep, write)?;
                let c_act = tape.tanh(c);
                h = tape.mul(o_gate, c_act)?;
                outputs.push(h);
            }
            top = h;
            if layer + 1 < self.config.layers {
                inputs = match rng.as_deref_mut() {
                    Some(r) => outputs
                        .into_iter()
                        .map(|o| dropout(tape, o, self.config.dropout_hidden, r))
                        .collect::<Result<_>>()?,
                    None => outputs,
                };
            }
        }

        let features = top;
        let head_in = match rng {
            Some(r) => dropout(tape, features, self.config.dropout_hidden, r)?,
            None => features,
        };
        let n = params.len();
        let z = tape.matmul(head_in, params[n - 2])?;
        let logits = tape.add_bias(z, params[n - 1])?;
        Ok(ForwardVars {
            params,
            features,
            logits,
        })
    }

    /// Logits `[B×C]`; dropout is active only when `train_mode` is set.
    pub fn forward(
        &self,
        batch: &Tensor<S>,
        train_mode: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars =
            self.forward_tape(&mut tape, batch, if train_mode { Some(rng) } else { None })?;
        Ok(tape.value(vars.logits).clone())
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.forward_tape(&mut tape, batch, None)?;
        Ok(tape.value(vars.logits).clone())
    }

    /// Final top-layer hidden state `[B×S]`, dropout disabled.
    pub fn extract_features(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.forward_tape(&mut tape, batch, None)?;
        Ok(tape.value(vars.features).clone())
    }

    /// Applies the head to precomputed features.
    pub fn head(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.params.len();
        let z = features.matmul(&self.params[n - 2])?;
        let c = self.num_classes();
        let bias = &self.params[n - 1];
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| S::from_f64(x.to_f64() + bias.data()[i % c].to_f64()))
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    /// Adds `n_new` output columns; existing columns are preserved bit-exactly.
    pub fn expand_head(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::contract("expand_head needs at least one new class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.params.len();
        let s = self.config.hidden;
        let old = self.num_classes();
        let new = old + n_new;
        let mut w = self.params[n - 2].pad_to(&[s, new])?;
        for i in 0..s {
            for j in old..new {
                w.data_mut()[i * new + j] =
                    S::from_f64(rng.random_range(-HEAD_EXPAND_INIT..=HEAD_EXPAND_INIT));
            }
        }
        let mut b = self.params[n - 1].pad_to(&[new])?;
        for j in old..new {
            b.data_mut()[j] = S::from_f64(rng.random_range(-HEAD_EXPAND_INIT..=HEAD_EXPAND_INIT));
        }
        self.params[n - 2] = w;
        self.params[n - 1] = b;
        Ok(())
    }
}

impl Model<f32> {
    /// Writes the binary checkpoint: magic, version, config block, then every
    /// parameter tensor as little-endian f32 in declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let c = &self.config;
        for v in [
            c.layers,
            c.hidden,
            c.timesteps,
            c.features,
            self.num_classes(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(c.dropout_input as f32).to_le_bytes())?;
        w.write_all(&(c.dropout_hidden as f32).to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for p in &self.params {
            for x in p.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut rd = ByteReader::new(r);
        let magic = rd.bytes::<4>()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad model magic {magic:?}")));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported model version {version}"),
            ));
        }
        let layers = rd.u32()? as usize;
        let hidden = rd.u32()? as usize;
        let timesteps = rd.u32()? as usize;
        let features = rd.u32()? as usize;
        let classes = rd.u32()? as usize;
        let dropout_input = f32::from_le_bytes(rd.bytes::<4>()?) as f64;
        let dropout_hidden = f32::from_le_bytes(rd.bytes::<4>()?) as f64;
        let seed = u64::from_le_bytes(rd.bytes::<8>()?);
        let config = ModelConfig {
            layers,
            hidden,
            timesteps,
            features,
            num_classes: classes,
            dropout_input,
            dropout_hidden,
            seed,
        };
        config
            .validate(false)
            .map_err(|e| Error::format(8, e.to_string()))?;
        let mut params = Vec::new();
        for shape in Self::param_shapes(&config, classes) {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(rd.bytes::<4>()?));
            }
            params.push(Tensor::new(shape, data)?);
        }
        Model::from_params(config, params)
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by `1/(1−rate)`.
fn dropout<S: Real>(tape: &mut Tape<S>, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.mul_const(x, mask)
}

/// Little-endian reader that tracks its byte offset for error reporting.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("truncated payload: needed {N} bytes, found {filled}"),
                    ))
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes::<2>()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes::<4>()?))
    }

    /// Fails if any bytes remain.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::format(self.offset, "trailing bytes after payload")),
        }
    }
}
