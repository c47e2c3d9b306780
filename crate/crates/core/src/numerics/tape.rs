//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node whose inputs are earlier nodes, so the node
//! list is already in topological order and the backward sweep is a single
//! reverse pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::{softmax_rows, Real, Tensor};

/// Smallest probability fed to `ln`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols(Var, usize, usize),
    SumSquares(Var),
    WeightedSqDist {
        x: Var,
        anchor: Vec<f64>,
        weight: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        row_weights: Vec<f64>,
    },
    Distill {
        logits: Var,
        student: Vec<f64>,
        teacher: Vec<f64>,
        cols: Vec<usize>,
        temperature: f64,
    },
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Values are stored in `S`; intermediate reductions are
/// carried out in `f64`.
#[derive(Debug, Default)]
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S: Real = f32> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.require_same_shape(vb, "add")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| S::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape().len() != 2 || vb.shape() != [va.shape()[1]] {
            return Err(Error::Shape {
                op: "add_bias",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let n = va.shape()[1];
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| S::from_f64(x.to_f64() + vb.data()[i % n].to_f64()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.require_same_shape(vb, "mul")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| S::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: va.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = va
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| S::from_f64(x.to_f64() * m))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MulConst(a, mask), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(lo, hi)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, lo, hi), ng))
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.to_f64().powi(2))
            .sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// `Σ_p weight[p]·(x[p] − anchor[p])²`, the quadratic anchor penalty shared by
    /// the regularization strategies.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if anchor.len() != vx.len() || weight.len() != vx.len() {
            return Err(Error::Shape {
                op: "weighted_sq_dist",
                left: vx.shape().to_vec(),
                right: vec![anchor.len(), weight.len()],
            });
        }
        let s: f64 = vx
            .data()
            .iter()
            .zip(anchor.iter().zip(&weight))
            .map(|(v, (a, w))| w * (v.to_f64() - a).powi(2))
            .sum();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqDist { x, anchor, weight },
            ng,
        ))
    }

    /// Class-weighted softmax cross-entropy:
    /// `(1/B) Σ_i w[y_i] · (−log softmax(logits_i)[y_i])`.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_xent",
                left: vl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let (b, c) = (vl.shape()[0], vl.shape()[1]);
        if class_weights.len() != c {
            return Err(Error::Shape {
                op: "softmax_xent weights",
                left: vl.shape().to_vec(),
                right: vec![class_weights.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: c,
            });
        }
        let probs = softmax_rows(&vl.to_f64_vec(), c);
        let row_weights: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= row_weights[i] * probs[i * c + y].max(LOG_CLAMP).ln();
        }
        loss /= b as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
                row_weights,
            },
            ng,
        ))
    }

    /// Temperature-softened cross-entropy from fixed teacher logits to the
    /// student over `cols`, averaged over rows and scaled by `temperature²`.
    pub fn distill(
        &mut self,
        logits: Var,
        teacher: &Tensor<S>,
        cols: &[usize],
        temperature: f64,
    ) -> Result<Var> {
        let vl = self.value(logits);
        if cols.is_empty() {
            return Err(Error::Empty("distillation column subset".into()));
        }
        if vl.shape().len() != 2
            || teacher.shape().len() != 2
            || vl.shape()[0] != teacher.shape()[0]
        {
            return Err(Error::Shape {
                op: "distill",
                left: vl.shape().to_vec(),
                right: teacher.shape().to_vec(),
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::contract("distillation temperature must be positive"));
        }
        let (b, cs, ct) = (vl.shape()[0], vl.shape()[1], teacher.shape()[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= cs.min(ct)) {
            return Err(Error::Index {
                what: "distillation column",
                index: bad,
                len: cs.min(ct),
            });
        }
        let w = cols.len();
        let pick = |t: &Tensor<S>, n: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(b * w);
            for i in 0..b {
                v.extend(
                    cols.iter()
                        .map(|&j| t.data()[i * n + j].to_f64() / temperature),
                );
            }
            v
        };
        let student = softmax_rows(&pick(vl, cs), w);
        let teacher_p = softmax_rows(&pick(teacher, ct), w);
        let mut loss = 0.0;
        for (q, p) in teacher_p.iter().zip(&student) {
            loss -= q * p.max(LOG_CLAMP).ln();
        }
        loss *= temperature * temperature / b as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Distill {
                logits,
                student,
                teacher: teacher_p,
                cols: cols.to_vec(),
                temperature,
            },
            ng,
        ))
    }

    /// `Σ k_i · x_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        let mut ng = false;
        for &(v, k) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(Error::contract("lin_comb expects scalar nodes"));
            }
            s += k * val.get(0);
            ng |= self.ng(v);
        }
        Ok(self.push(Tensor::scalar(s), Op::LinComb(terms.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `loss`. Parameters are not modified.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes[..n]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|g| {
                        Tensor::new(
                            self.nodes[i].value.shape().to_vec(),
                            g.into_iter().map(S::from_f64).collect(),
                        )
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let nn = vb.shape()[1];
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &vb.data()[p * nn..(p + 1) * nn];
                            da[i * k + p] =
                                grow.iter().zip(brow).map(|(x, y)| x * y.to_f64()).sum();
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * nn];
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av = va.data()[i * k + p].to_f64();
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * nn..(p + 1) * nn];
                            for (d, x) in drow.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddBias(a, bias) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        db[i % n] += x;
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                if self.ng(*a) {
                    let d = g
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| x * y.to_f64())
                        .collect();
                    accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g
                        .iter()
                        .zip(va.data())
                        .map(|(x, y)| x * y.to_f64())
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::MulConst(a, mask) => {
                let d = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                accumulate(grads, *a, d);
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, g.iter().map(|x| x * k).collect());
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| {
                        let y = y.to_f64();
                        x * y * (1.0 - y)
                    })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| {
                        let y = y.to_f64();
                        x * (1.0 - y * y)
                    })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, lo, hi) => {
                let va = &self.nodes[a.0].value;
                let (m, n) = (va.shape()[0], va.shape()[1]);
                let w = hi - lo;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + lo..i * n + hi].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, d);
            }
            Op::SumSquares(a) => {
                let d = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .map(|x| 2.0 * g[0] * x.to_f64())
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::WeightedSqDist { x, anchor, weight } => {
                let d = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(anchor.iter().zip(weight))
                    .map(|(v, (a, w))| 2.0 * g[0] * w * (v.to_f64() - a))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
                row_weights,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let mut d = vec![0.0; probs.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let k = g[0] * row_weights[i] / b as f64;
                    for j in 0..c {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        d[i * c + j] = k * (probs[i * c + j] - ind);
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::Distill {
                logits,
                student,
                teacher,
                cols,
                temperature,
            } => {
                let vl = &self.nodes[logits.0].value;
                let (b, c) = (vl.shape()[0], vl.shape()[1]);
                let w = cols.len();
                let k = g[0] * temperature / b as f64;
                let mut d = vec![0.0; b * c];
                for i in 0..b {
                    for (jj, &j) in cols.iter().enumerate() {
                        d[i * c + j] = k * (student[i * w + jj] - teacher[i * w + jj]);
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::LinComb(terms) => {
                for &(v, k) in terms {
                    if self.ng(v) {
                        accumulate(grads, v, vec![g[0] * k]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let theta = tape.param(Tensor::from_f64s(&[3], &[1.0, -2.0, 3.0]).unwrap());
        let loss = tape.sum_squares(theta);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let theta = tape.param(Tensor::from_f64s(&[2], &[0.5, 0.25]).unwrap());
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.lin_comb(&[(c, 1.0)]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(theta).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let theta = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(theta), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut tape = Tape::<f32>::new();
        let z = tape.param(Tensor::zeros(&[2, 4]));
        let loss = tape.softmax_xent(z, &[0, 3], &[1.0; 4]).unwrap();
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::from_f64s(&[1, 3], &[60.0, 0.0, 0.0]).unwrap());
        let loss = tape.softmax_xent(z, &[0], &[1.0; 3]).unwrap();
        assert!(tape.scalar(loss) < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_index_error() {
        let mut tape = Tape::<f32>::new();
        let z = tape.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.softmax_xent(z, &[3], &[1.0; 3]),
            Err(Error::Index {
                index: 3,
                len: 3,
                ..
            })
        ));
    }

    #[test]
    fn empty_distill_subset_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let z = tape.param(Tensor::zeros(&[1, 3]));
        let t = Tensor::zeros(&[1, 3]);
        assert!(tape.distill(z, &t, &[], 2.0).is_err());
    }
}
