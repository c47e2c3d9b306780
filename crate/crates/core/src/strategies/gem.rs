use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Strategy, TaskContext};
use crate::costs::Method;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::linalg::{dot, solve};
use crate::numerics::Tape;

pub const GEM_TOL: f64 = 1e-8;
pub const GEM_MAX_ITERS: usize = 10_000;

/// Flattened gradient of the unweighted mean cross-entropy on each memory,
/// eval mode, in memory order.
pub fn gem_reference_grads(model: &Model, memories: &[Dataset]) -> Result<Vec<Vec<f64>>> {
    let ones = vec![1.0; model.num_classes()];
    memories
        .iter()
        .map(|mem| {
            let (x, y) = mem.full_batch()?;
            let mut tape = Tape::new();
            let vars = model.forward_tape(&mut tape, &x, None)?;
            let loss = tape.softmax_xent(vars.logits, &y, &ones)?;
            let g = tape.backward(loss)?;
            Ok(vars
                .params
                .iter()
                .flat_map(|&p| g.wrt(p).to_f64_vec())
                .collect())
        })
        .collect()
}

/// Closest vector to `g` (in L2) with non-negative dot product against every
/// reference gradient. Returns `g` unchanged when no constraint is violated.
///
/// Solves the dual `min ½vᵀQv + rᵀv, v ≥ 0` with `Q = GGᵀ`, `r = Gg`, then
/// `g̃ = g + Gᵀv`.
pub fn gem_project(g: &[f64], refs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if let Some(bad) = refs.iter().find(|r| r.len() != g.len()) {
        return Err(Error::Shape {
            op: "gem_project",
            left: vec![g.len()],
            right: vec![bad.len()],
        });
    }
    let r: Vec<f64> = refs.iter().map(|gk| dot(g, gk)).collect();
    if r.iter().all(|&d| d >= 0.0) {
        return Ok(g.to_vec());
    }
    let k = refs.len();
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = dot(&refs[i], &refs[j]);
            q[i * k + j] = v;
            q[j * k + i] = v;
        }
    }
    let v = solve_nonneg_qp(&q, &r, k)?;
    let mut out = g.to_vec();
    for (vi, gk) in v.iter().zip(refs) {
        if *vi != 0.0 {
            out.iter_mut().zip(gk).for_each(|(o, x)| *o += vi * x);
        }
    }
    Ok(out)
}

fn qp_grad(q: &[f64], r: &[f64], v: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| dot(&q[i * k..(i + 1) * k], v) + r[i])
        .collect()
}

/// Natural KKT residual `max_i |min(v_i, ∇_i)|`.
fn kkt_residual(v: &[f64], grad: &[f64]) -> f64 {
    v.iter()
        .zip(grad)
        .map(|(v, g)| v.min(*g).abs())
        .fold(0.0, f64::max)
}

/// Solves the equality system on the support of `v` and accepts the result
/// if it satisfies the KKT conditions.
fn polish(q: &[f64], r: &[f64], v: &[f64], k: usize, tol: f64) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..k).filter(|&i| v[i] > 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let n = support.len();
    let mut a = vec![0.0; n * n];
    for (ii, &i) in support.iter().enumerate() {
        for (jj, &j) in support.iter().enumerate() {
            a[ii * n + jj] = q[i * k + j];
        }
    }
    let b: Vec<f64> = support.iter().map(|&i| -r[i]).collect();
    let x = solve(&a, &b, n)?;
    if x.iter().any(|&xi| xi < 0.0) {
        return None;
    }
    let mut out = vec![0.0; k];
    for (&i, xi) in support.iter().zip(x) {
        out[i] = xi;
    }
    (kkt_residual(&out, &qp_grad(q, r, &out, k)) <= tol).then_some(out)
}

/// Accelerated projected gradient on `min ½vᵀQv + rᵀv, v ≥ 0`, with an
/// active-set polish attempted periodically.
fn solve_nonneg_qp(q: &[f64], r: &[f64], k: usize) -> Result<Vec<f64>> {
    let scale = r
        .iter()
        .map(|x| x.abs())
        .chain((0..k).map(|i| q[i * k + i]))
        .fold(1.0, f64::max);
    let tol = GEM_TOL * scale;
    // Gershgorin bound on the largest eigenvalue
    let lip = (0..k)
        .map(|i| q[i * k..(i + 1) * k].iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if !(lip > 0.0) || !lip.is_finite() {
        return Err(Error::NonFinite("GEM dual curvature"));
    }
    let step = 1.0 / lip;
    let mut v = vec![0.0; k];
    let mut y = v.clone();
    let mut t = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 0..GEM_MAX_ITERS {
        let gy = qp_grad(q, r, &y, k);
        let next: Vec<f64> = y
            .iter()
            .zip(&gy)
            .map(|(y, g)| (y - step * g).max(0.0))
            .collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // restart momentum when it points uphill
        let uphill: f64 = gy
            .iter()
            .zip(next.iter().zip(&v))
            .map(|(g, (n, o))| g * (n - o))
            .sum();
        let beta = if uphill > 0.0 {
            0.0
        } else {
            (t - 1.0) / t_next
        };
        y = next
            .iter()
            .zip(&v)
            .map(|(n, o)| (n + beta * (n - o)).max(0.0))
            .collect();
        if uphill > 0.0 {
            t = 1.0;
        } else {
            t = t_next;
        }
        v = next;
        residual = kkt_residual(&v, &qp_grad(q, r, &v, k));
        if it % 8 == 0 {
            if let Some(p) = polish(q, r, &v, k, tol) {
                return Ok(p);
            }
        }
        if residual <= tol {
            return Ok(v);
        }
    }
    Err(Error::Convergence {
        iterations: GEM_MAX_ITERS,
        residual,
    })
}

/// Episodic memories per past task; each step's gradient is projected so
/// that no memory loss increases to first order.
#[derive(Clone, Debug)]
pub struct Gem {
    pub budget: f64,
    pub seed: u64,
    memories: Vec<Dataset>,
}

impl Gem {
    pub fn new(budget: f64, seed: u64) -> Self {
        Gem {
            budget,
            seed,
            memories: Vec::new(),
        }
    }

    pub fn memories(&self) -> &[Dataset] {
        &self.memories
    }
}

impl Strategy for Gem {
    fn box_clone(&self) -> Box<dyn Strategy> {
        Box::new(self.clone())
    }

    fn name(&self) -> &'static str {
        "gem"
    }

    fn storage_method(&self) -> Option<Method> {
        Some(Method::Gem)
    }

    fn post_backward(&mut self, _ctx: &TaskContext, model: &Model, grad: &mut [f32]) -> Result<()> {
        if self.memories.is_empty() {
            return Ok(());
        }
        let refs = gem_reference_grads(model, &self.memories)?;
        let g: Vec<f64> = grad.iter().map(|&v| v as f64).collect();
        let projected = gem_project(&g, &refs)?;
        grad.iter_mut()
            .zip(projected)
            .for_each(|(o, v)| *o = v as f32);
        Ok(())
    }

    fn after_task(&mut self, ctx: &TaskContext, _model: &Model, train: &Dataset) -> Result<()> {
        let total = (self.budget * ctx.total_train as f64).floor() as usize;
        let per_task = (total / ctx.num_tasks.max(1)).min(train.len());
        if per_task == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ctx.task_index as u64);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_task);
        idx.sort_unstable();
        self.memories.push(train.subset(&idx)?);
        Ok(())
    }

    fn exemplar_bytes(&self) -> usize {
        self.memories
            .iter()
            .map(|m| m.len() * (m.window_len() * 4 + 2))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Exhaustive active-set enumeration on the dual.
    fn oracle(g: &[f64], refs: &[Vec<f64>]) -> Vec<f64> {
        let k = refs.len();
        let p = g.len();
        let gm = DMatrix::from_fn(k, p, |i, j| refs[i][j]);
        let gv = DVector::from_column_slice(g);
        let q = &gm * gm.transpose();
        let r = &gm * &gv;
        if r.iter().all(|&d| d >= 0.0) {
            return g.to_vec();
        }
        let mut best: Option<DVector<f64>> = None;
        for mask in 1u32..(1 << k) {
            let s: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let qs = DMatrix::from_fn(s.len(), s.len(), |a, b| q[(s[a], s[b])]);
            let rs = DVector::from_fn(s.len(), |a, _| -r[s[a]]);
            let Some(x) = qs.lu().solve(&rs) else {
                continue;
            };
            if x.iter().any(|&v| v < -1e-12) {
                continue;
            }
            let mut v = DVector::zeros(k);
            for (a, &i) in s.iter().enumerate() {
                v[i] = x[a];
            }
            let grad = &q * &v + &r;
            if (0..k).all(|i| s.contains(&i) || grad[i] >= -1e-9) {
                best = Some(v);
                break;
            }
        }
        let v = best.expect("oracle found no KKT point");
        (gv + gm.transpose() * v).iter().copied().collect()
    }

    fn instance(seed: u64, p: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let g: Vec<f64> = (0..p).map(|_| normal()).collect();
        let refs = (0..k).map(|_| (0..p).map(|_| normal()).collect()).collect();
        (g, refs)
    }

    #[test]
    fn matches_active_set_oracle() {
        for seed in 0..60 {
            let (g, refs) = instance(seed, 12, 1 + (seed as usize % 5));
            let got = gem_project(&g, &refs).unwrap();
            let want = oracle(&g, &refs);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn satisfied_constraints_leave_gradient_bit_identical() {
        let g = vec![1.0, 2.0, -0.5];
        let refs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]];
        assert_eq!(gem_project(&g, &refs).unwrap(), g);
        assert_eq!(gem_project(&g, &[]).unwrap(), g);
    }

    #[test]
    fn single_constraint_closed_form() {
        let g = vec![1.0, -2.0];
        let a = vec![0.0, 1.0];
        let got = gem_project(&g, &[a]).unwrap();
        assert!((got[0] - 1.0).abs() < 1e-12 && got[1].abs() < 1e-12);
    }

    #[test]
    fn duplicate_constraints() {
        let g = vec![1.0, -2.0, 0.5];
        let a = vec![0.2, 1.0, 0.0];
        let got = gem_project(&g, &[a.clone(), a.clone()]).unwrap();
        let want = oracle(&g, &[a]);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            gem_project(&[1.0, 2.0], &[vec![1.0]]),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_minimal(seed in 0u64..10_000, k in 1usize..6) {
            let (g, refs) = instance(seed, 8, k);
            let got = gem_project(&g, &refs).unwrap();
            for r in &refs {
                prop_assert!(dot(&got, r) >= -1e-7);
            }
            // the unprojected gradient is never closer than the projection when infeasible
            let moved: f64 = got.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum();
            let want = oracle(&g, &refs);
            let best: f64 = want.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(moved <= best + 1e-6);
        }
    }
}
