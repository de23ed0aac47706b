//! Finite-difference checks of every graph op and of the full generator.

use rand::Rng;
use serde::Serialize;

use crate::hypernet::{Disc, HypernetConfig, InitMode};
use crate::lang::TaskEmbedding;
use crate::policy::{forward_graph, PolicyArch};
use crate::seed;
use crate::tensor::{grad_check, grad_check_coords, Bound, GradCheckReport, Graph, Tensor, TensorError, Var};

/// Per-op threshold on the max relative error.
pub const OP_TOL: f64 = 1e-6;
/// End-to-end threshold through generation and the generated policy.
pub const PIPELINE_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn from_report(name: &str, r: GradCheckReport, tol: f64) -> Self {
        Self { name: name.to_string(), max_rel_error: r.max_rel_error, checked: r.checked, tol }
    }
}

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

fn weighted_mean(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, TensorError> {
    let w = g.constant(w.clone());
    let m = g.mul(y, w)?;
    g.mean(m)
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// Every op on `n_shapes` random shapes; one result per op holding the worst
/// error over all shapes.
pub fn op_suite(n_shapes: usize, seed: u64) -> Result<Vec<CheckResult>, TensorError> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for s in 0..n_shapes as u64 {
        let mut rng = seed::rng(seed, &[0x6f70, s]);
        let r = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let c2 = c.max(2);
        let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let mut t = |r: usize, c: usize| Tensor::randn(r, c, 1.0, &mut rng);
        let cases: Vec<(&str, Op, Vec<Tensor>)> = vec![
            ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![t(r, k), t(k, c)]),
            ("transpose", Box::new(|g, v| g.transpose(v[0])), vec![t(r, c)]),
            ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![t(r, c), t(r, c)]),
            ("add_row", Box::new(|g, v| g.add(v[0], v[1])), vec![t(r, c), t(1, c)]),
            ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![t(r, c), t(r, c)]),
            ("scale", Box::new(|g, v| g.scale(v[0], -1.7)), vec![t(r, c)]),
            ("relu", Box::new(|g, v| g.relu(v[0])), vec![away_from_zero(t(r, c))]),
            ("tanh", Box::new(|g, v| g.tanh(v[0])), vec![t(r, c)]),
            ("softmax", Box::new(|g, v| g.softmax(v[0])), vec![t(r, c)]),
            ("layer_norm", Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])), vec![t(r, c2), t(1, c2), t(1, c2)]),
            ("concat_rows", Box::new(|g, v| g.concat_rows(&[v[0], v[1]])), vec![t(r, c), t(k, c)]),
            ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[0], v[1]])), vec![t(r, c), t(r, k)]),
            ("slice", Box::new(move |g, v| g.slice(v[0], r0..r, c0..c)), vec![t(r, c)]),
            ("reshape", Box::new(move |g, v| g.reshape(v[0], c, r)), vec![t(r, c)]),
            ("mean", Box::new(|g, v| g.mean(v[0])), vec![t(r, c)]),
            ("mse", Box::new(|g, v| g.mse(v[0], v[1])), vec![t(r, c), t(r, c)]),
            ("linear", Box::new(|g, v| g.linear(v[0], v[1], v[2])), vec![t(r, k), t(k, c), t(1, c)]),
            ("attention", Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads)), vec![t(r, d), t(k, d), t(k, d)]),
        ];
        for (name, op, inputs) in cases {
            let out_shape = {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
                let y = op(&mut g, &vs)?;
                g.shape(y)
            };
            let w = Tensor::randn(out_shape.0, out_shape.1, 1.0, &mut seed::rng(seed, &[0x77, s]));
            let rep = grad_check(|g, v| op(g, v).and_then(|y| weighted_mean(g, y, &w)), &inputs, H)?;
            let res = CheckResult::from_report(name, rep, OP_TOL);
            match worst.iter_mut().find(|w| w.name == name) {
                Some(prev) => {
                    prev.checked += res.checked;
                    prev.max_rel_error = prev.max_rel_error.max(res.max_rel_error);
                }
                None => worst.push(res),
            }
        }
    }
    Ok(worst)
}

/// Toy generator used by the end-to-end check.
pub fn toy_config() -> HypernetConfig {
    HypernetConfig { d: 8, heads: 2, win_blocks: 2, refine_steps: 2, d_lang: 6, arch: PolicyArch::new(vec![5, 4, 3, 2]).expect("valid dims"), init: InitMode::Win }
}

/// Behavior-cloning loss through generation, refinement and the generated
/// policy, against central differences on `coords_per_tensor` coordinates of
/// every parameter tensor. Parameters are perturbed first so the zero-init
/// refinement decoders carry gradient.
pub fn pipeline_check(seed: u64, coords_per_tensor: usize) -> crate::Result<CheckResult> {
    let mut m = Disc::new(toy_config(), &mut seed::rng(seed, &[0x7069]))?;
    let mut rng = seed::rng(seed, &[0x70, 1]);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let emb = TaskEmbedding::from_tokens(Tensor::randn(3, 6, 0.5, &mut rng));
    let obs = Tensor::randn(6, 5, 1.0, &mut rng);
    let act = Tensor::randn(6, 2, 0.5, &mut rng);
    let inputs: Vec<Tensor> = m.params().tensors().to_vec();
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..t.len().min(coords_per_tensor) {
            coords.push((i, rng.random_range(0..t.len())));
        }
    }
    coords.sort_unstable();
    coords.dedup();
    let rep = grad_check_coords(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let layers = m.generate_layers(g, &p, &emb)?;
            let x = g.constant(obs.clone());
            let y = forward_graph(g, &layers, x)?;
            let t = g.constant(act.clone());
            g.mse(y, t)
        },
        &inputs,
        H,
        Some(&coords),
    )?;
    Ok(CheckResult::from_report("disc_pipeline", rep, PIPELINE_TOL))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_op_and_passes() {
        let res = op_suite(3, 0).unwrap();
        assert_eq!(res.len(), 18);
        assert!(res.iter().all(|r| r.passed()), "{res:?}");
    }

    #[test]
    fn pipeline_check_passes() {
        let r = pipeline_check(1, 4).unwrap();
        assert!(r.passed() && r.checked > 40, "{r:?}");
    }
}
