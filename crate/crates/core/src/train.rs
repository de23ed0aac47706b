//! Behavior cloning: uniform transition sampling, mean squared action
//! error, AdamW with cosine annealing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{DiscError, Result};
use crate::lang::{encode_instruction, Lexicon, Split, Task, TaskEmbedding};
use crate::model::Model;
use crate::par::{map_slice, Exec};
use crate::seed;
use crate::sim::{Dataset, EnvConfig, Transition};
use crate::tensor::{cosine_lr, AdamConfig, AdamW, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    /// Redraw training paraphrases instead of using the recorded one.
    pub paraphrase: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-4,
            batch_size: 128,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: None,
            checkpoint_every: 1000,
            paraphrase: true,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(DiscError::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DiscError::Config(format!("learning rate {}", self.lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(DiscError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Transitions sharing one instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub task: Task,
    pub surface: usize,
    pub rows: Vec<usize>,
}

/// A batch grouped by instruction, groups ordered by `(task, surface)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub groups: Vec<Group>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every transition in `rows`, grouped by its recorded instruction.
    pub fn from_rows(data: &[Transition], rows: impl IntoIterator<Item = usize>) -> Self {
        let mut by: BTreeMap<(Task, usize), Vec<usize>> = BTreeMap::new();
        for r in rows {
            let t = &data[r];
            by.entry((t.task(), t.surface)).or_default().push(r);
        }
        Self { groups: by.into_iter().map(|((task, surface), rows)| Group { task, surface, rows }).collect() }
    }
}

/// Uniform draws with replacement from the flat transition list. With
/// `paraphrase` on, every task present in the batch gets one freshly drawn
/// training paraphrase for this batch.
pub fn sample_batch<R: Rng + ?Sized>(data: &[Transition], batch_size: usize, paraphrase: bool, rng: &mut R) -> Result<Batch> {
    if data.is_empty() {
        return Err(DiscError::Contract("cannot sample from an empty dataset".into()));
    }
    let rows: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
    if !paraphrase {
        return Ok(Batch::from_rows(data, rows));
    }
    let mut by: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    for r in rows {
        by.entry(data[r].task()).or_default().push(r);
    }
    let groups = by
        .into_iter()
        .map(|(task, rows)| Group { task, surface: rng.random_range(0..Split::Train.size()), rows })
        .collect();
    Ok(Batch { groups })
}

/// Instruction embeddings, encoded on first use.
#[derive(Debug)]
pub struct Embeddings<'a> {
    lex: &'a Lexicon,
    split: Split,
    cache: std::sync::Mutex<BTreeMap<(Task, usize), TaskEmbedding>>,
}

impl<'a> Embeddings<'a> {
    pub fn new(lex: &'a Lexicon, split: Split) -> Self {
        Self { lex, split, cache: Default::default() }
    }

    pub fn get(&self, task: Task, surface: usize) -> Result<TaskEmbedding> {
        if let Some(e) = self.cache.lock().unwrap().get(&(task, surface)) {
            return Ok(e.clone());
        }
        let e = encode_instruction(&self.lex.instruction(task, self.split, surface)?, self.lex)?;
        self.cache.lock().unwrap().insert((task, surface), e.clone());
        Ok(e)
    }
}

fn group_tensors(env: &EnvConfig, data: &[Transition], rows: &[usize]) -> Result<(Tensor, Tensor)> {
    let obs_dim = data[rows[0]].obs.len();
    let mut obs = Vec::with_capacity(rows.len() * obs_dim);
    let mut act = Vec::with_capacity(rows.len() * 3);
    for &r in rows {
        obs.extend_from_slice(&data[r].obs);
        act.extend_from_slice(&env.normalize_action(&data[r].act));
    }
    Ok((Tensor::from_vec(rows.len(), obs_dim, obs)?, Tensor::from_vec(rows.len(), 3, act)?))
}

/// `(1/N) Σ ‖π(o) − a‖²` over normalized actions, with gradients when
/// `with_grads` is set. Each group is an independent graph; results are
/// summed in group order.
pub fn bc_loss_grads(
    model: &Model,
    env: &EnvConfig,
    data: &[Transition],
    batch: &Batch,
    emb: &Embeddings,
    with_grads: bool,
    exec: Exec,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let n = batch.len();
    if n == 0 {
        return Err(DiscError::Contract("empty batch".into()));
    }
    let parts = map_slice(exec, &batch.groups, |grp| -> Result<(f64, Option<Vec<Tensor>>)> {
        let e = emb.get(grp.task, grp.surface)?;
        let (obs, act) = group_tensors(env, data, &grp.rows)?;
        let mut g = Graph::new();
        let p = if with_grads { model.params().bind(&mut g) } else { model.params().bind_frozen(&mut g) };
        let x = g.constant(obs);
        let y = model.predict(&mut g, &p, &e, x)?;
        let t = g.constant(act);
        let mse = g.mse(y, t)?;
        let w = (grp.rows.len() * 3) as f64 / n as f64;
        let loss = g.scale(mse, w)?;
        let value = g.value(loss).item();
        let grads = if with_grads { Some(p.grads(&g, &g.backward(loss)?)) } else { None };
        Ok((value, grads))
    });
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for part in parts {
        let (v, grads) = part?;
        total += v;
        if let Some(gr) = grads {
            match &mut acc {
                None => acc = Some(gr),
                Some(a) => a.iter_mut().zip(&gr).for_each(|(x, y)| x.add_assign(y)),
            }
        }
    }
    Ok((total, acc))
}

pub fn bc_loss(model: &Model, env: &EnvConfig, data: &[Transition], batch: &Batch, emb: &Embeddings) -> Result<f64> {
    Ok(bc_loss_grads(model, env, data, batch, emb, false, Exec::Sequential)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Mean loss of the last `k` steps.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.curve.len());
        self.curve[self.curve.len() - k..].iter().map(|c| c.loss).sum::<f64>() / k as f64
    }

    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# {provenance}")?;
        writeln!(f, "step,lr,loss")?;
        for c in &self.curve {
            writeln!(f, "{},{:e},{:e}", c.step, c.lr, c.loss)?;
        }
        Ok(f.flush()?)
    }
}

/// Loss above this multiple of the first step's loss counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverged steps before aborting.
pub const DIVERGENCE_PATIENCE: usize = 500;

/// Tracks consecutive steps whose loss exceeds a multiple of the first.
#[derive(Clone, Debug, Default)]
pub struct DivergenceMonitor {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceMonitor {
    /// Returns an error once the run of diverged steps reaches the patience.
    pub fn observe(&mut self, step: u64, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.run += 1;
            if self.run >= DIVERGENCE_PATIENCE {
                return Err(DiscError::Training(format!(
                    "loss {loss:e} above {DIVERGENCE_FACTOR}x initial {initial:e} for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }
}

fn global_clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains `model` in place. Checkpoints go to `out` (when given) every
/// `checkpoint_every` steps and at the end. Final parameters are rounded
/// to `f32` so the in-memory model equals what a checkpoint reloads.
pub fn train(
    model: &mut Model,
    env: &EnvConfig,
    data: &Dataset,
    lex: &Lexicon,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    exec: Exec,
) -> Result<TrainReport> {
    cfg.validate()?;
    let transitions = &data.transitions;
    let emb = Embeddings::new(lex, Split::Train);
    let mut opt = AdamW::new(model.params(), cfg.adam());
    let mut rng = seed::rng(seed, &[0x74_7261_696e]);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoints = Vec::new();
    let mut monitor = DivergenceMonitor::default();
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr);
        let batch = sample_batch(transitions, cfg.batch_size, cfg.paraphrase, &mut rng)?;
        let (loss, grads) = bc_loss_grads(model, env, transitions, &batch, &emb, true, exec)?;
        let mut grads = grads.expect("gradients requested");
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(DiscError::Training(format!(
                "non-finite loss {loss} at step {step} (lr {lr:e}, {} instruction groups, last finite loss {:?})",
                batch.groups.len(),
                curve.last().map(|c: &CurvePoint| c.loss)
            )));
        }
        monitor.observe(step, loss)?;
        if let Some(c) = cfg.grad_clip {
            global_clip(&mut grads, c);
        }
        opt.step(model.params_mut().tensors_mut(), &grads, lr)?;
        curve.push(CurvePoint { step, lr, loss });
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("{} step {step} lr {lr:.3e} loss {loss:.5}", model.kind());
        }
        let done = step + 1;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                let mut snapshot = model.clone();
                snapshot.params_mut().round_to_f32();
                let path = dir.join(format!("ckpt_{done:06}.bin"));
                checkpoint::save(&path, &snapshot.checkpoint()?)?;
                checkpoints.push(path);
            }
        }
    }
    model.params_mut().round_to_f32();
    if let Some(dir) = out {
        let path = dir.join("model.bin");
        checkpoint::save(&path, &model.checkpoint()?)?;
        checkpoints.push(path);
    }
    let final_loss = curve.last().map(|c| c.loss).unwrap_or(f64::NAN);
    Ok(TrainReport { curve, initial_loss: monitor.initial().unwrap_or(f64::NAN), final_loss, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_needs_a_full_run_of_bad_steps() {
        let mut m = DivergenceMonitor::default();
        m.observe(0, 1.0).unwrap();
        for s in 1..DIVERGENCE_PATIENCE as u64 {
            m.observe(s, 11.0).unwrap();
        }
        m.observe(600, 9.0).unwrap();
        for s in 0..DIVERGENCE_PATIENCE as u64 - 1 {
            m.observe(700 + s, 50.0).unwrap();
        }
        assert!(matches!(m.observe(2000, 50.0), Err(DiscError::Training(_))));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 0.0]), Tensor::row_vector(vec![4.0])];
        global_clip(&mut g, 1.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15 && (g[1].get(0, 0) - 0.8).abs() < 1e-15);
    }
}
