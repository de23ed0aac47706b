//! Rollout evaluation, leakage confusion, paraphrase grounding and
//! few-shot adaptation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::lang::{Lexicon, Split, Task, HELDOUT_SURFACES};
use crate::model::{Controller, Model};
use crate::par::{map_indexed, map_slice, Exec};
use crate::policy::{forward_graph, PolicyArch, PolicyParams};
use crate::seed;
use crate::sim::{env_reset, run_episode, EnvConfig, Layout, SceneState, Transition};
use crate::tensor::{AdamConfig, AdamW, Graph, ParamSet, Tensor};
use crate::train::Embeddings;

pub const EVAL_EPISODES: usize = 30;
/// Paraphrases cycled through during evaluation: the size of the held-out split.
pub const EVAL_PARAPHRASES: usize = HELDOUT_SURFACES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: Task,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskResult>,
    pub overall: f64,
    /// `confusion[r][c]`: fraction of episodes of evaluated task `r` whose
    /// first placement was placement `c` (task index order); the final
    /// column counts episodes without a placement.
    pub confusion: Vec<Vec<f64>>,
    /// Number of policy generations (or instruction bindings) performed.
    pub generations: usize,
}

impl EvalReport {
    /// Mean over evaluated tasks of the placement mass off the instructed task.
    pub fn leakage(&self, n_containers: usize) -> f64 {
        let rows = &self.confusion;
        if rows.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .tasks
            .iter()
            .zip(rows)
            .map(|(t, row)| {
                let diag = t.task.index(n_containers);
                row[..row.len() - 1].iter().enumerate().filter(|(c, _)| *c != diag).map(|(_, v)| v).sum::<f64>()
            })
            .sum();
        total / rows.len() as f64
    }

    pub fn write_csv(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# {provenance}")?;
        writeln!(f, "# model={} split={} generations={}", self.model, self.split.name(), self.generations)?;
        let n_place = self.confusion.first().map_or(0, |r| r.len() - 1);
        write!(f, "object,container,episodes,successes,success_rate")?;
        for c in 0..n_place {
            write!(f, ",place_{c}")?;
        }
        writeln!(f, ",no_op")?;
        for (t, row) in self.tasks.iter().zip(&self.confusion) {
            write!(f, "{},{},{},{},{}", t.task.object, t.task.container, t.episodes, t.successes, t.success_rate)?;
            for v in row {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        Ok(f.flush()?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Episode {
    pub success: bool,
    pub first_placement: Option<(usize, usize)>,
}

/// Reset seed of episode `e`; shared across tasks and paraphrase splits.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    seed::derive(seed, &[0x6576_616c, e as u64])
}

/// Runs `n_episodes` decorrelated episodes per task with `act(task index,
/// episode, state, observation)` returning raw actions.
pub fn rollout_with<F>(env: &EnvConfig, tasks: &[Task], n_episodes: usize, seed: u64, exec: Exec, act: F) -> Result<Vec<Vec<Episode>>>
where
    F: Fn(usize, usize, &SceneState, &[f64]) -> [f64; 3] + Sync + Send,
{
    let mut env = env.clone();
    env.layout = Layout::Decorrelated;
    let env = &env;
    let flat = map_indexed(exec, tasks.len() * n_episodes, |i| -> Result<Episode> {
        let (ti, e) = (i / n_episodes, i % n_episodes);
        let task = tasks[ti];
        let state = env_reset(env, task, episode_seed(seed, e))?;
        let out = run_episode(env, task, state, |s, o| act(ti, e, s, o), |_, _| {});
        Ok(Episode { success: out.success, first_placement: out.first_placement })
    });
    let flat = flat.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(flat.chunks(n_episodes.max(1)).map(|c| c.to_vec()).collect())
}

/// Builds an [`EvalReport`] from per-task episodes.
pub fn summarize(
    model: &str,
    env: &EnvConfig,
    tasks: &[Task],
    episodes: &[Vec<Episode>],
    split: Split,
    seed: u64,
    generations: usize,
) -> EvalReport {
    let n_place = env.n_objects * env.n_containers;
    let mut results = Vec::with_capacity(tasks.len());
    let mut confusion = Vec::with_capacity(tasks.len());
    for (&task, eps) in tasks.iter().zip(episodes) {
        let n = eps.len();
        let successes = eps.iter().filter(|e| e.success).count();
        let mut row = vec![0.0; n_place + 1];
        for e in eps {
            let c = match e.first_placement {
                Some((k, j)) => Task::new(k, j).index(env.n_containers),
                None => n_place,
            };
            row[c] += 1.0;
        }
        row.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        results.push(TaskResult { task, episodes: n, successes, success_rate: successes as f64 / n.max(1) as f64 });
        confusion.push(row);
    }
    let overall = results.iter().map(|r| r.success_rate).sum::<f64>() / results.len().max(1) as f64;
    EvalReport {
        model: model.to_string(),
        split,
        seed,
        config_hash: env.hash(),
        tasks: results,
        overall,
        confusion,
        generations,
    }
}

/// Per-task success over decorrelated resets. Episode `e` of every task
/// uses paraphrase `e mod 10` of `split`, so train and held-out runs pair
/// up episode by episode; each (task, paraphrase) controller is built once
/// and reused across its episodes.
pub fn rollout_eval(
    model: &Model,
    env: &EnvConfig,
    lex: &Lexicon,
    tasks: &[Task],
    n_episodes: usize,
    split: Split,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    let emb = Embeddings::new(lex, split);
    let keys: Vec<(usize, usize)> =
        (0..tasks.len()).flat_map(|t| (0..n_episodes.min(EVAL_PARAPHRASES)).map(move |s| (t, s))).collect();
    let built = map_slice(exec, &keys, |&(t, s)| -> Result<Controller> { model.controller(&emb.get(tasks[t], s)?) });
    let mut controllers = BTreeMap::new();
    for (k, c) in keys.iter().zip(built) {
        controllers.insert(*k, c?);
    }
    let eps = rollout_with(env, tasks, n_episodes, seed, exec, |t, e, _, obs| {
        let a = controllers[&(t, e % EVAL_PARAPHRASES)].act(obs);
        env.denormalize_action(&a)
    })?;
    Ok(summarize(model.kind().name(), env, tasks, &eps, split, seed, controllers.len()))
}

/// Rollouts with the instruction replaced by zeros: what the observation
/// pathway does on its own.
pub fn blind_eval(model: &Model, env: &EnvConfig, lex: &Lexicon, tasks: &[Task], n_episodes: usize, seed: u64, exec: Exec) -> Result<EvalReport> {
    let emb = Embeddings::new(lex, Split::Train);
    let c = model.controller(&emb.get(tasks[0], 0)?.zeroed())?;
    let eps = rollout_with(env, tasks, n_episodes, seed, exec, |_, _, _, obs| env.denormalize_action(&c.act(obs)))?;
    Ok(summarize(&format!("{}-blind", model.kind()), env, tasks, &eps, Split::Train, seed, 1))
}

/// Same reset seeds on both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct ParaphraseReport {
    pub train: EvalReport,
    pub heldout: EvalReport,
    pub gap: f64,
}

pub fn paraphrase_eval(
    model: &Model,
    env: &EnvConfig,
    lex: &Lexicon,
    tasks: &[Task],
    n_episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<ParaphraseReport> {
    let train = rollout_eval(model, env, lex, tasks, n_episodes, Split::Train, seed, exec)?;
    let heldout = rollout_eval(model, env, lex, tasks, n_episodes, Split::Heldout, seed, exec)?;
    let gap = train.overall - heldout.overall;
    Ok(ParaphraseReport { train, heldout, gap })
}

/// Fine-tuning steps at which adaptation is scored.
pub const ADAPT_CHECKPOINTS: [usize; 5] = [0, 50, 200, 500, 1000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub eta: f64,
    pub checkpoints: Vec<usize>,
    pub eval_episodes: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { steps: 1000, eta: 1e-3, checkpoints: ADAPT_CHECKPOINTS.to_vec(), eval_episodes: EVAL_EPISODES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub success: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AdaptReport {
    pub points: Vec<AdaptPoint>,
    pub theta: PolicyParams,
}

impl AdaptReport {
    pub fn at(&self, step: usize) -> Option<&AdaptPoint> {
        self.points.iter().find(|p| p.step == step)
    }
}

/// Where adapted policies are rolled out at each checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct AdaptEval<'a> {
    pub env: &'a EnvConfig,
    pub task: Task,
    pub seed: u64,
    pub exec: Exec,
}

fn transitions_tensors(env: &EnvConfig, data: &[Transition]) -> Result<(Tensor, Tensor)> {
    let obs_dim = data[0].obs.len();
    let obs = data.iter().flat_map(|t| t.obs.iter().copied()).collect();
    let act = data.iter().flat_map(|t| env.normalize_action(&t.act)).collect();
    Ok((Tensor::from_vec(data.len(), obs_dim, obs)?, Tensor::from_vec(data.len(), 3, act)?))
}

/// Mean squared normalized-action error of a fixed policy on `data`.
pub fn policy_loss(env: &EnvConfig, theta: &PolicyParams, data: &[Transition]) -> Result<f64> {
    if data.is_empty() {
        return Err(DiscError::Contract("no transitions".into()));
    }
    let mut total = 0.0;
    for t in data {
        let a = theta.act(&t.obs);
        let target = env.normalize_action(&t.act);
        total += a.iter().zip(target).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / (3 * data.len()) as f64)
}

/// Policy initialized like an untrained network: uniform `±1/sqrt(fan_in)`
/// weights, zero bias.
pub fn random_policy(arch: &PolicyArch, seed: u64) -> PolicyParams {
    let mut rng = seed::rng(seed, &[0x7261_6e64]);
    let layers: Vec<Tensor> = arch
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let mut t = Tensor::uniform(rows, cols, 1.0 / ((cols - 1) as f64).sqrt(), &mut rng);
            (0..rows).for_each(|r| t.set(r, cols - 1, 0.0));
            t
        })
        .collect();
    PolicyParams::from_layers(arch, &layers).expect("shapes from arch")
}

fn success_of(env: &EnvConfig, ev: &AdaptEval, episodes: usize, act: impl Fn(&[f64]) -> Vec<f64> + Sync + Send) -> Result<f64> {
    let eps = rollout_with(env, &[ev.task], episodes, ev.seed, ev.exec, |_, _, _, obs| env.denormalize_action(&act(obs)))?;
    Ok(eps[0].iter().filter(|e| e.success).count() as f64 / episodes.max(1) as f64)
}

/// Adam on `θ` alone against the demonstrations, starting from `theta0`
/// (a generated policy or [`random_policy`]). The generator is not an
/// input, so it cannot change.
pub fn few_shot_adapt(
    env: &EnvConfig,
    theta0: &PolicyParams,
    demos: &[Transition],
    val: &[Transition],
    cfg: &AdaptConfig,
    eval: Option<AdaptEval>,
) -> Result<AdaptReport> {
    if demos.is_empty() {
        return Err(DiscError::Contract("few-shot adaptation needs at least one demonstration".into()));
    }
    if !(cfg.eta > 0.0) {
        return Err(DiscError::Config(format!("adaptation rate {}", cfg.eta)));
    }
    let arch = theta0.arch.clone();
    let (obs, act) = transitions_tensors(env, demos)?;
    let mut layers = theta0.layers();
    let mut opt = AdamW::for_tensors(&layers, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let mut points = Vec::new();
    let record = |step: usize, layers: &[Tensor], train_loss: f64, points: &mut Vec<AdaptPoint>| -> Result<()> {
        let theta = PolicyParams::from_layers(&arch, layers)?;
        let success = match &eval {
            Some(ev) => Some(success_of(ev.env, ev, cfg.eval_episodes, |o| theta.act(o))?),
            None => None,
        };
        let val_loss = if val.is_empty() { f64::NAN } else { policy_loss(env, &theta, val)? };
        points.push(AdaptPoint { step, train_loss, val_loss, success });
        Ok(())
    };
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let vars: Vec<_> = layers.iter().map(|t| g.param(t.clone())).collect();
        let x = g.constant(obs.clone());
        let y = forward_graph(&mut g, &vars, x)?;
        let t = g.constant(act.clone());
        let loss = g.mse(y, t)?;
        let value = g.value(loss).item();
        if cfg.checkpoints.contains(&step) {
            record(step, &layers, value, &mut points)?;
        }
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).cloned().expect("policy layer gradient")).collect();
        opt.step(&mut layers, &grads, cfg.eta)?;
    }
    Ok(AdaptReport { points, theta: PolicyParams::from_layers(&arch, &layers)? })
}

/// Low-rank factors `W + A B` on a subset of an entangled model's weights.
#[derive(Clone, Debug)]
pub struct LoraPlan {
    pub rank: usize,
    /// `(parameter name, rows, cols)` of every wrapped matrix.
    pub matrices: Vec<(String, usize, usize)>,
}

impl LoraPlan {
    pub fn numel(&self) -> usize {
        self.matrices.iter().map(|(_, r, c)| self.rank * (r + c)).sum()
    }
}

/// Rank and matrix subset whose added parameter count is closest to
/// `target`. Subsets are prefixes and suffixes of the layer list, so the
/// choice stays interpretable (first layers, last layers, or all).
pub fn solve_lora(matrices: &[(String, usize, usize)], target: usize, tol: f64) -> Result<LoraPlan> {
    let mut best: Option<(f64, LoraPlan)> = None;
    let n = matrices.len();
    let mut subsets: Vec<Vec<(String, usize, usize)>> = Vec::new();
    for k in 1..=n {
        subsets.push(matrices[..k].to_vec());
        subsets.push(matrices[n - k..].to_vec());
    }
    for subset in subsets {
        for rank in 1..=256 {
            let plan = LoraPlan { rank, matrices: subset.clone() };
            let err = (plan.numel() as f64 - target as f64).abs() / target as f64;
            if best.as_ref().is_none_or(|(b, _)| err < *b) {
                best = Some((err, plan));
            }
        }
    }
    match best {
        Some((err, plan)) if err <= tol => Ok(plan),
        _ => Err(DiscError::Config(format!("no low-rank configuration within {:.0}% of {target} parameters", tol * 100.0))),
    }
}

#[derive(Clone, Debug)]
pub struct LoraReport {
    pub plan: LoraPlan,
    pub points: Vec<AdaptPoint>,
    /// Frozen backbone with the trained factors merged in.
    pub model: Model,
}

/// Trains low-rank factors on a frozen concat baseline; `B` starts at zero
/// so step 0 reproduces the frozen model.
pub fn lowrank_adapt(
    model: &Model,
    env: &EnvConfig,
    lex: &Lexicon,
    task: Task,
    demos: &[Transition],
    val: &[Transition],
    plan: &LoraPlan,
    cfg: &AdaptConfig,
    eval: Option<AdaptEval>,
    seed: u64,
) -> Result<LoraReport> {
    let net = model.concat().ok_or_else(|| DiscError::Config(format!("low-rank adaptation needs a concat baseline, got {}", model.kind())))?;
    if demos.is_empty() {
        return Err(DiscError::Contract("low-rank adaptation needs at least one demonstration".into()));
    }
    let emb = Embeddings::new(lex, Split::Train).get(task, 0)?;
    let (obs, act) = transitions_tensors(env, demos)?;
    let mut rng = seed::rng(seed, &[0x6c6f_7261]);
    let mut factors = ParamSet::new();
    if plan.rank > 0 {
        for (name, r, c) in &plan.matrices {
            factors.add(format!("{name}.a"), Tensor::uniform(*r, plan.rank, 1.0 / (*r as f64).sqrt(), &mut rng));
            factors.add(format!("{name}.b"), Tensor::zeros(plan.rank, *c));
        }
    }
    let merged = |factors: &ParamSet| -> Result<Model> {
        let mut m = model.clone();
        for (name, _, _) in &plan.matrices {
            let (Some(a), Some(b)) = (factors.id_of(&format!("{name}.a")), factors.id_of(&format!("{name}.b"))) else { continue };
            let delta = crate::tensor::matmul(factors.get(a), factors.get(b))?;
            let id = m.params().id_of(name).ok_or_else(|| DiscError::Lookup(format!("no parameter `{name}`")))?;
            m.params_mut().get_mut(id).add_assign(&delta);
        }
        Ok(m)
    };
    let val_loss = |m: &Model| -> Result<f64> {
        if val.is_empty() {
            return Ok(f64::NAN);
        }
        let c = m.controller(&emb)?;
        let mut total = 0.0;
        for t in val {
            let target = env.normalize_action(&t.act);
            total += c.act(&t.obs).iter().zip(target).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        Ok(total / (3 * val.len()) as f64)
    };
    let mut opt = AdamW::new(&factors, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    let mut points = Vec::new();
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let fp = factors.bind(&mut g);
        let x = g.constant(obs.clone());
        let y = net.forward_with(&mut g, &p, &emb, x, |g, name, w| {
            match (factors.id_of(&format!("{name}.a")), factors.id_of(&format!("{name}.b"))) {
                (Some(a), Some(b)) => {
                    let ab = g.matmul(fp.var(a), fp.var(b))?;
                    g.add(w, ab)
                }
                _ => Ok(w),
            }
        })?;
        let t = g.constant(act.clone());
        let loss = g.mse(y, t)?;
        if cfg.checkpoints.contains(&step) {
            let m = merged(&factors)?;
            let success = match &eval {
                Some(ev) => {
                    let c = m.controller(&emb)?;
                    Some(success_of(ev.env, ev, cfg.eval_episodes, |o| c.act(o))?)
                }
                None => None,
            };
            points.push(AdaptPoint { step, train_loss: g.value(loss).item(), val_loss: val_loss(&m)?, success });
        }
        if step == cfg.steps {
            break;
        }
        if factors.is_empty() {
            continue;
        }
        let grads = fp.grads(&g, &g.backward(loss)?);
        opt.step(factors.tensors_mut(), &grads, cfg.eta)?;
    }
    Ok(LoraReport { plan: plan.clone(), points, model: merged(&factors)? })
}
