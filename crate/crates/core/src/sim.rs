//! 2-D combinatorial pick-and-place: bring object `k` to container `j`.
//!
//! Observations are fixed-order scene vectors (agent, carry flag, objects,
//! containers, distractors), positions mapped from `[0, 1]` to `[-1, 1]`.
//! Actions are `(dx, dy, g)`; `g > 0` grasps, `g < 0` releases.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiscError, Result};
use crate::lang::{Task, TRAIN_SURFACES};
use crate::par::{self, Exec};
use crate::seed;

const MAX_RESET_TRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Every position uniform; the scene says nothing about the task.
    Decorrelated,
    /// The instructed object sits near a task-specific anchor.
    Correlated,
}

impl std::str::FromStr for Layout {
    type Err = DiscError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decorrelated" => Ok(Layout::Decorrelated),
            "correlated" => Ok(Layout::Correlated),
            _ => Err(DiscError::Config(format!("unknown layout `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_objects: usize,
    pub n_containers: usize,
    pub n_distractors: usize,
    pub eps_grasp: f64,
    pub delta_place: f64,
    pub a_max: f64,
    pub horizon: usize,
    pub layout: Layout,
    pub sigma_layout: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_objects: 3,
            n_containers: 3,
            n_distractors: 2,
            eps_grasp: 0.03,
            delta_place: 0.05,
            a_max: 0.05,
            horizon: 200,
            layout: Layout::Decorrelated,
            sigma_layout: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_grasp > 0.0 && self.eps_grasp < self.delta_place && self.delta_place < 0.5) {
            return Err(DiscError::Config("need 0 < eps_grasp < delta_place < 0.5".into()));
        }
        if !(self.a_max > 0.0) || self.n_objects == 0 || self.n_containers == 0 {
            return Err(DiscError::Config("a_max and object/container counts must be positive".into()));
        }
        // worst case: two diagonal crossings plus the grasp and release steps
        let min_h = 2 * (1.0 / self.a_max).ceil() as usize + 2;
        if self.horizon < min_h {
            return Err(DiscError::Config(format!("horizon {} below the longest expert path {min_h}", self.horizon)));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        3 + 2 * (self.n_objects + self.n_containers + self.n_distractors)
    }

    pub fn act_dim(&self) -> usize {
        3
    }

    pub fn tasks(&self) -> Vec<Task> {
        crate::lang::all_tasks(self.n_objects, self.n_containers)
    }

    /// Centre of the correlated-mode Gaussian for `task`.
    pub fn anchor(&self, task: Task) -> [f64; 2] {
        [
            (task.container as f64 + 0.5) / self.n_containers as f64,
            (task.object as f64 + 0.5) / self.n_objects as f64,
        ]
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::tensor::hex_string(&Sha256::digest(json.as_bytes()))
    }

    /// Raw `(dx, dy, g)` to the unit-scale targets used for regression.
    pub fn normalize_action(&self, a: &[f64]) -> [f64; 3] {
        [a[0] / self.a_max, a[1] / self.a_max, a[2]]
    }

    pub fn denormalize_action(&self, a: &[f64]) -> [f64; 3] {
        [a[0] * self.a_max, a[1] * self.a_max, a[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub agent: [f64; 2],
    pub carrying: Option<usize>,
    pub objects: Vec<[f64; 2]>,
    pub containers: Vec<[f64; 2]>,
    pub distractors: Vec<[f64; 2]>,
    pub step: usize,
    /// First release of any object within `delta_place` of any container.
    pub first_placement: Option<(usize, usize)>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn env_reset(cfg: &EnvConfig, task: Task, seed: u64) -> Result<SceneState> {
    if task.object >= cfg.n_objects || task.container >= cfg.n_containers {
        return Err(DiscError::Contract(format!("task {task:?} outside the scene")));
    }
    let mut rng = match cfg.layout {
        // task-independent stream: the reset cannot depend on the instruction
        Layout::Decorrelated => seed::rng(seed, &[0]),
        Layout::Correlated => seed::rng(seed, &[1, task.index(cfg.n_containers) as u64]),
    };
    let n = 1 + cfg.n_objects + cfg.n_containers + cfg.n_distractors;
    let sep = 2.0 * cfg.delta_place;
    let anchor = cfg.anchor(task);
    let gauss = Normal::new(0.0, cfg.sigma_layout).map_err(|e| DiscError::Config(e.to_string()))?;
    'attempt: for _ in 0..MAX_RESET_TRIES {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
        for i in 0..n {
            let p = if cfg.layout == Layout::Correlated && i == 1 + task.object {
                [anchor[0] + gauss.sample(&mut rng), anchor[1] + gauss.sample(&mut rng)]
            } else {
                [rng.random::<f64>(), rng.random::<f64>()]
            };
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) || pts.iter().any(|q| dist(*q, p) < sep) {
                continue 'attempt;
            }
            pts.push(p);
        }
        let o = 1 + cfg.n_objects;
        let c = o + cfg.n_containers;
        return Ok(SceneState {
            agent: pts[0],
            carrying: None,
            objects: pts[1..o].to_vec(),
            containers: pts[o..c].to_vec(),
            distractors: pts[c..].to_vec(),
            step: 0,
            first_placement: None,
        });
    }
    Err(DiscError::Config(format!("no valid layout after {MAX_RESET_TRIES} attempts")))
}

impl SceneState {
    /// Applies a raw action in place.
    pub fn apply(&mut self, cfg: &EnvConfig, action: &[f64]) {
        let clip = |v: f64, m: f64| if v.is_nan() { 0.0 } else { v.clamp(-m, m) };
        let dx = clip(action[0], cfg.a_max);
        let dy = clip(action[1], cfg.a_max);
        let g = clip(action[2], 1.0);
        self.agent = [(self.agent[0] + dx).clamp(0.0, 1.0), (self.agent[1] + dy).clamp(0.0, 1.0)];
        if let Some(c) = self.carrying {
            self.objects[c] = self.agent;
        }
        if g > 0.0 && self.carrying.is_none() {
            let nearest = self
                .objects
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist(*p, self.agent)))
                .filter(|(_, d)| *d < cfg.eps_grasp)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                self.carrying = Some(i);
                self.objects[i] = self.agent;
            }
        } else if g < 0.0 {
            if let Some(obj) = self.carrying.take() {
                let target = self
                    .containers
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (j, dist(*p, self.objects[obj])))
                    .filter(|(_, d)| *d < cfg.delta_place)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let (Some((j, _)), None) = (target, self.first_placement) {
                    self.first_placement = Some((obj, j));
                }
            }
        }
        self.step += 1;
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = |v: f64| 2.0 * v - 1.0;
        let mut o = Vec::with_capacity(3 + 2 * (self.objects.len() + self.containers.len() + self.distractors.len()));
        o.extend([s(self.agent[0]), s(self.agent[1])]);
        o.push(if self.carrying.is_some() { 1.0 } else { -1.0 });
        for p in self.objects.iter().chain(&self.containers).chain(&self.distractors) {
            o.extend([s(p[0]), s(p[1])]);
        }
        o
    }
}

pub fn env_step(cfg: &EnvConfig, state: &SceneState, action: &[f64]) -> SceneState {
    let mut next = state.clone();
    next.apply(cfg, action);
    next
}

/// Object `k` rests (not carried) strictly within `delta_place` of container `j`.
pub fn success(cfg: &EnvConfig, state: &SceneState, task: Task) -> bool {
    state.carrying != Some(task.object) && dist(state.objects[task.object], state.containers[task.container]) < cfg.delta_place
}

pub fn first_placement(state: &SceneState) -> Option<(usize, usize)> {
    state.first_placement
}

fn toward(from: [f64; 2], to: [f64; 2], a_max: f64) -> [f64; 2] {
    [(to[0] - from[0]).clamp(-a_max, a_max), (to[1] - from[1]).clamp(-a_max, a_max)]
}

/// Scripted expert, raw action scale.
pub fn expert_action(cfg: &EnvConfig, state: &SceneState, task: Task) -> [f64; 3] {
    match state.carrying {
        Some(c) if c == task.object => {
            let target = state.containers[task.container];
            let [dx, dy] = toward(state.agent, target, cfg.a_max);
            let g = if dist(state.agent, target) < cfg.delta_place / 2.0 { -1.0 } else { 1.0 };
            [dx, dy, g]
        }
        Some(_) => [0.0, 0.0, -1.0],
        None => {
            let target = state.objects[task.object];
            let [dx, dy] = toward(state.agent, target, cfg.a_max);
            let g = if dist(state.agent, target) < cfg.eps_grasp { 1.0 } else { -1.0 };
            [dx, dy, g]
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub first_placement: Option<(usize, usize)>,
}

/// Runs `act` (raw actions) from `state` until success or the horizon.
/// `record` sees every (observation, action) pair.
pub fn run_episode<A, R>(cfg: &EnvConfig, task: Task, mut state: SceneState, mut act: A, mut record: R) -> EpisodeOutcome
where
    A: FnMut(&SceneState, &[f64]) -> [f64; 3],
    R: FnMut(&[f64], &[f64; 3]),
{
    while state.step < cfg.horizon {
        let obs = state.observe();
        let a = act(&state, &obs);
        record(&obs, &a);
        state.apply(cfg, &a);
        if success(cfg, &state, task) {
            return EpisodeOutcome { success: true, steps: state.step, first_placement: state.first_placement };
        }
    }
    EpisodeOutcome { success: false, steps: state.step, first_placement: state.first_placement }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub task: [usize; 2],
    pub surface: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub episode: usize,
    pub t: usize,
}

impl Transition {
    pub fn task(&self) -> Task {
        Task::new(self.task[0], self.task[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvConfig,
    pub n_demos: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    /// Transitions of each `(task, episode)` in dataset order.
    pub fn episodes(&self) -> Vec<&[Transition]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            let split = i == self.transitions.len()
                || self.transitions[i].episode != self.transitions[start].episode
                || self.transitions[i].task != self.transitions[start].task;
            if split {
                out.push(&self.transitions[start..i]);
                start = i;
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &self.header)?;
        buf.push(b'\n');
        for t in &self.transitions {
            serde_json::to_writer(&mut buf, t)?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header: DatasetHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(DiscError::Format { offset: 0, msg: "empty dataset file".into() }),
        };
        let mut transitions = Vec::new();
        for l in lines {
            let l = l?;
            if !l.trim().is_empty() {
                transitions.push(serde_json::from_str(&l)?);
            }
        }
        Ok(Self { header, transitions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(crate::tensor::hex_string(&Sha256::digest(self.to_jsonl()?)))
    }
}

/// Expert demonstrations, `n_demos` successful episodes per task. Each
/// episode draws its reset from a seed derived from `(task, episode,
/// attempt)`, so the result does not depend on the execution mode.
pub fn generate_dataset(cfg: &EnvConfig, tasks: &[Task], n_demos: usize, seed: u64, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    let jobs: Vec<(Task, usize)> = tasks.iter().flat_map(|&t| (0..n_demos).map(move |e| (t, e))).collect();
    let episodes = par::map_slice(exec, &jobs, |&(task, ep)| -> Result<(Vec<Transition>, usize)> {
        let ti = task.index(cfg.n_containers) as u64;
        for attempt in 0..100u64 {
            let ep_seed = seed::derive(seed, &[ti, ep as u64, attempt]);
            let state = env_reset(cfg, task, ep_seed)?;
            let mut surf_rng = seed::rng(ep_seed, &[7]);
            let mut steps = Vec::new();
            let out = run_episode(cfg, task, state, |s, _| expert_action(cfg, s, task), |o, a| {
                steps.push(Transition {
                    task: [task.object, task.container],
                    surface: surf_rng.random_range(0..TRAIN_SURFACES),
                    obs: o.to_vec(),
                    act: a.to_vec(),
                    episode: ep,
                    t: steps.len(),
                })
            });
            if out.success {
                return Ok((steps, attempt as usize));
            }
        }
        Err(DiscError::Generation(format!("expert never succeeded on task {task:?} episode {ep}")))
    });
    let mut transitions = Vec::new();
    let mut failures = 0;
    for e in episodes {
        let (steps, fails) = e?;
        failures += fails;
        transitions.extend(steps);
    }
    if failures * 100 > jobs.len() {
        return Err(DiscError::Generation(format!("expert failed {failures} of {} episodes", jobs.len())));
    }
    Ok(Dataset {
        header: DatasetHeader { config_hash: cfg.hash(), seed, env: cfg.clone(), n_demos },
        transitions,
    })
}
