//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Unknown
//! or repeated keys and unparsable values are configuration errors. The
//! defaults are the desk preset; `docs/config.md` lists every key.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{DiscError, Result};
use crate::eval::{AdaptConfig, EVAL_EPISODES};
use crate::hypernet::{HypernetConfig, InitMode};
use crate::lang::{LexiconConfig, Task};
use crate::model::{ModelConfig, ModelKind};
use crate::par::Exec;
use crate::policy::PolicyArch;
use crate::sim::{EnvConfig, Layout};
use crate::tensor::hex_string;
use crate::train::TrainConfig;

/// Target-policy size preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyPreset {
    /// Three hidden layers of 32.
    Desk,
    /// Four hidden layers of 320.
    Wide,
}

impl FromStr for PolicyPreset {
    type Err = DiscError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "wide" => Ok(Self::Wide),
            _ => Err(DiscError::Config(format!("unknown policy preset `{s}`"))),
        }
    }
}

impl Display for PolicyPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Wide => "wide",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub lexicon: LexiconConfig,
    pub model: ModelKind,
    pub policy: PolicyPreset,
    pub d: usize,
    pub heads: usize,
    pub win_blocks: usize,
    pub refine_steps: usize,
    pub direct_hidden: usize,
    pub width: Option<usize>,
    pub train: TrainConfig,
    /// Expert demonstrations per task.
    pub demos: usize,
    /// Task left out of the training data, for few-shot adaptation.
    pub exclude_task: Option<Task>,
    pub eval_episodes: usize,
    pub adapt: AdaptConfig,
    /// Demonstrations given to few-shot adaptation.
    pub shots: usize,
    pub adapt_task: Task,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            lexicon: LexiconConfig::default(),
            model: ModelKind::Disc,
            policy: PolicyPreset::Desk,
            d: 16,
            heads: 4,
            win_blocks: 4,
            refine_steps: 3,
            direct_hidden: crate::baselines::DirectHypernet::HIDDEN,
            width: None,
            train: TrainConfig { steps: 3000, lr: 2e-3, batch_size: 512, checkpoint_every: 1000, log_every: 250, ..TrainConfig::default() },
            demos: 100,
            exclude_task: None,
            eval_episodes: EVAL_EPISODES,
            adapt: AdaptConfig::default(),
            shots: 3,
            adapt_task: Task::new(2, 2),
            exec: Exec::Parallel,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| DiscError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_exec(v: &str) -> Result<Exec> {
    match v {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        _ => Err(DiscError::Config(format!("`exec`: expected parallel or sequential, got `{v}`"))),
    }
}

fn parse_task(key: &str, v: &str) -> Result<Task> {
    let (o, c) = v.split_once(',').ok_or_else(|| DiscError::Config(format!("`{key}`: expected `object,container`, got `{v}`")))?;
    Ok(Task::new(parse(key, o.trim())?, parse(key, c.trim())?))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

impl RunConfig {
    /// Every accepted key, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "n_objects",
        "n_containers",
        "n_distractors",
        "eps_grasp",
        "delta_place",
        "a_max",
        "horizon",
        "layout",
        "sigma_layout",
        "n_fillers",
        "surfaces",
        "sigma_syn",
        "d_lang",
        "lexicon_seed",
        "model",
        "policy",
        "d",
        "heads",
        "win_blocks",
        "refine_steps",
        "direct_hidden",
        "width",
        "steps",
        "lr",
        "batch_size",
        "weight_decay",
        "beta1",
        "beta2",
        "grad_clip",
        "checkpoint_every",
        "log_every",
        "paraphrase",
        "demos",
        "exclude_task",
        "eval_episodes",
        "adapt_steps",
        "adapt_eta",
        "adapt_checkpoints",
        "adapt_eval_episodes",
        "shots",
        "adapt_task",
        "exec",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_objects" => {
                self.env.n_objects = parse(key, v)?;
                self.lexicon.n_objects = self.env.n_objects;
            }
            "n_containers" => {
                self.env.n_containers = parse(key, v)?;
                self.lexicon.n_containers = self.env.n_containers;
            }
            "n_distractors" => self.env.n_distractors = parse(key, v)?,
            "eps_grasp" => self.env.eps_grasp = parse(key, v)?,
            "delta_place" => self.env.delta_place = parse(key, v)?,
            "a_max" => self.env.a_max = parse(key, v)?,
            "horizon" => self.env.horizon = parse(key, v)?,
            "layout" => self.env.layout = parse::<Layout>(key, v)?,
            "sigma_layout" => self.env.sigma_layout = parse(key, v)?,
            "n_fillers" => self.lexicon.n_fillers = parse(key, v)?,
            "surfaces" => self.lexicon.surfaces = parse(key, v)?,
            "sigma_syn" => self.lexicon.sigma_syn = parse(key, v)?,
            "d_lang" => self.lexicon.d_lang = parse(key, v)?,
            "lexicon_seed" => self.lexicon.seed = parse(key, v)?,
            "model" => self.model = parse(key, v)?,
            "policy" => self.policy = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "win_blocks" => self.win_blocks = parse(key, v)?,
            "refine_steps" => self.refine_steps = parse(key, v)?,
            "direct_hidden" => self.direct_hidden = parse(key, v)?,
            "width" => self.width = optional(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "grad_clip" => self.train.grad_clip = optional(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "log_every" => self.train.log_every = parse(key, v)?,
            "paraphrase" => self.train.paraphrase = parse(key, v)?,
            "demos" => self.demos = parse(key, v)?,
            "exclude_task" => self.exclude_task = if v == "none" { None } else { Some(parse_task(key, v)?) },
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "adapt_steps" => self.adapt.steps = parse(key, v)?,
            "adapt_eta" => self.adapt.eta = parse(key, v)?,
            "adapt_checkpoints" => self.adapt.checkpoints = parse_list(key, v)?,
            "adapt_eval_episodes" => self.adapt.eval_episodes = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "adapt_task" => self.adapt_task = parse_task(key, v)?,
            "exec" => self.exec = parse_exec(v)?,
            _ => return Err(DiscError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "n_objects" => self.env.n_objects.to_string(),
            "n_containers" => self.env.n_containers.to_string(),
            "n_distractors" => self.env.n_distractors.to_string(),
            "eps_grasp" => self.env.eps_grasp.to_string(),
            "delta_place" => self.env.delta_place.to_string(),
            "a_max" => self.env.a_max.to_string(),
            "horizon" => self.env.horizon.to_string(),
            "layout" => match self.env.layout {
                Layout::Decorrelated => "decorrelated".into(),
                Layout::Correlated => "correlated".into(),
            },
            "sigma_layout" => self.env.sigma_layout.to_string(),
            "n_fillers" => self.lexicon.n_fillers.to_string(),
            "surfaces" => self.lexicon.surfaces.to_string(),
            "sigma_syn" => self.lexicon.sigma_syn.to_string(),
            "d_lang" => self.lexicon.d_lang.to_string(),
            "lexicon_seed" => self.lexicon.seed.to_string(),
            "model" => self.model.to_string(),
            "policy" => self.policy.to_string(),
            "d" => self.d.to_string(),
            "heads" => self.heads.to_string(),
            "win_blocks" => self.win_blocks.to_string(),
            "refine_steps" => self.refine_steps.to_string(),
            "direct_hidden" => self.direct_hidden.to_string(),
            "width" => show_opt(&self.width),
            "steps" => self.train.steps.to_string(),
            "lr" => self.train.lr.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "grad_clip" => show_opt(&self.train.grad_clip),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "log_every" => self.train.log_every.to_string(),
            "paraphrase" => self.train.paraphrase.to_string(),
            "demos" => self.demos.to_string(),
            "exclude_task" => self.exclude_task.map_or("none".into(), |t| format!("{},{}", t.object, t.container)),
            "eval_episodes" => self.eval_episodes.to_string(),
            "adapt_steps" => self.adapt.steps.to_string(),
            "adapt_eta" => self.adapt.eta.to_string(),
            "adapt_checkpoints" => self.adapt.checkpoints.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "adapt_eval_episodes" => self.adapt.eval_episodes.to_string(),
            "shots" => self.shots.to_string(),
            "adapt_task" => format!("{},{}", self.adapt_task.object, self.adapt_task.container),
            "exec" => match self.exec {
                Exec::Parallel => "parallel".into(),
                Exec::Sequential => "sequential".into(),
            },
            _ => return Err(DiscError::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DiscError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(DiscError::Config(format!("line {}: `{k}` set twice", n + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                DiscError::Config(m) => DiscError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DiscError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line; parses back to `self`.
    pub fn render(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    /// SHA-256 of [`RunConfig::render`], recorded in output provenance.
    pub fn hash(&self) -> String {
        hex_string(&Sha256::digest(self.render().as_bytes()))
    }

    /// Provenance line for emitted files.
    pub fn provenance(&self, seed: u64) -> String {
        format!("config_hash={} seed={seed}", self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.lexicon.n_objects != self.env.n_objects || self.lexicon.n_containers != self.env.n_containers {
            return Err(DiscError::Config("lexicon and scene disagree on the task grid".into()));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DiscError::Config(format!("token width {} must be a positive multiple of heads {}", self.d, self.heads)));
        }
        if self.demos == 0 || self.eval_episodes == 0 {
            return Err(DiscError::Config("demos and eval_episodes must be positive".into()));
        }
        if let Some(t) = self.exclude_task {
            if t.object >= self.env.n_objects || t.container >= self.env.n_containers {
                return Err(DiscError::Config(format!("exclude_task {t:?} outside the task grid")));
            }
        }
        if self.adapt_task.object >= self.env.n_objects || self.adapt_task.container >= self.env.n_containers {
            return Err(DiscError::Config(format!("adapt_task {:?} outside the task grid", self.adapt_task)));
        }
        Ok(())
    }

    pub fn arch(&self) -> PolicyArch {
        let (o, a) = (self.env.obs_dim(), self.env.act_dim());
        match self.policy {
            PolicyPreset::Desk => PolicyArch::desk(o, a),
            PolicyPreset::Wide => PolicyArch::wide(o, a),
        }
    }

    pub fn hyper(&self) -> HypernetConfig {
        HypernetConfig {
            d: self.d,
            heads: self.heads,
            win_blocks: self.win_blocks,
            refine_steps: self.refine_steps,
            d_lang: self.lexicon.d_lang,
            arch: self.arch(),
            init: InitMode::Win,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { direct_hidden: self.direct_hidden, width: self.width, ..ModelConfig::new(self.model, self.hyper()) }
    }

    /// Tasks with training data: the full grid minus `exclude_task`.
    pub fn train_tasks(&self) -> Vec<Task> {
        self.env.tasks().into_iter().filter(|t| Some(*t) != self.exclude_task).collect()
    }

    /// Same configuration with another model kind.
    pub fn with_model(&self, kind: ModelKind) -> Self {
        Self { model: kind, ..self.clone() }
    }
}
