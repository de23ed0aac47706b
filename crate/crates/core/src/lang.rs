//! Synthetic instruction language and its frozen encoder.
//!
//! Every concept (verb, object, container, filler word) owns a base vector;
//! each of its surface forms is the base vector plus Gaussian noise, then
//! normalized. Paraphrases of one concept therefore land near each other,
//! which is what a pretrained sentence encoder provides for real synonyms.
//! Embedding tables are regenerated from the seed and never stored.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiscError, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Surface forms reserved for training per concept.
pub const TRAIN_SURFACES: usize = 50;
/// Surface forms held out for paraphrase evaluation per concept.
pub const HELDOUT_SURFACES: usize = 10;
/// Longest accepted instruction, in tokens.
pub const MAX_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub object: usize,
    pub container: usize,
}

impl Task {
    pub fn new(object: usize, container: usize) -> Self {
        Self { object, container }
    }

    /// Row-major index in an `n_objects x n_containers` grid.
    pub fn index(&self, n_containers: usize) -> usize {
        self.object * n_containers + self.container
    }
}

/// All (object, container) pairs, object-major.
pub fn all_tasks(n_objects: usize, n_containers: usize) -> Vec<Task> {
    (0..n_objects).flat_map(|k| (0..n_containers).map(move |j| Task::new(k, j))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Verb,
    Object,
    Container,
    Filler,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub role: Role,
    /// Index among concepts of the same role.
    pub slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn size(self) -> usize {
        match self {
            Split::Train => TRAIN_SURFACES,
            Split::Heldout => HELDOUT_SURFACES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconConfig {
    pub n_objects: usize,
    pub n_containers: usize,
    pub n_fillers: usize,
    pub surfaces: usize,
    pub sigma_syn: f64,
    pub d_lang: usize,
    pub seed: u64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self { n_objects: 3, n_containers: 3, n_fillers: 2, surfaces: 60, sigma_syn: 0.1, d_lang: 64, seed: 0 }
    }
}

/// Disjoint train / held-out surface ids of one concept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceSplit {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Lexicon {
    cfg: LexiconConfig,
    concepts: Vec<Concept>,
    base: Vec<Vec<f64>>,
    // concept -> surface -> unit vector
    table: Vec<Vec<Vec<f64>>>,
    splits: Vec<SurfaceSplit>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    config: LexiconConfig,
    concepts: Vec<Concept>,
}

/// One token: a surface form of a concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub concept: usize,
    pub surface: usize,
}

/// Identifies one instruction: task, paraphrase split and paraphrase index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstructionKey {
    pub task: Task,
    pub split: Split,
    pub paraphrase: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub key: InstructionKey,
    pub tokens: Vec<Token>,
}

impl Instruction {
    pub fn task(&self) -> Task {
        self.key.task
    }
}

/// Frozen-encoder output: one unit-norm row per token plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
}

impl TaskEmbedding {
    pub fn from_tokens(tokens: Tensor) -> Self {
        let (l, d) = tokens.shape();
        let mut pooled = vec![0.0; d];
        for r in 0..l {
            for (p, v) in pooled.iter_mut().zip(tokens.row(r)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= l.max(1) as f64);
        Self { tokens, pooled }
    }

    /// All-zero tokens of the same shape, used by instruction-blind probes.
    pub fn zeroed(&self) -> Self {
        let (l, d) = self.tokens.shape();
        Self { tokens: Tensor::zeros(l, d), pooled: vec![0.0; d] }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn gaussian_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl Lexicon {
    /// Builds concept and surface tables. Base vectors are
    /// `N(0, I/d_lang)`; a surface is `normalize(base + sigma_syn * n)` with
    /// `n ~ N(0, I)` drawn per surface.
    pub fn build(cfg: LexiconConfig) -> Result<Self> {
        if cfg.surfaces < TRAIN_SURFACES + HELDOUT_SURFACES {
            return Err(DiscError::Config(format!(
                "lexicon needs at least {} surfaces per concept for the train/held-out split, got {}",
                TRAIN_SURFACES + HELDOUT_SURFACES,
                cfg.surfaces
            )));
        }
        if cfg.d_lang == 0 || cfg.n_objects == 0 || cfg.n_containers == 0 {
            return Err(DiscError::Config("lexicon dimensions must be positive".into()));
        }
        if !(cfg.sigma_syn >= 0.0) {
            return Err(DiscError::Config(format!("sigma_syn must be >= 0, got {}", cfg.sigma_syn)));
        }
        let mut concepts = vec![Concept { id: 0, role: Role::Verb, slot: 0 }];
        for (role, n) in [(Role::Object, cfg.n_objects), (Role::Container, cfg.n_containers), (Role::Filler, cfg.n_fillers)]
        {
            for slot in 0..n {
                concepts.push(Concept { id: concepts.len(), role, slot });
            }
        }
        Ok(Self::from_parts(cfg, concepts))
    }

    fn from_parts(cfg: LexiconConfig, concepts: Vec<Concept>) -> Self {
        let d = cfg.d_lang;
        let base: Vec<Vec<f64>> = concepts
            .iter()
            .map(|c| gaussian_vec(&mut seed::rng(cfg.seed, &[0, c.id as u64]), d, 1.0 / (d as f64).sqrt()))
            .collect();
        let table = concepts
            .iter()
            .map(|c| {
                (0..cfg.surfaces)
                    .map(|s| {
                        let mut rng = seed::rng(cfg.seed, &[1, c.id as u64, s as u64]);
                        let noise = gaussian_vec(&mut rng, d, cfg.sigma_syn);
                        let mut v: Vec<f64> = base[c.id].iter().zip(&noise).map(|(b, n)| b + n).collect();
                        normalize(&mut v);
                        v
                    })
                    .collect()
            })
            .collect();
        let splits = concepts
            .iter()
            .map(|c| {
                let mut ids: Vec<usize> = (0..cfg.surfaces).collect();
                ids.shuffle(&mut seed::rng(cfg.seed, &[2, c.id as u64]));
                SurfaceSplit {
                    train: ids[..TRAIN_SURFACES].to_vec(),
                    heldout: ids[TRAIN_SURFACES..TRAIN_SURFACES + HELDOUT_SURFACES].to_vec(),
                }
            })
            .collect();
        Self { cfg, concepts, base, table, splits }
    }

    pub fn config(&self) -> &LexiconConfig {
        &self.cfg
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn d_lang(&self) -> usize {
        self.cfg.d_lang
    }

    pub fn tasks(&self) -> Vec<Task> {
        all_tasks(self.cfg.n_objects, self.cfg.n_containers)
    }

    fn concept_of(&self, role: Role, slot: usize) -> usize {
        self.concepts.iter().find(|c| c.role == role && c.slot == slot).map(|c| c.id).expect("concept exists")
    }

    pub fn base_vector(&self, concept: usize) -> &[f64] {
        &self.base[concept]
    }

    pub fn surface_vector(&self, concept: usize, surface: usize) -> Result<&[f64]> {
        self.table
            .get(concept)
            .and_then(|t| t.get(surface))
            .map(|v| v.as_slice())
            .ok_or_else(|| DiscError::Lookup(format!("no surface {surface} for concept {concept}")))
    }

    /// Per-concept 50/10 surface split.
    pub fn paraphrase_split(&self) -> &[SurfaceSplit] {
        &self.splits
    }

    /// Instruction for `task` using paraphrase `paraphrase` of `split`. Every
    /// slot uses the same paraphrase index into its concept's split list;
    /// the paraphrase index also decides which filler words appear.
    pub fn instruction(&self, task: Task, split: Split, paraphrase: usize) -> Result<Instruction> {
        if task.object >= self.cfg.n_objects || task.container >= self.cfg.n_containers {
            return Err(DiscError::Lookup(format!("task {task:?} outside the lexicon")));
        }
        if paraphrase >= split.size() {
            return Err(DiscError::Lookup(format!("paraphrase {paraphrase} outside the {} split", split.name())));
        }
        let surface = |concept: usize| {
            let s = &self.splits[concept];
            match split {
                Split::Train => s.train[paraphrase],
                Split::Heldout => s.heldout[paraphrase],
            }
        };
        let tok = |concept: usize| Token { concept, surface: surface(concept) };
        let mut tokens = vec![tok(self.concept_of(Role::Verb, 0))];
        let fillers = paraphrase % 3;
        if fillers >= 1 && self.cfg.n_fillers >= 1 {
            tokens.push(tok(self.concept_of(Role::Filler, 0)));
        }
        tokens.push(tok(self.concept_of(Role::Object, task.object)));
        if fillers >= 2 && self.cfg.n_fillers >= 2 {
            tokens.push(tok(self.concept_of(Role::Filler, 1)));
        }
        tokens.push(tok(self.concept_of(Role::Container, task.container)));
        Ok(Instruction { key: InstructionKey { task, split, paraphrase }, tokens })
    }

    /// Digest of all embedding tables; unchanged by any training run.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.table {
            for s in c {
                for v in s {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        crate::tensor::hex_string(&h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LexiconFile { config: self.cfg.clone(), concepts: self.concepts.clone() })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: LexiconFile = serde_json::from_str(s)?;
        if f.config.surfaces < TRAIN_SURFACES + HELDOUT_SURFACES {
            return Err(DiscError::Config("lexicon file has too few surfaces".into()));
        }
        Ok(Self::from_parts(f.config, f.concepts))
    }
}

/// Frozen encoder: looks up each token's surface vector.
pub fn encode_instruction(instr: &Instruction, lex: &Lexicon) -> Result<TaskEmbedding> {
    if instr.tokens.is_empty() {
        return Err(DiscError::Contract("empty instruction".into()));
    }
    if instr.tokens.len() > MAX_TOKENS {
        return Err(DiscError::Contract(format!(
            "instruction has {} tokens, maximum is {MAX_TOKENS}",
            instr.tokens.len()
        )));
    }
    let d = lex.d_lang();
    let mut data = Vec::with_capacity(instr.tokens.len() * d);
    for t in &instr.tokens {
        data.extend_from_slice(lex.surface_vector(t.concept, t.surface)?);
    }
    Ok(TaskEmbedding::from_tokens(Tensor::from_vec(instr.tokens.len(), d, data)?))
}
