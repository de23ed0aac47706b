//! One interface over every trainable model: `(instruction, observation)
//! -> action`, a parameter set, and a checkpoint round trip.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{solve_width, BoundMlp, ConcatMlp, DirectHypernet, FilmMlp};
use crate::checkpoint::Checkpoint;
use crate::error::{DiscError, Result};
use crate::hypernet::{Disc, HypernetConfig, InitMode};
use crate::lang::TaskEmbedding;
use crate::policy::{forward_graph, param_count, PolicyArch, PolicyParams};
use crate::seed;
use crate::tensor::{Bound, Graph, ParamSet, TensorError, Var};

type GResult<T> = std::result::Result<T, TensorError>;

/// Relative tolerance of the width solver.
pub const PARAM_MATCH_TOL: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Disc,
    DiscNoWin,
    DiscWinOnly,
    DirectHypernet,
    ConcatMlp,
    FilmMlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Disc,
        ModelKind::DiscNoWin,
        ModelKind::DiscWinOnly,
        ModelKind::DirectHypernet,
        ModelKind::ConcatMlp,
        ModelKind::FilmMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Disc => "disc",
            ModelKind::DiscNoWin => "disc-no-win",
            ModelKind::DiscWinOnly => "disc-win-only",
            ModelKind::DirectHypernet => "direct-hypernet",
            ModelKind::ConcatMlp => "concat-mlp",
            ModelKind::FilmMlp => "film-mlp",
        }
    }

    /// Models that emit target-policy weights.
    pub fn is_generator(self) -> bool {
        !matches!(self, ModelKind::ConcatMlp | ModelKind::FilmMlp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = DiscError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DiscError::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Full DISC configuration; the ablations derive from it and the
    /// entangled baselines are sized against it.
    pub hyper: HypernetConfig,
    pub direct_hidden: usize,
    /// Hidden width of concat/FiLM; solved when absent.
    pub width: Option<usize>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, hyper: HypernetConfig) -> Self {
        Self { kind, hyper, direct_hidden: DirectHypernet::HIDDEN, width: None }
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.hyper.arch
    }

    /// Generator configuration after applying the ablation.
    pub fn disc_config(&self) -> HypernetConfig {
        let mut h = self.hyper.clone();
        match self.kind {
            ModelKind::DiscNoWin => h.init = InitMode::Constant,
            ModelKind::DiscWinOnly => h.refine_steps = 0,
            _ => h.init = InitMode::Win,
        }
        h
    }

    /// Full DISC trainable parameters plus the generated policy.
    pub fn reference_total(&self) -> Result<usize> {
        let mut h = self.hyper.clone();
        h.init = InitMode::Win;
        Ok(disc_numel(&h)? + param_count(&h.arch))
    }

    /// Fills in the baseline width from the parameter budget.
    pub fn resolved(mut self) -> Result<Self> {
        if self.width.is_none() && matches!(self.kind, ModelKind::ConcatMlp | ModelKind::FilmMlp) {
            let target = self.reference_total()?;
            let (o, l, a) = (self.arch().obs_dim(), self.hyper.d_lang, self.arch().act_dim());
            let w = match self.kind {
                ModelKind::ConcatMlp => solve_width(|w| ConcatMlp::numel_for(o, l, w, a), target, PARAM_MATCH_TOL)?,
                _ => solve_width(|w| FilmMlp::numel_for(o, l, w, a), target, PARAM_MATCH_TOL)?,
            };
            self.width = Some(w);
        }
        Ok(self)
    }
}

/// Trainable parameter count of a generator configuration.
pub fn disc_numel(h: &HypernetConfig) -> Result<usize> {
    let mut rng = seed::rng(0, &[]);
    Ok(Disc::new(h.clone(), &mut rng)?.params().numel())
}

#[derive(Clone, Debug)]
enum Inner {
    Disc(Box<Disc>),
    Direct { ps: ParamSet, net: DirectHypernet },
    Concat { ps: ParamSet, net: ConcatMlp },
    Film { ps: ParamSet, net: FilmMlp },
}

/// Instruction-fixed controller used at rollout time.
#[derive(Clone, Debug)]
pub enum Controller {
    Policy(PolicyParams),
    Entangled(BoundMlp),
}

impl Controller {
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        match self {
            Controller::Policy(p) => p.act(obs),
            Controller::Entangled(m) => m.act(obs),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    inner: Inner,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let mut rng = seed::rng(seed, &[0x6d6f_64656c]);
        let h = &cfg.hyper;
        let (o, l, a) = (h.arch.obs_dim(), h.d_lang, h.arch.act_dim());
        let inner = match cfg.kind {
            ModelKind::Disc | ModelKind::DiscNoWin | ModelKind::DiscWinOnly => {
                Inner::Disc(Box::new(Disc::new(cfg.disc_config(), &mut rng)?))
            }
            ModelKind::DirectHypernet => {
                let mut ps = ParamSet::new();
                let net = DirectHypernet::new(&mut ps, &h.arch, l, cfg.direct_hidden, &mut rng);
                Inner::Direct { ps, net }
            }
            ModelKind::ConcatMlp => {
                let mut ps = ParamSet::new();
                let net = ConcatMlp::new(&mut ps, o, l, cfg.width.unwrap(), a, &mut rng);
                Inner::Concat { ps, net }
            }
            ModelKind::FilmMlp => {
                let mut ps = ParamSet::new();
                let net = FilmMlp::new(&mut ps, o, l, cfg.width.unwrap(), a, &mut rng);
                Inner::Film { ps, net }
            }
        };
        Ok(Self { cfg, inner })
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn arch(&self) -> &PolicyArch {
        self.cfg.arch()
    }

    pub fn params(&self) -> &ParamSet {
        match &self.inner {
            Inner::Disc(m) => m.params(),
            Inner::Direct { ps, .. } | Inner::Concat { ps, .. } | Inner::Film { ps, .. } => ps,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match &mut self.inner {
            Inner::Disc(m) => m.params_mut(),
            Inner::Direct { ps, .. } | Inner::Concat { ps, .. } | Inner::Film { ps, .. } => ps,
        }
    }

    /// Trainable parameters, counting a generator's output policy too.
    pub fn matched_count(&self) -> usize {
        let n = self.params().numel();
        if self.kind().is_generator() {
            n + param_count(self.arch())
        } else {
            n
        }
    }

    pub fn disc(&self) -> Option<&Disc> {
        match &self.inner {
            Inner::Disc(m) => Some(m),
            _ => None,
        }
    }

    pub fn concat(&self) -> Option<&ConcatMlp> {
        match &self.inner {
            Inner::Concat { net, .. } => Some(net),
            _ => None,
        }
    }

    /// Generated policy layers inside `g`; `None` for entangled models.
    pub fn generate_layers(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding) -> GResult<Option<Vec<Var>>> {
        match &self.inner {
            Inner::Disc(m) => m.generate_layers(g, p, emb).map(Some),
            Inner::Direct { net, .. } => net.generate_layers(g, p, emb).map(Some),
            _ => Ok(None),
        }
    }

    /// Actions for a batch of observations `n x obs_dim` under one instruction.
    pub fn predict(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding, obs: Var) -> GResult<Var> {
        match &self.inner {
            Inner::Concat { net, .. } => net.forward(g, p, emb, obs),
            Inner::Film { net, .. } => net.forward(g, p, emb, obs),
            _ => {
                let layers = self.generate_layers(g, p, emb)?.expect("generator");
                forward_graph(g, &layers, obs)
            }
        }
    }

    /// `θ_π` for generators.
    pub fn generate(&self, emb: &TaskEmbedding) -> Result<Option<PolicyParams>> {
        match &self.inner {
            Inner::Disc(m) => m.generate(emb).map(Some),
            Inner::Direct { ps, net } => net.generate(ps, emb).map(Some),
            _ => Ok(None),
        }
    }

    /// Fixes the instruction once; the result acts without it.
    pub fn controller(&self, emb: &TaskEmbedding) -> Result<Controller> {
        match &self.inner {
            Inner::Concat { ps, net } => Ok(Controller::Entangled(net.bind(ps, emb)?)),
            Inner::Film { ps, net } => Ok(Controller::Entangled(net.bind(ps, emb)?)),
            _ => Ok(Controller::Policy(self.generate(emb)?.expect("generator"))),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.kind().name(), serde_json::to_string(&self.cfg)?, self.params()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&ck.config)?;
        if cfg.kind.name() != ck.kind {
            return Err(DiscError::Format { offset: 0, msg: format!("kind `{}` but config says `{}`", ck.kind, cfg.kind) });
        }
        let mut m = Self::new(cfg, 0)?;
        ck.load_into(m.params_mut())?;
        Ok(m)
    }
}
