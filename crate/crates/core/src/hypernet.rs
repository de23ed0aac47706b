//! Two-stage policy generator.
//!
//! The weight initialization network (WIN) turns instruction tokens into a
//! first guess `θ⁽⁰⁾`: one learnable query per policy row attends to the
//! projected instruction through a small transformer, and a per-layer
//! decoder reads each query out as `[W_r | b_r]`.
//!
//! The refiner then applies `T` tied update steps. Each step tokenizes the
//! current rows (`ω_i`), simulates a forward pass (`τ_i`), a backward pass
//! (pseudo-gradients `∂L/∂z_i` and row gradients `∇ω_i`) and decodes a
//! row update `Δθ`. No loss or demonstration is involved at generation time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::lang::TaskEmbedding;
use crate::nn::{Act, CrossAttn, LayerNorm, Linear, Mlp};
use crate::policy::{check_layers, PolicyArch, PolicyParams};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, TensorError, Var};

type GResult<T> = std::result::Result<T, TensorError>;

/// How `θ⁽⁰⁾` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Win,
    /// One learned, task-independent parameter vector.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub d: usize,
    pub heads: usize,
    pub win_blocks: usize,
    pub refine_steps: usize,
    pub d_lang: usize,
    pub arch: PolicyArch,
    pub init: InitMode,
}

impl HypernetConfig {
    /// Token width 128, 4 heads, 4 WIN blocks, 3 refinement steps.
    pub fn paper(d_lang: usize, arch: PolicyArch) -> Self {
        Self { d: 128, heads: 4, win_blocks: 4, refine_steps: 3, d_lang, arch, init: InitMode::Win }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DiscError::Config(format!("token dim {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.init == InitMode::Win && self.win_blocks == 0 {
            return Err(DiscError::Config("WIN needs at least one block".into()));
        }
        if self.d_lang == 0 {
            return Err(DiscError::Config("d_lang must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct WinBlock {
    self_attn: CrossAttn,
    cross_attn: CrossAttn,
    ffn: Mlp,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Win {
    queries: ParamId,
    lang: Linear,
    blocks: Vec<WinBlock>,
    decoders: Vec<Linear>,
}

#[derive(Clone, Debug)]
struct Refiner {
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
    fwd_lang: Linear,
    tau0_queries: ParamId,
    tau0: CrossAttn,
    fwd: CrossAttn,
    bwd_lang: Linear,
    top: CrossAttn,
    jac_h: CrossAttn,
    jac_theta: CrossAttn,
    grad_omega: CrossAttn,
    grad_z: CrossAttn,
}

/// Pseudo-gradient tokens of one backward simulation. Index `i` refers to
/// policy layer `i + 1`.
#[derive(Clone, Debug)]
pub struct GradTokens {
    pub dz: Vec<Var>,
    pub grad_omega: Vec<Var>,
    pub jac_h: Vec<Var>,
    pub jac_theta: Vec<Var>,
}

/// Intermediate token sets of one refinement step, for inspection.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub omega: Vec<Var>,
    pub tau: Vec<Var>,
    pub grads: GradTokens,
    pub delta: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Disc {
    pub cfg: HypernetConfig,
    ps: ParamSet,
    win: Option<Win>,
    theta0: Vec<ParamId>,
    refiner: Option<Refiner>,
}

impl Disc {
    pub fn new<R: Rng + ?Sized>(cfg: HypernetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let (d, h) = (cfg.d, cfg.heads);
        let shapes = cfg.arch.layer_shapes();

        let mut win = None;
        let mut theta0 = Vec::new();
        match cfg.init {
            InitMode::Win => {
                let queries = ps.add("win.queries", Tensor::randn(cfg.arch.total_rows(), d, 1.0, rng));
                let lang = Linear::new(&mut ps, "win.lang", cfg.d_lang, d, rng);
                let blocks = (0..cfg.win_blocks)
                    .map(|b| WinBlock {
                        self_attn: CrossAttn::new(&mut ps, &format!("win.{b}.self"), d, h, rng),
                        cross_attn: CrossAttn::new(&mut ps, &format!("win.{b}.cross"), d, h, rng),
                        ffn: Mlp::new(&mut ps, &format!("win.{b}.ffn"), &[d, 2 * d, d], Act::Relu, rng),
                        ffn_norm: LayerNorm::new(&mut ps, &format!("win.{b}.ffn_ln"), d),
                    })
                    .collect();
                // decoded rows start near a standard `1/sqrt(fan_in)` initialization
                let decoders = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, &(_, cols))| {
                        let bound = (3.0 / (d * cols) as f64).sqrt();
                        Linear::with_scale(&mut ps, &format!("win.dec.{i}"), d, cols, bound, rng)
                    })
                    .collect();
                win = Some(Win { queries, lang, blocks, decoders });
            }
            InitMode::Constant => {
                for (i, &(rows, cols)) in shapes.iter().enumerate() {
                    let bound = 1.0 / ((cols - 1) as f64).sqrt();
                    let mut t = Tensor::uniform(rows, cols, bound, rng);
                    for r in 0..rows {
                        t.set(r, cols - 1, 0.0);
                    }
                    theta0.push(ps.add(format!("theta0.{i}"), t));
                }
            }
        }

        let refiner = (cfg.refine_steps > 0).then(|| Refiner {
            encoders: shapes
                .iter()
                .enumerate()
                .map(|(i, &(_, cols))| Mlp::new(&mut ps, &format!("ref.enc.{i}"), &[cols, d, d], Act::Relu, rng))
                .collect(),
            decoders: shapes
                .iter()
                .enumerate()
                .map(|(i, &(_, cols))| Mlp::zero_last(&mut ps, &format!("ref.dec.{i}"), &[d, d, cols], Act::Relu, rng))
                .collect(),
            fwd_lang: Linear::new(&mut ps, "ref.fwd.lang", cfg.d_lang, d, rng),
            tau0_queries: ps.add("ref.tau0.queries", Tensor::randn(cfg.arch.obs_dim(), d, 1.0, rng)),
            tau0: CrossAttn::new(&mut ps, "ref.tau0", d, h, rng),
            fwd: CrossAttn::new(&mut ps, "ref.fwd", d, h, rng),
            bwd_lang: Linear::new(&mut ps, "ref.bwd.lang", cfg.d_lang, d, rng),
            top: CrossAttn::new(&mut ps, "ref.top", d, h, rng),
            jac_h: CrossAttn::new(&mut ps, "ref.jac_h", d, h, rng),
            jac_theta: CrossAttn::new(&mut ps, "ref.jac_theta", d, h, rng),
            grad_omega: CrossAttn::new(&mut ps, "ref.grad_omega", d, h, rng),
            grad_z: CrossAttn::new(&mut ps, "ref.grad_z", d, h, rng),
        });
        Ok(Self { cfg, ps, win, theta0, refiner })
    }

    pub fn params(&self) -> &ParamSet {
        &self.ps
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.ps
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.cfg.arch
    }

    /// Trainable parameters that belong to the refiner.
    pub fn refiner_numel(&self) -> usize {
        self.ps.iter().filter(|(n, _)| n.starts_with("ref.")).map(|(_, t)| t.len()).sum()
    }

    fn lang_tokens(&self, g: &mut Graph, emb: &TaskEmbedding) -> GResult<Var> {
        if emb.tokens.rows() == 0 {
            return Err(TensorError::Contract("instruction has no tokens".into()));
        }
        if emb.tokens.cols() != self.cfg.d_lang {
            return Err(TensorError::Contract(format!(
                "embedding width {} but generator expects {}",
                emb.tokens.cols(),
                self.cfg.d_lang
            )));
        }
        Ok(g.constant(emb.tokens.clone()))
    }

    /// `θ⁽⁰⁾` as per-layer row matrices.
    pub fn initial_layers(&self, g: &mut Graph, p: &Bound, lang: Var) -> GResult<Vec<Var>> {
        let Some(win) = &self.win else {
            return Ok(self.theta0.iter().map(|&id| p.var(id)).collect());
        };
        let ctx = win.lang.forward(g, p, lang)?;
        let mut x = p.var(win.queries);
        for b in &win.blocks {
            x = b.self_attn.forward(g, p, x, x)?;
            x = b.cross_attn.forward(g, p, x, ctx)?;
            let f = b.ffn.forward(g, p, x)?;
            let r = g.add(x, f)?;
            x = b.ffn_norm.forward(g, p, r)?;
        }
        let mut layers = Vec::with_capacity(win.decoders.len());
        let mut start = 0;
        for (dec, (rows, _)) in win.decoders.iter().zip(self.cfg.arch.layer_shapes()) {
            let q = g.rows(x, start..start + rows)?;
            layers.push(dec.forward(g, p, q)?);
            start += rows;
        }
        Ok(layers)
    }

    /// `ω_i[r] = E_i(row r of layer i)`.
    pub fn tokenize(&self, g: &mut Graph, p: &Bound, layers: &[Var]) -> GResult<Vec<Var>> {
        let rf = self.refiner()?;
        layers.iter().zip(&rf.encoders).map(|(&w, e)| e.forward(g, p, w)).collect()
    }

    /// `τ_0 = CA(q₀, lang)`, `τ_i = CA(ω_i, τ_{i-1})`. Returns `τ_0 ..= τ_L`.
    pub fn forward_simulate(&self, g: &mut Graph, p: &Bound, omega: &[Var], lang: Var) -> GResult<Vec<Var>> {
        let rf = self.refiner()?;
        let ctx = rf.fwd_lang.forward(g, p, lang)?;
        let mut tau = vec![rf.tau0.forward(g, p, p.var(rf.tau0_queries), ctx)?];
        for &w in omega {
            let prev = *tau.last().unwrap();
            tau.push(rf.fwd.forward(g, p, w, prev)?);
        }
        Ok(tau)
    }

    /// Simulated backward pass from a language-conditioned top gradient.
    pub fn backward_simulate(&self, g: &mut Graph, p: &Bound, omega: &[Var], tau: &[Var], lang: Var) -> GResult<GradTokens> {
        let rf = self.refiner()?;
        let n = omega.len();
        let mut jac_h = Vec::with_capacity(n);
        let mut jac_theta = Vec::with_capacity(n);
        for i in 0..n {
            jac_h.push(rf.jac_h.forward(g, p, omega[i], tau[i])?);
            jac_theta.push(rf.jac_theta.forward(g, p, tau[i], omega[i])?);
        }
        let ctx = rf.bwd_lang.forward(g, p, lang)?;
        // built from the top layer down, reversed at the end
        let mut dz = vec![rf.top.forward(g, p, tau[n], ctx)?];
        let mut grad_omega = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let upstream = *dz.last().unwrap();
            grad_omega.push(rf.grad_omega.forward(g, p, upstream, jac_theta[i])?);
            if i > 0 {
                let kv = g.concat_rows(&[upstream, jac_h[i]])?;
                dz.push(rf.grad_z.forward(g, p, tau[i], kv)?);
            }
        }
        dz.reverse();
        grad_omega.reverse();
        Ok(GradTokens { dz, grad_omega, jac_h, jac_theta })
    }

    /// `Δrow = D_i(∇ω_i[r])`.
    pub fn meta_update(&self, g: &mut Graph, p: &Bound, grad_omega: &[Var]) -> GResult<Vec<Var>> {
        let rf = self.refiner()?;
        grad_omega.iter().zip(&rf.decoders).map(|(&t, dec)| dec.forward(g, p, t)).collect()
    }

    /// One refinement step with its intermediate tokens.
    pub fn refine_step_traced(&self, g: &mut Graph, p: &Bound, layers: &[Var], lang: Var) -> GResult<(Vec<Var>, StepTrace)> {
        let omega = self.tokenize(g, p, layers)?;
        let tau = self.forward_simulate(g, p, &omega, lang)?;
        let grads = self.backward_simulate(g, p, &omega, &tau, lang)?;
        let delta = self.meta_update(g, p, &grads.grad_omega)?;
        let next = layers.iter().zip(&delta).map(|(&w, &dw)| g.add(w, dw)).collect::<GResult<Vec<_>>>()?;
        Ok((next, StepTrace { omega, tau, grads, delta }))
    }

    pub fn refine_step(&self, g: &mut Graph, p: &Bound, layers: &[Var], lang: Var) -> GResult<Vec<Var>> {
        Ok(self.refine_step_traced(g, p, layers, lang)?.0)
    }

    /// `θ⁽ᵀ⁾` as per-layer row matrices inside `g`.
    pub fn generate_layers(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding) -> GResult<Vec<Var>> {
        self.generate_layers_upto(g, p, emb, self.cfg.refine_steps)
    }

    /// `θ⁽ᵗ⁾` for `t ≤ T`.
    pub fn generate_layers_upto(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding, t: usize) -> GResult<Vec<Var>> {
        if t > self.cfg.refine_steps {
            return Err(TensorError::Contract(format!("step {t} beyond T = {}", self.cfg.refine_steps)));
        }
        let lang = self.lang_tokens(g, emb)?;
        let mut layers = self.initial_layers(g, p, lang)?;
        check_layers(g, &self.cfg.arch, &layers)?;
        for _ in 0..t {
            layers = self.refine_step(g, p, &layers, lang)?;
        }
        Ok(layers)
    }

    /// Generates `θ_π` outside any training graph.
    pub fn generate(&self, emb: &TaskEmbedding) -> Result<PolicyParams> {
        self.generate_upto(emb, self.cfg.refine_steps)
    }

    pub fn generate_upto(&self, emb: &TaskEmbedding, t: usize) -> Result<PolicyParams> {
        let mut g = Graph::new();
        let p = self.ps.bind_frozen(&mut g);
        let layers = self.generate_layers_upto(&mut g, &p, emb, t)?;
        let values: Vec<Tensor> = layers.iter().map(|&v| g.value(v).clone()).collect();
        PolicyParams::from_layers(&self.cfg.arch, &values)
    }

    /// WIN output alone.
    pub fn win_generate(&self, emb: &TaskEmbedding) -> Result<PolicyParams> {
        self.generate_upto(emb, 0)
    }

    fn refiner(&self) -> GResult<&Refiner> {
        self.refiner.as_ref().ok_or_else(|| TensorError::Contract("generator has no refinement steps".into()))
    }
}
