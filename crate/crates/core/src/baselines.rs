//! Comparison models: two entangled MLPs in which instruction and
//! observation share parameters, and a direct MLP hypernetwork.

use rand::Rng;

use crate::error::{DiscError, Result};
use crate::lang::TaskEmbedding;
use crate::nn::{Act, Mlp};
use crate::policy::{param_count, PolicyArch, PolicyParams};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, TensorError, Var};

type GResult<T> = std::result::Result<T, TensorError>;

/// `ones(n x 1) * row` — repeats a `1 x c` row `n` times inside the graph.
fn repeat_row(g: &mut Graph, row: Var, n: usize) -> GResult<Var> {
    let ones = g.constant(Tensor::full(n, 1, 1.0));
    g.matmul(ones, row)
}

fn pooled(g: &mut Graph, emb: &TaskEmbedding, d_lang: usize) -> GResult<Var> {
    if emb.pooled.len() != d_lang {
        return Err(TensorError::Contract(format!("embedding width {} but model expects {d_lang}", emb.pooled.len())));
    }
    Ok(g.constant(Tensor::row_vector(emb.pooled.clone())))
}

/// Plain dense layer used by bound (instruction-fixed) baselines.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            for (yj, wij) in y.iter_mut().zip(self.w.row(i)) {
                *yj += xi * wij;
            }
        }
        y
    }
}

/// Concatenation baseline: an MLP over `[o ∥ ē]` where `ē` is the mean
/// instruction token. The first layer is split into observation and
/// instruction blocks; `[o ∥ ē] W = o W_o + ē W_l`.
#[derive(Clone, Debug)]
pub struct ConcatMlp {
    pub obs_dim: usize,
    pub d_lang: usize,
    pub width: usize,
    pub act_dim: usize,
    w_obs: ParamId,
    w_lang: ParamId,
    b_in: ParamId,
    rest: Mlp,
}

impl ConcatMlp {
    pub const DEPTH: usize = 3;

    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, obs_dim: usize, d_lang: usize, width: usize, act_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((obs_dim + d_lang) as f64).sqrt();
        let w_obs = ps.add("concat.in.w_obs", Tensor::uniform(obs_dim, width, bound, rng));
        let w_lang = ps.add("concat.in.w_lang", Tensor::uniform(d_lang, width, bound, rng));
        let b_in = ps.add("concat.in.b", Tensor::zeros(1, width));
        let mut dims = vec![width; Self::DEPTH];
        dims.push(act_dim);
        let rest = Mlp::new(ps, "concat.mlp", &dims, Act::Tanh, rng);
        Self { obs_dim, d_lang, width, act_dim, w_obs, w_lang, b_in, rest }
    }

    pub fn numel_for(obs_dim: usize, d_lang: usize, width: usize, act_dim: usize) -> usize {
        (obs_dim + d_lang + 1) * width + (Self::DEPTH - 1) * (width + 1) * width + (width + 1) * act_dim
    }

    /// Weight matrices `(name, rows, cols)` that a low-rank adapter can wrap.
    pub fn adaptable(&self) -> Vec<(String, usize, usize)> {
        let mut v = vec![
            ("concat.in.w_obs".to_string(), self.obs_dim, self.width),
            ("concat.in.w_lang".to_string(), self.d_lang, self.width),
        ];
        for (i, l) in self.rest.layers.iter().enumerate() {
            v.push((format!("concat.mlp.{i}.w"), l.fan_in, l.fan_out));
        }
        v
    }

    /// Forward pass where each weight matrix `W` may be replaced by a
    /// graph value via `weight(name, default)`.
    pub fn forward_with<F>(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding, obs: Var, mut weight: F) -> GResult<Var>
    where
        F: FnMut(&mut Graph, &str, Var) -> GResult<Var>,
    {
        let e = pooled(g, emb, self.d_lang)?;
        let wl = weight(g, "concat.in.w_lang", p.var(self.w_lang))?;
        let lang_row = g.linear(e, wl, p.var(self.b_in))?;
        let wo = weight(g, "concat.in.w_obs", p.var(self.w_obs))?;
        let h = g.matmul(obs, wo)?;
        let h = g.add(h, lang_row)?;
        let mut x = g.tanh(h)?;
        let last = self.rest.layers.len() - 1;
        for (i, l) in self.rest.layers.iter().enumerate() {
            let w = weight(g, &format!("concat.mlp.{i}.w"), p.var(l.w))?;
            x = g.linear(x, w, p.var(l.b))?;
            if i < last {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding, obs: Var) -> GResult<Var> {
        self.forward_with(g, p, emb, obs, |_, _, w| Ok(w))
    }

    pub(crate) fn bind(&self, ps: &ParamSet, emb: &TaskEmbedding) -> Result<BoundMlp> {
        if emb.pooled.len() != self.d_lang {
            return Err(DiscError::Contract("embedding width mismatch".into()));
        }
        let first = Dense { w: ps.get(self.w_obs).clone(), b: Dense { w: ps.get(self.w_lang).clone(), b: ps.get(self.b_in).data().to_vec() }.apply(&emb.pooled) };
        let mut layers = vec![first];
        layers.extend(self.rest.layers.iter().map(|l| Dense { w: ps.get(l.w).clone(), b: ps.get(l.b).data().to_vec() }));
        Ok(BoundMlp { layers, film: None })
    }
}

/// FiLM baseline: an observation-only MLP whose hidden pre-activations are
/// modulated as `γ(ē) ⊙ z + β(ē)`. The language head's last layer starts at
/// zero and `γ = 1 + head`, so the initial backbone is unconditioned.
#[derive(Clone, Debug)]
pub struct FilmMlp {
    pub obs_dim: usize,
    pub d_lang: usize,
    pub width: usize,
    pub act_dim: usize,
    backbone: Mlp,
    head: Mlp,
}

impl FilmMlp {
    pub const DEPTH: usize = 3;

    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, obs_dim: usize, d_lang: usize, width: usize, act_dim: usize, rng: &mut R) -> Self {
        let mut dims = vec![obs_dim];
        dims.extend(vec![width; Self::DEPTH]);
        dims.push(act_dim);
        let backbone = Mlp::new(ps, "film.backbone", &dims, Act::Tanh, rng);
        let head = Mlp::zero_last(ps, "film.head", &[d_lang, width, 2 * Self::DEPTH * width], Act::Relu, rng);
        Self { obs_dim, d_lang, width, act_dim, backbone, head }
    }

    pub fn numel_for(obs_dim: usize, d_lang: usize, width: usize, act_dim: usize) -> usize {
        let backbone = (obs_dim + 1) * width + (Self::DEPTH - 1) * (width + 1) * width + (width + 1) * act_dim;
        let head = (d_lang + 1) * width + (width + 1) * 2 * Self::DEPTH * width;
        backbone + head
    }

    /// Number of instruction-dependent values per control step.
    pub fn modulation_count(&self) -> usize {
        2 * Self::DEPTH * self.width
    }

    fn film_rows(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding) -> GResult<Vec<(Var, Var)>> {
        let e = pooled(g, emb, self.d_lang)?;
        let out = self.head.forward(g, p, e)?;
        let w = self.width;
        let one = g.constant(Tensor::full(1, w, 1.0));
        (0..Self::DEPTH)
            .map(|l| {
                let dg = g.slice(out, 0..1, 2 * l * w..(2 * l + 1) * w)?;
                let gamma = g.add(dg, one)?;
                let beta = g.slice(out, 0..1, (2 * l + 1) * w..(2 * l + 2) * w)?;
                Ok((gamma, beta))
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding, obs: Var) -> GResult<Var> {
        let n = g.shape(obs).0;
        let film = self.film_rows(g, p, emb)?;
        let mut x = obs;
        for (i, l) in self.backbone.layers.iter().enumerate() {
            x = l.forward(g, p, x)?;
            if let Some(&(gamma, beta)) = film.get(i) {
                let gm = repeat_row(g, gamma, n)?;
                x = g.mul(x, gm)?;
                x = g.add(x, beta)?;
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }

    pub(crate) fn bind(&self, ps: &ParamSet, emb: &TaskEmbedding) -> Result<BoundMlp> {
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let rows = self.film_rows(&mut g, &p, emb)?;
        let film = rows.iter().map(|&(a, b)| (g.value(a).data().to_vec(), g.value(b).data().to_vec())).collect();
        let layers = self.backbone.layers.iter().map(|l| Dense { w: ps.get(l.w).clone(), b: ps.get(l.b).data().to_vec() }).collect();
        Ok(BoundMlp { layers, film: Some(film) })
    }
}

/// Entangled model with its instruction fixed: tanh MLP, optionally with
/// per-hidden-layer scale and shift.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<Dense>,
    film: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl BoundMlp {
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut x = obs.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(&x);
            if let Some((gamma, beta)) = self.film.as_ref().and_then(|f| f.get(i)) {
                for ((v, gm), bt) in x.iter_mut().zip(gamma).zip(beta) {
                    *v = *v * gm + bt;
                }
            }
            if i + 1 < n {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        x
    }
}

/// Direct hypernetwork: mean instruction token through an MLP straight to
/// the flat policy vector.
#[derive(Clone, Debug)]
pub struct DirectHypernet {
    pub arch: PolicyArch,
    pub d_lang: usize,
    net: Mlp,
}

impl DirectHypernet {
    pub const HIDDEN: usize = 48;
    pub const LAYERS: usize = 5;

    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, arch: &PolicyArch, d_lang: usize, hidden: usize, rng: &mut R) -> Self {
        let p = param_count(arch);
        let mut dims = vec![d_lang];
        dims.extend(vec![hidden; Self::LAYERS - 1]);
        dims.push(p);
        let net = Mlp::new(ps, "direct", &dims, Act::Relu, rng);
        // rescale output columns so each generated row starts near 1/sqrt(fan_in)
        let out = net.layers.last().unwrap();
        let mut col_scale = Vec::with_capacity(p);
        for (rows, cols) in arch.layer_shapes() {
            col_scale.extend(std::iter::repeat_n(1.0 / (cols as f64).sqrt(), rows * cols));
        }
        let w = ps.get_mut(out.w);
        for r in 0..w.rows() {
            for (c, s) in col_scale.iter().enumerate() {
                let v = w.get(r, c) * s;
                w.set(r, c, v);
            }
        }
        Self { arch: arch.clone(), d_lang, net }
    }

    pub fn numel_for(arch: &PolicyArch, d_lang: usize, hidden: usize) -> usize {
        let p = param_count(arch);
        (d_lang + 1) * hidden + (Self::LAYERS - 2) * (hidden + 1) * hidden + (hidden + 1) * p
    }

    pub fn generate_layers(&self, g: &mut Graph, p: &Bound, emb: &TaskEmbedding) -> GResult<Vec<Var>> {
        let e = pooled(g, emb, self.d_lang)?;
        let flat = self.net.forward(g, p, e)?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (rows, cols) in self.arch.layer_shapes() {
            let s = g.slice(flat, 0..1, off..off + rows * cols)?;
            layers.push(g.reshape(s, rows, cols)?);
            off += rows * cols;
        }
        Ok(layers)
    }

    pub fn generate(&self, ps: &ParamSet, emb: &TaskEmbedding) -> Result<PolicyParams> {
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let layers = self.generate_layers(&mut g, &p, emb)?;
        let values: Vec<Tensor> = layers.iter().map(|&v| g.value(v).clone()).collect();
        PolicyParams::from_layers(&self.arch, &values)
    }
}

/// Smallest width whose parameter count is closest to `target`; errors when
/// the best width misses by more than `tol` (relative).
pub fn solve_width<F: Fn(usize) -> usize>(numel: F, target: usize, tol: f64) -> Result<usize> {
    let mut best = (1, f64::INFINITY);
    for w in 1..=4096 {
        let n = numel(w);
        let err = (n as f64 - target as f64).abs() / target as f64;
        if err < best.1 {
            best = (w, err);
        }
        if n > 2 * target {
            break;
        }
    }
    if best.1 > tol {
        return Err(DiscError::Config(format!("no width within {:.0}% of {target} parameters", tol * 100.0)));
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(rng: &mut ChaCha8Rng, d: usize) -> TaskEmbedding {
        TaskEmbedding::from_tokens(Tensor::randn(4, d, 0.3, rng))
    }

    #[test]
    fn concat_counts_and_bound_agrees_with_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let m = ConcatMlp::new(&mut ps, 19, 8, 10, 3, &mut rng);
        assert_eq!(ps.numel(), ConcatMlp::numel_for(19, 8, 10, 3));
        let e = emb(&mut rng, 8);
        let obs = Tensor::randn(2, 19, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(obs.clone());
        let y = m.forward(&mut g, &p, &e, x).unwrap();
        let b = m.bind(&ps, &e).unwrap();
        for r in 0..2 {
            for (a, v) in b.act(obs.row(r)).iter().zip(g.value(y).row(r)) {
                assert!((a - v).abs() < 1e-12);
            }
        }
        // the observation pathway alone still produces actions
        let z = b.act(&[0.0; 19]);
        let zeroed = m.bind(&ps, &e.zeroed()).unwrap().act(obs.row(0));
        assert_eq!(z.len(), 3);
        assert!(zeroed.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn film_starts_unconditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let m = FilmMlp::new(&mut ps, 19, 8, 10, 3, &mut rng);
        assert_eq!(ps.numel(), FilmMlp::numel_for(19, 8, 10, 3));
        assert_eq!(m.modulation_count(), 60);
        let obs = Tensor::randn(1, 19, 1.0, &mut rng);
        let a = m.bind(&ps, &emb(&mut rng, 8)).unwrap().act(obs.row(0));
        let b = m.bind(&ps, &emb(&mut rng, 8)).unwrap().act(obs.row(0));
        assert_eq!(a, b);

        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(obs.clone());
        let e = emb(&mut rng, 8);
        let y = m.forward(&mut g, &p, &e, x).unwrap();
        for (u, v) in g.value(y).row(0).iter().zip(&a) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_hypernet_emits_full_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = PolicyArch::desk(19, 3);
        let mut ps = ParamSet::new();
        let m = DirectHypernet::new(&mut ps, &arch, 8, DirectHypernet::HIDDEN, &mut rng);
        assert_eq!(ps.numel(), DirectHypernet::numel_for(&arch, 8, 48));
        let e = emb(&mut rng, 8);
        let t1 = m.generate(&ps, &e).unwrap();
        let t2 = m.generate(&ps, &e).unwrap();
        assert_eq!(t1.flat.len(), param_count(&arch));
        assert_eq!(t1, t2);
    }

    #[test]
    fn width_solver_hits_target() {
        let target = 40_000;
        let w = solve_width(|w| ConcatMlp::numel_for(19, 64, w, 3), target, 0.1).unwrap();
        let n = ConcatMlp::numel_for(19, 64, w, 3) as f64;
        assert!((n - target as f64).abs() / target as f64 <= 0.1);
        assert!(solve_width(|w| 1000 * w, 10, 0.1).is_err());
    }
}
