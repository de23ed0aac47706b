//! Layers built on the tensor graph. Each layer registers its weights in a
//! [`ParamSet`] at construction and holds only [`ParamId`]s.

use rand::Rng;

use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, TensorError, Var};

pub type NnResult = Result<Var, TensorError>;

/// Activation applied between perceptron layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Identity,
}

impl Act {
    pub fn apply(self, g: &mut Graph, x: Var) -> NnResult {
        match self {
            Act::Relu => g.relu(x),
            Act::Tanh => g.tanh(x),
            Act::Identity => Ok(x),
        }
    }
}

/// `y = x W + b`, `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::with_scale(ps, name, fan_in, fan_out, bound, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w = if bound > 0.0 {
            Tensor::uniform(fan_in, fan_out, bound, rng)
        } else {
            Tensor::zeros(fan_in, fan_out)
        };
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b, fan_in, fan_out }
    }

    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> NnResult {
        g.linear(x, p.var(self.w), p.var(self.b))
    }

    pub fn numel(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

/// Stack of [`Linear`] layers with `act` between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Act,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dims: &[usize], act: Act, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, act }
    }

    /// Like [`Mlp::new`] but the last layer starts at zero.
    pub fn zero_last<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dims: &[usize], act: Act, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == n {
                    Linear::zeros(ps, &format!("{name}.{i}"), w[0], w[1])
                } else {
                    Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng)
                }
            })
            .collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> NnResult {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x)?;
            if i + 1 < n {
                x = self.act.apply(g, x)?;
            }
        }
        Ok(x)
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(Linear::numel).sum()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> NnResult {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Multi-head scaled dot-product attention. Queries come from one token set,
/// keys and values from another; heads split the model dimension.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `queries: nq x d`, `context: nk x d` -> `nq x d`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: Var, context: Var) -> NnResult {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, p, a)
    }
}

/// One attention layer with residual connection on the queries and a
/// layer norm: `LN(q + MHA(q, ctx))`.
#[derive(Clone, Debug)]
pub struct CrossAttn {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CrossAttn {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.mha"), dim, heads, rng),
            norm: LayerNorm::new(ps, &format!("{name}.ln"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: Var, context: Var) -> NnResult {
        let a = self.attn.forward(g, p, queries, context)?;
        let r = g.add(queries, a)?;
        self.norm.forward(g, p, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_output_shape_follows_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let ca = CrossAttn::new(&mut ps, "ca", 8, 4, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let q = g.constant(Tensor::randn(5, 8, 1.0, &mut rng));
        let c = g.constant(Tensor::randn(3, 8, 1.0, &mut rng));
        let y = ca.forward(&mut g, &p, q, c).unwrap();
        assert_eq!(g.shape(y), (5, 8));
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        // with one key, softmax is 1 and every query receives o(v(ctx))
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, "a", 4, 2, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let q = g.constant(Tensor::randn(3, 4, 1.0, &mut rng));
        let c = g.constant(Tensor::randn(1, 4, 1.0, &mut rng));
        let y = mha.forward(&mut g, &p, q, c).unwrap();
        let v = mha.v.forward(&mut g, &p, c).unwrap();
        let o = mha.o.forward(&mut g, &p, v).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                assert!((g.value(y).get(r, j) - g.value(o).get(0, j)).abs() < 1e-12);
            }
        }
    }
}
