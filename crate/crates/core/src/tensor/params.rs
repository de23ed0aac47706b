use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::value::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Binds every tensor as a gradient-receiving leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.param(t.clone())).collect() }
    }

    /// Binds every tensor as a constant leaf (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect() }
    }

    /// SHA-256 over names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for graph values already laid out in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter, zeros where the parameter did not influence
    /// the loss.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                grads.get(*v).cloned().unwrap_or_else(|| {
                    let (r, c) = g.shape(*v);
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}
