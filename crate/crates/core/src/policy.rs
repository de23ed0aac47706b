//! The generated controller: a tanh MLP whose every parameter comes from a
//! generator. Each layer is stored as an `out x (in + 1)` matrix whose row
//! `r` is `[W_r | b_r]`, so one row is one complete affine unit.

use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const WEIGHT_MAGIC: [u8; 8] = *b"DISCWT\0\0";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyArch {
    /// `[obs_dim, h_1, ..., act_dim]`
    pub dims: Vec<usize>,
}

impl PolicyArch {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(DiscError::Config(format!("invalid policy dims {dims:?}")));
        }
        Ok(Self { dims })
    }

    /// Desk default: three hidden layers of 32.
    pub fn desk(obs_dim: usize, act_dim: usize) -> Self {
        Self { dims: vec![obs_dim, 32, 32, 32, act_dim] }
    }

    /// Five weight layers of width 320.
    pub fn wide(obs_dim: usize, act_dim: usize) -> Self {
        Self { dims: vec![obs_dim, 320, 320, 320, 320, act_dim] }
    }

    pub fn obs_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn act_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(rows, cols) = (out_i, in_i + 1)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[1], w[0] + 1)).collect()
    }

    /// Rows across all layers.
    pub fn total_rows(&self) -> usize {
        self.dims[1..].iter().sum()
    }

    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(r, c)| {
                let o = off;
                off += r * c;
                o
            })
            .collect()
    }
}

/// Σ out_i (in_i + 1).
pub fn param_count(arch: &PolicyArch) -> usize {
    arch.layer_shapes().iter().map(|(r, c)| r * c).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub flat: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: &PolicyArch) -> Self {
        Self { flat: vec![0.0; param_count(arch)], arch: arch.clone() }
    }

    pub fn from_flat(arch: &PolicyArch, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != param_count(arch) {
            return Err(DiscError::Contract(format!(
                "{} values for an architecture with {} parameters",
                flat.len(),
                param_count(arch)
            )));
        }
        Ok(Self { arch: arch.clone(), flat })
    }

    /// Builds from per-layer row matrices.
    pub fn from_layers(arch: &PolicyArch, layers: &[Tensor]) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() || layers.iter().zip(&shapes).any(|(t, s)| t.shape() != *s) {
            return Err(DiscError::Contract("layer matrices do not match the architecture".into()));
        }
        Ok(Self { arch: arch.clone(), flat: layers.iter().flat_map(|t| t.data().iter().copied()).collect() })
    }

    pub fn layer(&self, i: usize) -> Tensor {
        let (r, c) = self.arch.layer_shapes()[i];
        let off = self.arch.layer_offsets()[i];
        Tensor::from_vec(r, c, self.flat[off..off + r * c].to_vec()).expect("layout")
    }

    pub fn layers(&self) -> Vec<Tensor> {
        (0..self.arch.n_layers()).map(|i| self.layer(i)).collect()
    }

    /// Single observation forward pass.
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        policy_forward(obs, self).expect("observation width checked by caller")
    }
}

/// `a = f_L(... f_1(o))` with tanh on hidden layers and identity output.
pub fn policy_forward(obs: &[f64], theta: &PolicyParams) -> Result<Vec<f64>> {
    let arch = &theta.arch;
    if obs.len() != arch.obs_dim() {
        return Err(DiscError::Contract(format!("observation has {} entries, policy expects {}", obs.len(), arch.obs_dim())));
    }
    if theta.flat.len() != param_count(arch) {
        return Err(DiscError::Contract("parameter vector does not match architecture".into()));
    }
    let n = arch.n_layers();
    let mut h = obs.to_vec();
    let mut off = 0;
    for (i, (rows, cols)) in arch.layer_shapes().into_iter().enumerate() {
        let w = &theta.flat[off..off + rows * cols];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let mut s = row[cols - 1];
            for (a, b) in row[..cols - 1].iter().zip(&h) {
                s += a * b;
            }
            out[r] = if i + 1 < n { s.tanh() } else { s };
        }
        h = out;
        off += rows * cols;
    }
    Ok(h)
}

/// Graph forward of a batch `x: n x obs_dim` through per-layer row matrices.
pub fn forward_graph(g: &mut Graph, layers: &[Var], x: Var) -> Result<Var, TensorError> {
    let n = g.shape(x).0;
    let ones = g.constant(Tensor::full(n, 1, 1.0));
    let mut h = x;
    for (i, &w) in layers.iter().enumerate() {
        let aug = g.concat_cols(&[h, ones])?;
        let wt = g.transpose(w)?;
        h = g.matmul(aug, wt)?;
        if i + 1 < layers.len() {
            h = g.tanh(h)?;
        }
    }
    Ok(h)
}

/// Checks that graph-produced layer matrices match `arch`.
pub fn check_layers(g: &Graph, arch: &PolicyArch, layers: &[Var]) -> Result<(), TensorError> {
    let shapes = arch.layer_shapes();
    if layers.len() != shapes.len() {
        return Err(TensorError::Contract(format!("{} layers for a {}-layer policy", layers.len(), shapes.len())));
    }
    for (v, s) in layers.iter().zip(&shapes) {
        if g.shape(*v) != *s {
            return Err(TensorError::Shape { op: "policy_layers", detail: format!("{:?} vs {:?}", g.shape(*v), s) });
        }
    }
    Ok(())
}

/// Weight file: magic, version, layer count, (rows, cols) per layer, then
/// little-endian `f32` values in layout order.
pub fn serialize_params(theta: &PolicyParams) -> Vec<u8> {
    let shapes = theta.arch.layer_shapes();
    let mut out = Vec::with_capacity(16 + 8 * shapes.len() + 4 * theta.flat.len());
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for (r, c) in shapes {
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for v in &theta.flat {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DiscError::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what} ({} of {n} bytes left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn magic(&mut self) -> Result<()> {
        let m = self.take(8, "magic")?;
        if m != WEIGHT_MAGIC {
            return Err(DiscError::Format { offset: 0, msg: format!("bad magic {m:?}") });
        }
        Ok(())
    }
}

pub fn deserialize_params(bytes: &[u8]) -> Result<PolicyParams> {
    let mut rd = Reader::new(bytes);
    rd.magic()?;
    let at = rd.pos;
    let version = rd.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(DiscError::Format { offset: at, msg: format!("expected version {WEIGHT_VERSION}, found {version}") });
    }
    let at = rd.pos;
    let n_layers = rd.u32("layer count")? as usize;
    if n_layers == 0 {
        return Err(DiscError::Format { offset: at, msg: "zero layers".into() });
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = rd.pos;
        let r = rd.u32("rows")? as usize;
        let c = rd.u32("cols")? as usize;
        if r == 0 || c < 2 {
            return Err(DiscError::Format { offset: at, msg: format!("invalid layer shape ({r}, {c})") });
        }
        shapes.push((at, r, c));
    }
    let mut dims = vec![shapes[0].2 - 1];
    for w in shapes.windows(2) {
        if w[1].2 != w[0].1 + 1 {
            return Err(DiscError::Format {
                offset: w[1].0,
                msg: format!("layer expects {} inputs but previous layer has {} rows", w[1].2 - 1, w[0].1),
            });
        }
    }
    dims.extend(shapes.iter().map(|s| s.1));
    let arch = PolicyArch::new(dims)?;
    let count = param_count(&arch);
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(rd.f32("parameters")? as f64);
    }
    if rd.pos != bytes.len() {
        return Err(DiscError::Format { offset: rd.pos, msg: format!("{} trailing bytes", bytes.len() - rd.pos) });
    }
    Ok(PolicyParams { arch, flat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(&PolicyArch::new(vec![4, 32, 32, 3]).unwrap()), 1315);
        assert_eq!(param_count(&PolicyArch::new(vec![7, 5]).unwrap()), 5 * 8);
    }

    #[test]
    fn wide_preset_reaches_reported_size() {
        // 4 x 320 hidden layers need a ~1.3k-d observation feature to land
        // near 0.74M with a 7-d action.
        let n = param_count(&PolicyArch::wide(1330, 7));
        assert!((n as f64 - 0.74e6).abs() < 0.01e6, "{n}");
    }

    #[test]
    fn zero_network_outputs_zero() {
        let arch = PolicyArch::desk(19, 3);
        let theta = PolicyParams::zeros(&arch);
        assert_eq!(policy_forward(&[0.3; 19], &theta).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_single_layer() {
        let arch = PolicyArch::new(vec![3, 3]).unwrap();
        let mut flat = vec![0.0; 12];
        for i in 0..3 {
            flat[i * 4 + i] = 1.0;
        }
        let theta = PolicyParams::from_flat(&arch, flat).unwrap();
        assert_eq!(policy_forward(&[1.5, -2.0, 7.0], &theta).unwrap(), vec![1.5, -2.0, 7.0]);
    }

    #[test]
    fn two_layer_hand_evaluated() {
        // layer 1: 2 -> 2, rows [1, -1 | 0.5], [0.25, 2 | -1]
        // layer 2: 2 -> 1, row [3, -2 | 0.1]
        let arch = PolicyArch::new(vec![2, 2, 1]).unwrap();
        let theta = PolicyParams::from_flat(&arch, vec![1.0, -1.0, 0.5, 0.25, 2.0, -1.0, 3.0, -2.0, 0.1]).unwrap();
        let o = [0.4, -0.3];
        let h1 = (0.4 + 0.3 + 0.5f64).tanh();
        let h2 = (0.1 - 0.6 - 1.0f64).tanh();
        let expected = 3.0 * h1 - 2.0 * h2 + 0.1;
        let a = policy_forward(&o, &theta).unwrap();
        assert!((a[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn output_is_unbounded() {
        let arch = PolicyArch::new(vec![1, 1]).unwrap();
        let theta = PolicyParams::from_flat(&arch, vec![100.0, 0.0]).unwrap();
        assert_eq!(policy_forward(&[5.0], &theta).unwrap(), vec![500.0]);
    }

    #[test]
    fn dim_mismatch_is_contract_error() {
        let theta = PolicyParams::zeros(&PolicyArch::desk(19, 3));
        assert!(matches!(policy_forward(&[0.0; 18], &theta), Err(DiscError::Contract(_))));
    }

    #[test]
    fn graph_forward_matches_plain_and_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = PolicyArch::new(vec![4, 5, 3, 2]).unwrap();
        let layers: Vec<Tensor> =
            arch.layer_shapes().iter().map(|&(r, c)| Tensor::randn(r, c, 0.7, &mut rng)).collect();
        let theta = PolicyParams::from_layers(&arch, &layers).unwrap();
        let obs = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut g = Graph::new();
        let lv: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(obs.clone());
        let y = forward_graph(&mut g, &lv, x).unwrap();
        for r in 0..3 {
            let a = policy_forward(obs.row(r), &theta).unwrap();
            for (j, v) in a.iter().enumerate() {
                assert!((g.value(y).get(r, j) - v).abs() < 1e-12);
            }
        }
        let mut inputs = layers.clone();
        inputs.push(obs);
        let target = Tensor::randn(3, 2, 1.0, &mut rng);
        let rep = grad_check(
            |g, v| {
                let y = forward_graph(g, &v[..3], v[3])?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
    }

    #[test]
    fn flatten_unflatten_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = PolicyArch::desk(19, 3);
        let flat = Tensor::randn(1, param_count(&arch), 1.0, &mut rng).into_vec();
        let theta = PolicyParams::from_flat(&arch, flat).unwrap();
        let back = PolicyParams::from_layers(&arch, &theta.layers()).unwrap();
        assert!(theta.flat.iter().zip(&back.flat).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn weight_file_size_and_errors() {
        let arch = PolicyArch::desk(19, 3);
        let theta = PolicyParams::zeros(&arch);
        let bytes = serialize_params(&theta);
        assert_eq!(deserialize_params(&bytes).unwrap(), theta);
        assert_eq!(bytes.len(), 16 + 8 * 4 + 4 * param_count(&arch));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_params(&bad), Err(DiscError::Format { offset: 0, .. })));

        let mut badv = bytes.clone();
        badv[8] = 9;
        assert!(matches!(deserialize_params(&badv), Err(DiscError::Format { offset: 8, .. })));

        let cut = &bytes[..bytes.len() - 3];
        match deserialize_params(cut) {
            Err(DiscError::Format { offset, .. }) => assert_eq!(offset, bytes.len() - 4),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
