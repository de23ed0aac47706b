use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use super::value::{gemm, Tensor};
use super::TensorError;

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    /// Elementwise sum; the second operand may be a `1 x cols` bias row.
    Add,
    Mul,
    Scale(f64),
    Relu,
    Tanh,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise layer norm over inputs `(x, gain, bias)`.
    LayerNorm,
    ConcatRows,
    ConcatCols,
    Slice { rows: Range<usize>, cols: Range<usize> },
    Reshape { rows: usize, cols: usize },
    Mean,
    Mse,
    /// `x W + b` over inputs `(x, W, b)`, `b` a bias row.
    Linear,
    /// Multi-head scaled dot-product attention over inputs `(q, k, v)`.
    Attention { heads: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
            OpKind::Linear => "linear",
            OpKind::Attention { .. } => "attention",
        }
    }
}

/// Parses the parameter-free op names; `scale`, `slice`, `reshape` and
/// `attention` need arguments and are built directly.
impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "relu" => OpKind::Relu,
            "tanh" => OpKind::Tanh,
            "softmax" => OpKind::Softmax,
            "layer_norm" => OpKind::LayerNorm,
            "concat_rows" => OpKind::ConcatRows,
            "concat_cols" => OpKind::ConcatCols,
            "mean" => OpKind::Mean,
            "mse" => OpKind::Mse,
            "linear" => OpKind::Linear,
            other => return Err(TensorError::Unsupported(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { x: Var, r0: usize, c0: usize },
    Reshape(Var),
    Mean(Var),
    Mse(Var, Var),
    Linear(Var, Var, Var),
    /// `probs` holds the `heads x nq x nk` attention weights.
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so insertion order is a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Every op output is checked for NaN/Inf and reported as an error.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, rg))
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Arity { op: kind.name(), expected: n, got: inputs.len() })
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(s) => arity(1).and_then(|_| self.scale(inputs[0], s)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::LayerNorm => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2]))
            }
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::Slice { ref rows, ref cols } => {
                arity(1).and_then(|_| self.slice(inputs[0], rows.clone(), cols.clone()))
            }
            OpKind::Reshape { rows, cols } => arity(1).and_then(|_| self.reshape(inputs[0], rows, cols)),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Mse => arity(2).and_then(|_| self.mse(inputs[0], inputs[1])),
            OpKind::Linear => arity(3).and_then(|_| self.linear(inputs[0], inputs[1], inputs[2])),
            OpKind::Attention { heads } => {
                arity(3).and_then(|_| self.attention(inputs[0], inputs[1], inputs[2], heads))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::shape2("matmul", (m, k), (k2, n)));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), 0.0);
        self.record("matmul", Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).transposed();
        self.record("transpose", Op::Transpose(x), out)
    }

    /// `a + b`, where `b` has the shape of `a` or is a `1 x cols` row added to
    /// every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            let mut out = self.value(a).clone();
            out.add_assign(self.value(b));
            self.record("add", Op::Add(a, b), out)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut out = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(sa.1) {
                for (v, bv) in row.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
            self.record("add", Op::AddRow(a, b), out)
        } else {
            Err(TensorError::shape2("add", sa, sb))
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::shape2("mul", sa, sb));
        }
        let mut out = self.value(a).clone();
        for (v, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= bv;
        }
        self.record("mul", Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.record("scale", Op::Scale(x, s), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.record("relu", Op::Relu(x), out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.record("tanh", Op::Tanh(x), out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        if cols == 0 {
            return Err(TensorError::shape1("softmax", out.shape()));
        }
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.record("softmax", Op::Softmax(x), out)
    }

    /// Row-wise normalization to zero mean / unit variance followed by a
    /// per-column affine map. `gain` and `bias` are `1 x cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) || c == 0 {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    (r, c),
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            let o = &mut out.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                o[j] = g[j] * h + b[j];
            }
        }
        self.record("layer_norm", Op::LayerNorm { x, gain, bias, xhat, inv_std }, out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Arity { op: "concat_rows", expected: 1, got: 0 })?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(TensorError::shape2("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.record("concat_rows", Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Arity { op: "concat_cols", expected: 1, got: 0 })?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(TensorError::shape2("concat_cols", self.shape(*first), s));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            let pc = t.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + pc].copy_from_slice(t.row(r));
            }
            offset += pc;
        }
        self.record("concat_cols", Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if rows.start > rows.end || rows.end > r || cols.start > cols.end || cols.end > c {
            return Err(TensorError::Shape {
                op: "slice",
                detail: format!("rows {rows:?} cols {cols:?} of {:?}", (r, c)),
            });
        }
        let src = self.value(x);
        let (nr, nc) = (rows.len(), cols.len());
        let mut data = Vec::with_capacity(nr * nc);
        for i in rows.clone() {
            data.extend_from_slice(&src.row(i)[cols.clone()]);
        }
        let out = Tensor::from_vec(nr, nc, data)?;
        self.record("slice", Op::Slice { x, r0: rows.start, c0: cols.start }, out)
    }

    /// Row range, all columns.
    pub fn rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var, TensorError> {
        let c = self.shape(x).1;
        self.slice(x, rows, 0..c)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let src = self.value(x);
        if src.len() != rows * cols {
            return Err(TensorError::shape2("reshape", src.shape(), (rows, cols)));
        }
        let out = Tensor::from_vec(rows, cols, src.data().to_vec())?;
        self.record("reshape", Op::Reshape(x), out)
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::shape1("mean", t.shape()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record("mean", Op::Mean(x), Tensor::scalar(m))
    }

    /// Mean of squared differences over all entries, as a 1x1 tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb || sa.0 * sa.1 == 0 {
            return Err(TensorError::shape2("mse", sa, sb));
        }
        let n = (sa.0 * sa.1) as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.record("mse", Op::Mse(a, b), Tensor::scalar(s / n))
    }

    /// `x W + b` with `b` broadcast as a bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 || self.shape(b) != (1, n) {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", (m, k), (k2, n), self.shape(b)),
            });
        }
        let mut out = Tensor::zeros(m, n);
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            row.copy_from_slice(bias);
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, out.data_mut(), 1.0);
        self.record("linear", Op::Linear(x, w, b), out)
    }

    /// Multi-head attention: the model dimension of `q: nq x d`,
    /// `k, v: nk x d` is split into `heads` equal column blocks; each block
    /// computes `softmax(q_h k_hᵀ / sqrt(d_h)) v_h` and the blocks are laid
    /// side by side in the `nq x d` output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        if dk != d || self.shape(v) != (nk, d) || heads == 0 || d % heads != 0 || nk == 0 {
            return Err(TensorError::Shape {
                op: "attention",
                detail: format!("q {:?}, k {:?}, v {:?}, {heads} heads", (nq, d), (nk, dk), self.shape(v)),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(nq, d);
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            let qh = head_block(self.value(q), h, dh, false);
            let kt = head_block(self.value(k), h, dh, true);
            let vh = head_block(self.value(v), h, dh, false);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dh, nk, &qh, false, &kt, false, p, 0.0);
            for row in p.chunks_mut(nk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm(nq, nk, dh, p, false, &vh, false, &mut oh, 0.0);
            put_head_block(&mut out, &oh, h, dh);
        }
        self.record("attention", Op::Attention { q, k, v, heads, probs }, out)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, gy.data(), false, bv.data(), true, ga.data_mut(), 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), true, gy.data(), false, gb.data_mut(), 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, gy.transposed()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.needs(*b) {
                    let cols = gy.cols();
                    let mut gb = Tensor::zeros(1, cols);
                    for row in gy.data().chunks(cols) {
                        for (s, v) in gb.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut ga = gy.clone();
                    ga.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(g, v)| *g *= v);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = gy.clone();
                    gb.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(g, v)| *g *= v);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let mut gx = gy.clone();
                gx.data_mut().iter_mut().for_each(|g| *g *= s);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = gy.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(g, v)| {
                        if *v <= 0.0 {
                            *g = 0.0
                        }
                    });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let mut gx = gy.clone();
                gx.data_mut().iter_mut().zip(y.data()).for_each(|(g, t)| *g *= 1.0 - t * t);
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                let mut gx = gy.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for (g, p) in grow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = y.shape();
                let g = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut gg = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += gy.get(i, j) * xhat[i * c + j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.needs(*bias) {
                    let mut gb = Tensor::zeros(1, c);
                    for row in gy.data().chunks(c) {
                        for (s, v) in gb.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(r, c);
                    let cf = c as f64;
                    for i in 0..r {
                        let gyr = gy.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gyr[j] * g[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        let out = &mut gx.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            let d = gyr[j] * g[j];
                            out[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = gy.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.needs(*p) {
                        let data = gy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, *p, Tensor::from_vec(rows, cols, data).expect("shape"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = gy.shape();
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if self.needs(*p) {
                        let mut gp = Tensor::zeros(rows, pc);
                        for r in 0..rows {
                            gp.data_mut()[r * pc..(r + 1) * pc]
                                .copy_from_slice(&gy.data()[r * cols + offset..r * cols + offset + pc]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += pc;
                }
            }
            Op::Slice { x, r0, c0 } => {
                let (xr, xc) = self.shape(*x);
                let (nr, nc) = gy.shape();
                let mut gx = Tensor::zeros(xr, xc);
                for i in 0..nr {
                    gx.data_mut()[(r0 + i) * xc + c0..(r0 + i) * xc + c0 + nc].copy_from_slice(gy.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (xr, xc) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::from_vec(xr, xc, gy.data().to_vec()).expect("shape"));
            }
            Op::Mean(x) => {
                let (xr, xc) = self.shape(*x);
                let s = gy.item() / (xr * xc) as f64;
                self.accumulate(grads, *x, Tensor::full(xr, xc, s));
            }
            Op::Linear(x, w, b) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, k) = xv.shape();
                let n = wv.cols();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(m, k);
                    gemm(m, n, k, gy.data(), false, wv.data(), true, gx.data_mut(), 0.0);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(k, n);
                    gemm(k, m, n, xv.data(), true, gy.data(), false, gw.data_mut(), 0.0);
                    self.accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(1, n);
                    for row in gy.data().chunks(n) {
                        for (s, v) in gb.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, d) = self.shape(*q);
                let nk = self.shape(*k).0;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(nq, d);
                let mut gk = Tensor::zeros(nk, d);
                let mut gv = Tensor::zeros(nk, d);
                let mut ds = vec![0.0; nq * nk];
                let mut gqh = vec![0.0; nq * dh];
                let mut gkh = vec![0.0; nk * dh];
                let mut gvh = vec![0.0; nk * dh];
                for h in 0..*heads {
                    let qh = head_block(self.value(*q), h, dh, false);
                    let kh = head_block(self.value(*k), h, dh, false);
                    let vt = head_block(self.value(*v), h, dh, true);
                    let go = head_block(gy, h, dh, false);
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    // dV = Pᵀ dO, dP = dO Vᵀ
                    gemm(nk, nq, dh, p, true, &go, false, &mut gvh, 0.0);
                    gemm(nq, dh, nk, &go, false, &vt, false, &mut ds, 0.0);
                    for (drow, prow) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (dv, pv) in drow.iter_mut().zip(prow) {
                            *dv = scale * pv * (*dv - dot);
                        }
                    }
                    // dQ = dS K, dK = dSᵀ Q
                    gemm(nq, nk, dh, &ds, false, &kh, false, &mut gqh, 0.0);
                    gemm(nk, nq, dh, &ds, true, &qh, false, &mut gkh, 0.0);
                    put_head_block(&mut gq, &gqh, h, dh);
                    put_head_block(&mut gk, &gkh, h, dh);
                    put_head_block(&mut gv, &gvh, h, dh);
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.len() as f64;
                let s = 2.0 * gy.item() / n;
                let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| s * (x - y)).collect();
                let (r, c) = av.shape();
                if self.needs(*b) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(r, c, neg).expect("shape"));
                }
                self.accumulate(grads, *a, Tensor::from_vec(r, c, diff).expect("shape"));
            }
        }
    }
}

/// Columns `h*dh .. (h+1)*dh` of `t` as a contiguous row-major block,
/// optionally transposed to `dh x rows`.
fn head_block(t: &Tensor, h: usize, dh: usize, transpose: bool) -> Vec<f64> {
    let (rows, d) = t.shape();
    let src = t.data();
    let mut out = vec![0.0; rows * dh];
    for r in 0..rows {
        for c in 0..dh {
            let v = src[r * d + h * dh + c];
            if transpose {
                out[c * rows + r] = v;
            } else {
                out[r * dh + c] = v;
            }
        }
    }
    out
}

fn put_head_block(t: &mut Tensor, block: &[f64], h: usize, dh: usize) {
    let d = t.cols();
    for (r, row) in block.chunks(dh).enumerate() {
        t.data_mut()[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(row);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
