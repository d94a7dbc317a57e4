//! The op tape and its adjoint rules.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Array, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
}

/// Externally implemented op with its own adjoint rule. Used by the
/// hypernetwork executor so its buffer management stays out of the tape.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Array]) -> Result<Array, TensorError>;
    /// One optional adjoint per input; `needs[i]` marks inputs that require one.
    fn backward(&mut self, inputs: &[&Array], adjoint: &Array, needs: &[bool]) -> Vec<Option<Array>>;
}

pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    MatMul,
    /// Rank-3 lhs against a shared rank-2 rhs.
    MatMul3,
    BatchMatMul,
    /// Multi-head self-attention over packed query/key/value projections.
    Attention { heads: usize, probs: RefCell<Option<Array>> },
    Relu,
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sum,
    Mean,
    Variance,
    SumAxis(usize),
    MeanAxis(usize),
    Softmax,
    LayerNorm { eps: f64 },
    CrossEntropyLogits { labels: Arc<Vec<usize>> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Transpose { perm: Vec<usize> },
    Reshape,
    Detach,
    Custom(Rc<RefCell<dyn CustomOp>>),
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Array,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's gradient-tracked leaves.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<usize, Array>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(&v.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records ops eagerly; `backward` replays them in reverse creation order,
/// which is a valid reverse topological order because inputs always precede
/// their consumers.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enable or disable the finite-value check on op outputs. Training loops
    /// turn this off and watch the loss instead, so divergence aborts cleanly.
    pub fn set_finite_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracked input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push_unchecked(Op::Leaf, vec![], value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_unchecked(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    fn push_unchecked(&mut self, op: Op, inputs: Vec<usize>, value: Array, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        inputs: Vec<usize>,
        value: Array,
    ) -> Result<Var, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_unchecked(op, inputs, value, needs_grad))
    }

    // ---- elementwise binary ----------------------------------------------

    /// Checks the single supported broadcast: rhs shape equal to a suffix of
    /// the lhs shape (i.e. rhs repeats over the leading batch axes). Returns
    /// true when broadcasting applies.
    fn binary_broadcast(
        name: &'static str,
        lhs: &[usize],
        rhs: &[usize],
    ) -> Result<bool, TensorError> {
        if lhs == rhs {
            return Ok(false);
        }
        if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
            return Ok(true);
        }
        Err(TensorError::ShapeMismatch {
            op: name,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let broadcast = Self::binary_broadcast(name, av.shape(), bv.shape())?;
        let mut out = Vec::with_capacity(av.len());
        if broadcast {
            let chunk = bv.len();
            for block in av.data().chunks_exact(chunk) {
                for (x, y) in block.iter().zip(bv.data()) {
                    out.push(f(*x, *y));
                }
            }
        } else {
            for (x, y) in av.data().iter().zip(bv.data()) {
                out.push(f(*x, *y));
            }
        }
        let value = Array::from_vec(av.shape(), out);
        self.push(name, op, vec![a.id, b.id], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.map_value(a, |x| x + c);
        self.push("add_scalar", Op::AddScalar(c), vec![a.id], value)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.map_value(a, |x| x * c);
        self.push("mul_scalar", Op::MulScalar(c), vec![a.id], value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul_scalar(a, -1.0)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        let av = &self.nodes[a.id].value;
        Array::from_vec(av.shape(), av.data().iter().map(|&x| f(x)).collect())
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, TensorError> {
        let value = self.map_value(a, f);
        self.push(name, op, vec![a.id], value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        // Unlike `f64::max`, keep NaN flowing so divergence stays visible.
        self.unary("relu", Op::Relu, a, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 })
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sin", Op::Sin, a, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("cos", Op::Cos, a, f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", Op::Log, a, f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("abs", Op::Abs, a, f64::abs)
    }

    // ---- matmul ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (
            self.nodes[a.id].value.shape().to_vec(),
            self.nodes[b.id].value.shape().to_vec(),
        );
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (n, k, m) = (ash[0], ash[1], bsh[1]);
        let mut out = Array::zeros(&[n, m]);
        mat_mul(
            self.nodes[a.id].value.data(),
            (n, k),
            false,
            self.nodes[b.id].value.data(),
            (k, m),
            false,
            out.data_mut(),
        );
        self.push("matmul", Op::MatMul, vec![a.id, b.id], out)
    }

    /// Batched matmul over a shared leading axis: `(b,n,k) x (b,k,m)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (
            self.nodes[a.id].value.shape().to_vec(),
            self.nodes[b.id].value.shape().to_vec(),
        );
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (bt, n, k, m) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = Array::zeros(&[bt, n, m]);
        for i in 0..bt {
            mat_mul(
                &self.nodes[a.id].value.data()[i * n * k..(i + 1) * n * k],
                (n, k),
                false,
                &self.nodes[b.id].value.data()[i * k * m..(i + 1) * k * m],
                (k, m),
                false,
                &mut out.data_mut()[i * n * m..(i + 1) * n * m],
            );
        }
        self.push("bmm", Op::BatchMatMul, vec![a.id, b.id], out)
    }

    /// `(B, T, K) x (K, M) -> (B, T, M)`: the leading axes are flattened for
    /// one shared right-hand side, with no intermediate reshape.
    pub fn matmul3(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (
            self.nodes[a.id].value.shape().to_vec(),
            self.nodes[b.id].value.shape().to_vec(),
        );
        if ash.len() != 3 || bsh.len() != 2 || ash[2] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul3",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (bt, t, k, m) = (ash[0], ash[1], ash[2], bsh[1]);
        let mut out = Array::zeros(&[bt, t, m]);
        mat_mul(
            self.nodes[a.id].value.data(),
            (bt * t, k),
            false,
            self.nodes[b.id].value.data(),
            (k, m),
            false,
            out.data_mut(),
        );
        self.push("matmul3", Op::MatMul3, vec![a.id, b.id], out)
    }

    /// Multi-head self-attention. `qkv` packs the projected queries, keys,
    /// and values as `(B, T, 3*D)`; the output is `(B, T, D)` with `heads`
    /// independent attention maps over `D / heads` channels.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[qkv.id].value.shape().to_vec();
        if shape.len() != 3 || shape[2] % 3 != 0 || (shape[2] / 3) % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("qkv shape {shape:?} incompatible with {heads} heads"),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2] / 3);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = self.nodes[qkv.id].value.data();
        let mut out = Array::zeros(&[b, t, d]);
        let mut probs = Array::zeros(&[b, heads, t, t]);
        let row_len = 3 * d;
        for bi in 0..b {
            let base = bi * t * row_len;
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let p = &mut probs.data_mut()[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let q = &data[base + i * row_len + qo..base + i * row_len + qo + dh];
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, slot) in row.iter_mut().enumerate() {
                        let k = &data[base + j * row_len + ko..base + j * row_len + ko + dh];
                        let mut acc = 0.0;
                        for (qq, kk) in q.iter().zip(k) {
                            acc += qq * kk;
                        }
                        *slot = acc * scale;
                        max = max.max(*slot);
                    }
                    let mut z = 0.0;
                    for slot in row.iter_mut() {
                        *slot = (*slot - max).exp();
                        z += *slot;
                    }
                    for slot in row.iter_mut() {
                        *slot /= z;
                    }
                    let out_row = &mut out.data_mut()
                        [bi * t * d + i * d + h * dh..bi * t * d + i * d + h * dh + dh];
                    for (j, &a) in row.iter().enumerate() {
                        let v = &data[base + j * row_len + vo..base + j * row_len + vo + dh];
                        for (o, vv) in out_row.iter_mut().zip(v) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            Op::Attention {
                heads,
                probs: RefCell::new(Some(probs)),
            },
            vec![qkv.id],
            out,
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.id].value.data().iter().sum();
        self.push("sum", Op::Sum, vec![a.id], Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let s: f64 = v.data().iter().sum();
        let n = v.len() as f64;
        self.push("mean", Op::Mean, vec![a.id], Array::scalar(s / n))
    }

    /// Population variance over every entry.
    pub fn variance(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let n = v.len() as f64;
        let mu: f64 = v.data().iter().sum::<f64>() / n;
        let var: f64 = v.data().iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        self.push("variance", Op::Variance, vec![a.id], Array::scalar(var))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    fn reduce_axis(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        mean: bool,
    ) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: name,
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![0.0; pre * post];
        let data = v.data();
        for p in 0..pre {
            for q in 0..post {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += data[(p * n + j) * post + q];
                }
                out[p * post + q] = if mean { acc / n as f64 } else { acc };
            }
        }
        let op = if mean {
            Op::MeanAxis(axis)
        } else {
            Op::SumAxis(axis)
        };
        self.push(name, op, vec![a.id], Array::from_vec(&out_shape, out))
    }

    // ---- normalization and classification -----------------------------------

    /// Softmax over the last axis, computed with the max-shift.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let shape = v.shape().to_vec();
        let k = *shape.last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let mut out = vec![0.0; v.len()];
        for (row_in, row_out) in v.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        self.push("softmax", Op::Softmax, vec![a.id], Array::from_vec(&shape, out))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let eps = 1e-5;
        let xv = &self.nodes[x.id].value;
        let shape = xv.shape().to_vec();
        let d = *shape.last().unwrap_or(&0);
        let gv = &self.nodes[gain.id].value;
        let bv = &self.nodes[bias.id].value;
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; xv.len()];
        for (row, row_out) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mu, var) = row_stats(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row[j] - mu) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            "layer_norm",
            Op::LayerNorm { eps },
            vec![x.id, gain.id, bias.id],
            Array::from_vec(&shape, out),
        )
    }

    /// Mean negative log-likelihood of `labels` under the logits' softmax,
    /// computed through the log-sum-exp shift.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let v = &self.nodes[logits.id].value;
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy_logits",
                msg: format!("logits {:?} vs {} labels", v.shape(), labels.len()),
            });
        }
        let k = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_logits",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut total = 0.0;
        for (row, &label) in v.data().chunks_exact(k).zip(labels) {
            total += log_sum_exp(row) - row[label];
        }
        let value = Array::scalar(total / labels.len() as f64);
        self.push(
            "cross_entropy_logits",
            Op::CrossEntropyLogits {
                labels: Arc::new(labels.to_vec()),
            },
            vec![logits.id],
            value,
        )
    }

    // ---- structural ----------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].id].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total_axis = 0;
        for p in parts {
            let s = self.nodes[p.id].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let (pre, _, post) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; pre * total_axis * post];
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.id].value;
            let n = v.shape()[axis];
            for b in 0..pre {
                let src = &v.data()[b * n * post..(b + 1) * n * post];
                let dst_start = (b * total_axis + offset) * post;
                out[dst_start..dst_start + n * post].copy_from_slice(src);
            }
            offset += n;
        }
        self.push(
            "concat",
            Op::Concat { axis },
            parts.iter().map(|p| p.id).collect(),
            Array::from_vec(&out_shape, out),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let width = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let mut out = vec![0.0; pre * width * post];
        for b in 0..pre {
            let src_start = (b * n + start) * post;
            out[b * width * post..(b + 1) * width * post]
                .copy_from_slice(&v.data()[src_start..src_start + width * post]);
        }
        self.push(
            "slice",
            Op::Slice { axis, start, end },
            vec![a.id],
            Array::from_vec(&out_shape, out),
        )
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        let shape = v.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("perm {perm:?} invalid for shape {shape:?}"),
            });
        }
        let value = permute(v, perm);
        self.push(
            "transpose",
            Op::Transpose { perm: perm.to_vec() },
            vec![a.id],
            value,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = &self.nodes[a.id].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Array::from_vec(shape, v.data().to_vec());
        self.push("reshape", Op::Reshape, vec![a.id], value)
    }

    /// Identity on values; gradients do not flow past it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.clone();
        self.push_unchecked(Op::Detach, vec![a.id], value, false)
    }

    pub fn custom(
        &mut self,
        op: Rc<RefCell<dyn CustomOp>>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        let value = {
            let values: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.id].value).collect();
            op.borrow_mut().forward(&values)?
        };
        let name = "custom";
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs = inputs.iter().any(|v| self.nodes[v.id].needs_grad);
        Ok(self.push_unchecked(
            Op::Custom(op),
            inputs.iter().map(|v| v.id).collect(),
            value,
            needs,
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Accumulates `d loss / d leaf` for every gradient-tracked leaf reachable
    /// from `loss`. Visits each node exactly once, in reverse creation order.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap, TensorError> {
        let lv = &self.nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.id] = Some(Array::scalar(1.0));

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                adjoints[id] = Some(adj);
                continue;
            }
            // Slices scatter-add straight into their input's adjoint instead
            // of materializing a full-size gradient per slice node.
            if let Op::Slice { axis, start, .. } = self.nodes[id].op {
                let input = self.nodes[id].inputs[0];
                if self.nodes[input].needs_grad {
                    let in_shape = self.nodes[input].value.shape().to_vec();
                    let slot = adjoints[input].get_or_insert_with(|| Array::zeros(&in_shape));
                    let (pre, n, post) = axis_split(&in_shape, axis);
                    let width = self.nodes[id].value.shape()[axis];
                    for b in 0..pre {
                        let dst_start = (b * n + start) * post;
                        let src = &adj.data()[b * width * post..(b + 1) * width * post];
                        for (d, s) in slot.data_mut()[dst_start..dst_start + width * post]
                            .iter_mut()
                            .zip(src)
                        {
                            *d += s;
                        }
                    }
                }
                continue;
            }
            let input_grads = self.node_backward(id, &adj);
            let inputs = self.nodes[id].inputs.clone();
            for (slot, grad) in inputs.iter().zip(input_grads) {
                if let Some(g) = grad {
                    if !self.nodes[*slot].needs_grad {
                        continue;
                    }
                    match &mut adjoints[*slot] {
                        Some(existing) => existing.add_assign(&g),
                        none => *none = Some(g),
                    }
                }
            }
        }

        let mut grads = HashMap::new();
        for (id, adj) in adjoints.into_iter().enumerate() {
            if let Some(a) = adj {
                if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].needs_grad {
                    grads.insert(id, a);
                }
            }
        }
        Ok(GradMap { grads })
    }

    fn node_backward(&self, id: usize, adj: &Array) -> Vec<Option<Array>> {
        let node = &self.nodes[id];
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let needs = |i: usize| self.nodes[node.inputs[i]].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Detach => vec![None],
            Op::Add => {
                let da = needs(0).then(|| adj.clone());
                let db = needs(1).then(|| reduce_to(adj, input(1).shape()));
                vec![da, db]
            }
            Op::Sub => {
                let da = needs(0).then(|| adj.clone());
                let db = needs(1).then(|| {
                    let mut r = reduce_to(adj, input(1).shape());
                    for v in r.data_mut() {
                        *v = -*v;
                    }
                    r
                });
                vec![da, db]
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let broadcast = a.shape() != b.shape();
                let da = needs(0).then(|| {
                    let mut out = Array::zeros(a.shape());
                    if broadcast {
                        let chunk = b.len();
                        for (adj_blk, out_blk) in adj
                            .data()
                            .chunks_exact(chunk)
                            .zip(out.data_mut().chunks_exact_mut(chunk))
                        {
                            for j in 0..chunk {
                                out_blk[j] = adj_blk[j] * b.data()[j];
                            }
                        }
                    } else {
                        for ((o, g), y) in out.data_mut().iter_mut().zip(adj.data()).zip(b.data()) {
                            *o = g * y;
                        }
                    }
                    out
                });
                let db = needs(1).then(|| {
                    if broadcast {
                        let chunk = b.len();
                        let mut out = Array::zeros(b.shape());
                        for (adj_blk, a_blk) in adj
                            .data()
                            .chunks_exact(chunk)
                            .zip(a.data().chunks_exact(chunk))
                        {
                            for j in 0..chunk {
                                out.data_mut()[j] += adj_blk[j] * a_blk[j];
                            }
                        }
                        out
                    } else {
                        let mut out = Array::zeros(b.shape());
                        for ((o, g), x) in out.data_mut().iter_mut().zip(adj.data()).zip(a.data()) {
                            *o = g * x;
                        }
                        out
                    }
                });
                vec![da, db]
            }
            Op::AddScalar(_) => vec![needs(0).then(|| adj.clone())],
            Op::MulScalar(c) => {
                let c = *c;
                vec![needs(0).then(|| {
                    let mut g = adj.clone();
                    for v in g.data_mut() {
                        *v *= c;
                    }
                    g
                })]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                let da = needs(0).then(|| {
                    let mut out = Array::zeros(&[n, k]);
                    mat_mul(adj.data(), (n, m), false, b.data(), (k, m), true, out.data_mut());
                    out
                });
                let db = needs(1).then(|| {
                    let mut out = Array::zeros(&[k, m]);
                    mat_mul(a.data(), (n, k), true, adj.data(), (n, m), false, out.data_mut());
                    out
                });
                vec![da, db]
            }
            Op::MatMul3 => {
                let (a, b) = (input(0), input(1));
                let (bt, t, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let m = b.shape()[1];
                let da = needs(0).then(|| {
                    let mut out = Array::zeros(&[bt, t, k]);
                    mat_mul(adj.data(), (bt * t, m), false, b.data(), (k, m), true, out.data_mut());
                    out
                });
                let db = needs(1).then(|| {
                    let mut out = Array::zeros(&[k, m]);
                    mat_mul(a.data(), (bt * t, k), true, adj.data(), (bt * t, m), false, out.data_mut());
                    out
                });
                vec![da, db]
            }
            Op::Attention { heads, probs } => {
                let qkv = input(0);
                if !needs(0) {
                    return vec![None];
                }
                let shape = qkv.shape();
                let (b, t, d) = (shape[0], shape[1], shape[2] / 3);
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let probs = probs.borrow();
                let probs = probs.as_ref().expect("attention probabilities saved");
                let data = qkv.data();
                let row_len = 3 * d;
                let mut dqkv = Array::zeros(shape);
                for bi in 0..b {
                    let base = bi * t * row_len;
                    for h in 0..heads {
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        let p = &probs.data()[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        for i in 0..t {
                            let drow = &adj.data()
                                [bi * t * d + i * d + h * dh..bi * t * d + i * d + h * dh + dh];
                            let arow = &p[i * t..(i + 1) * t];
                            // dV += A^T dOut, and dScores via the softmax rule.
                            let mut dscores = vec![0.0; t];
                            let mut dot_sum = 0.0;
                            for j in 0..t {
                                let v = &data[base + j * row_len + vo..base + j * row_len + vo + dh];
                                let mut dot = 0.0;
                                for (dd, vv) in drow.iter().zip(v) {
                                    dot += dd * vv;
                                }
                                dscores[j] = dot;
                                dot_sum += dot * arow[j];
                                let dv = &mut dqkv.data_mut()
                                    [base + j * row_len + vo..base + j * row_len + vo + dh];
                                for (slot, dd) in dv.iter_mut().zip(drow) {
                                    *slot += arow[j] * dd;
                                }
                            }
                            for j in 0..t {
                                dscores[j] = arow[j] * (dscores[j] - dot_sum) * scale;
                            }
                            // dQ_i += sum_j dS_ij K_j ; dK_j += dS_ij Q_i.
                            for j in 0..t {
                                let ds = dscores[j];
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let kv = data[base + j * row_len + ko + c];
                                    let qv = data[base + i * row_len + qo + c];
                                    dqkv.data_mut()[base + i * row_len + qo + c] += ds * kv;
                                    dqkv.data_mut()[base + j * row_len + ko + c] += ds * qv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dqkv)]
            }
            Op::BatchMatMul => {
                let (a, b) = (input(0), input(1));
                let (bt, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let m = b.shape()[2];
                let da = needs(0).then(|| {
                    let mut out = Array::zeros(&[bt, n, k]);
                    for i in 0..bt {
                        mat_mul(
                            &adj.data()[i * n * m..(i + 1) * n * m],
                            (n, m),
                            false,
                            &b.data()[i * k * m..(i + 1) * k * m],
                            (k, m),
                            true,
                            &mut out.data_mut()[i * n * k..(i + 1) * n * k],
                        );
                    }
                    out
                });
                let db = needs(1).then(|| {
                    let mut out = Array::zeros(&[bt, k, m]);
                    for i in 0..bt {
                        mat_mul(
                            &a.data()[i * n * k..(i + 1) * n * k],
                            (n, k),
                            true,
                            &adj.data()[i * n * m..(i + 1) * n * m],
                            (n, m),
                            false,
                            &mut out.data_mut()[i * k * m..(i + 1) * k * m],
                        );
                    }
                    out
                });
                vec![da, db]
            }
            Op::Relu => {
                let x = input(0);
                vec![needs(0).then(|| {
                    let mut g = Array::zeros(x.shape());
                    for ((o, &v), &gu) in g.data_mut().iter_mut().zip(x.data()).zip(adj.data()) {
                        *o = if v > 0.0 { gu } else { 0.0 };
                    }
                    g
                })]
            }
            Op::Sin => self.unary_backward(id, adj, |x| x.cos()),
            Op::Cos => self.unary_backward(id, adj, |x| -x.sin()),
            Op::Exp => self.unary_backward(id, adj, |x| x.exp()),
            Op::Log => self.unary_backward(id, adj, |x| 1.0 / x),
            Op::Abs => self.unary_backward(id, adj, |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Sum => {
                let x = input(0);
                let g = adj.item();
                vec![needs(0).then(|| Array::full(x.shape(), g))]
            }
            Op::Mean => {
                let x = input(0);
                let g = adj.item() / x.len() as f64;
                vec![needs(0).then(|| Array::full(x.shape(), g))]
            }
            Op::Variance => {
                let x = input(0);
                let n = x.len() as f64;
                let mu: f64 = x.data().iter().sum::<f64>() / n;
                let g = adj.item();
                vec![needs(0).then(|| {
                    let mut out = Array::zeros(x.shape());
                    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        *o = g * 2.0 * (v - mu) / n;
                    }
                    out
                })]
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let x = input(0);
                let (pre, n, post) = axis_split(x.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                vec![needs(0).then(|| {
                    let mut out = Array::zeros(x.shape());
                    for p in 0..pre {
                        for j in 0..n {
                            for q in 0..post {
                                out.data_mut()[(p * n + j) * post + q] =
                                    adj.data()[p * post + q] * scale;
                            }
                        }
                    }
                    out
                })]
            }
            Op::Softmax => {
                let y = &node.value;
                let k = *y.shape().last().unwrap();
                vec![needs(0).then(|| {
                    let mut out = Array::zeros(y.shape());
                    for ((yr, gr), or) in y
                        .data()
                        .chunks_exact(k)
                        .zip(adj.data().chunks_exact(k))
                        .zip(out.data_mut().chunks_exact_mut(k))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            or[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out
                })]
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (input(0), input(1));
                let d = *x.shape().last().unwrap();
                let rows = x.len() / d;
                let mut dx = needs(0).then(|| Array::zeros(x.shape()));
                let mut dgain = needs(1).then(|| Array::zeros(&[d]));
                let mut dbias = needs(2).then(|| Array::zeros(&[d]));
                for r in 0..rows {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let gr = &adj.data()[r * d..(r + 1) * d];
                    let (mu, var) = row_stats(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    if let Some(dg) = dgain.as_mut() {
                        for j in 0..d {
                            dg.data_mut()[j] += gr[j] * (row[j] - mu) * inv;
                        }
                    }
                    if let Some(db) = dbias.as_mut() {
                        for j in 0..d {
                            db.data_mut()[j] += gr[j];
                        }
                    }
                    if let Some(dxa) = dx.as_mut() {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mu) * inv;
                            let dxh = gr[j] * gain.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let dn = d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mu) * inv;
                            let dxh = gr[j] * gain.data()[j];
                            dxa.data_mut()[r * d + j] =
                                inv * (dxh - sum_dxh / dn - xh * sum_dxh_xh / dn);
                        }
                    }
                }
                vec![dx, dgain, dbias]
            }
            Op::CrossEntropyLogits { labels } => {
                let logits = input(0);
                let k = logits.shape()[1];
                let n = labels.len() as f64;
                let g = adj.item();
                vec![needs(0).then(|| {
                    let mut out = Array::zeros(logits.shape());
                    for ((row, &label), or) in logits
                        .data()
                        .chunks_exact(k)
                        .zip(labels.iter())
                        .zip(out.data_mut().chunks_exact_mut(k))
                    {
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            or[j] = g * (p - if j == label { 1.0 } else { 0.0 }) / n;
                        }
                    }
                    out
                })]
            }
            Op::Concat { axis } => {
                let out_shape = node.value.shape().to_vec();
                let (pre, total, post) = axis_split(&out_shape, *axis);
                let mut grads = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for (i, &inp) in node.inputs.iter().enumerate() {
                    let v = &self.nodes[inp].value;
                    let n = v.shape()[*axis];
                    let grad = needs(i).then(|| {
                        let mut out = Array::zeros(v.shape());
                        for b in 0..pre {
                            let src_start = (b * total + offset) * post;
                            out.data_mut()[b * n * post..(b + 1) * n * post]
                                .copy_from_slice(&adj.data()[src_start..src_start + n * post]);
                        }
                        out
                    });
                    grads.push(grad);
                    offset += n;
                }
                grads
            }
            Op::Slice { .. } => unreachable!("slice adjoints accumulate in backward()"),
            Op::Transpose { perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![needs(0).then(|| permute(adj, &inverse))]
            }
            Op::Reshape => {
                let x = input(0);
                vec![needs(0).then(|| adj.clone().reshaped(x.shape()))]
            }
            Op::Custom(op) => {
                let values: Vec<&Array> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
                op.borrow_mut().backward(&values, adj, &need)
            }
        }
    }

    fn unary_backward(&self, id: usize, adj: &Array, dfdx: impl Fn(f64) -> f64) -> Vec<Option<Array>> {
        let node = &self.nodes[id];
        let x = &self.nodes[node.inputs[0]].value;
        if !self.nodes[node.inputs[0]].needs_grad {
            return vec![None];
        }
        let mut out = Array::zeros(x.shape());
        for ((o, &v), &g) in out.data_mut().iter_mut().zip(x.data()).zip(adj.data()) {
            *o = g * dfdx(v);
        }
        vec![Some(out)]
    }
}

/// `(pre, n, post)` sizes around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let post: usize = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sum `adj` down to `target` when it was broadcast over the leading axis.
fn reduce_to(adj: &Array, target: &[usize]) -> Array {
    if adj.shape() == target {
        return adj.clone();
    }
    let chunk: usize = target.iter().product();
    let mut out = Array::zeros(target);
    for block in adj.data().chunks_exact(chunk) {
        for (o, v) in out.data_mut().iter_mut().zip(block) {
            *o += v;
        }
    }
    out
}

fn permute(v: &Array, perm: &[usize]) -> Array {
    let shape = v.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // Stride of the source, walked in the output's index order.
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Array::zeros(&out_shape);
    let data = v.data();
    let out_data = out.data_mut();
    for (flat, slot) in out_data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        for k in 0..rank {
            let i = rem / out_strides[k];
            rem %= out_strides[k];
            src += i * src_strides[k];
        }
        *slot = data[src];
    }
    out
}

/// 2-D matrix product through `ndarray`; transposition handled by views.
fn mat_mul(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
) {
    let av = ArrayView2::from_shape(a_dims, a).expect("lhs shape");
    let bv = ArrayView2::from_shape(b_dims, b).expect("rhs shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let (n, m) = (av.nrows(), bv.ncols());
    let mut ov = ArrayViewMut2::from_shape((n, m), out).expect("out shape");
    general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
}

#[cfg(test)]
mod tests {
    use super::super::grad_check;
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape, data.to_vec())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn detached_input_absent_from_gradient_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
        let c = tape.constant(arr(&[2], &[3.0, 4.0]));
        let d = tape.detach(x);
        let prod = tape.mul(d, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(c).is_none());
        assert!(grads.is_empty());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[1, 4], &[0.7; 4]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[2, 3], &[1.0, -2.0, 0.5, 30.0, -30.0, 3.0]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_negative_is_zero_with_zero_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[1], &[-3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn layer_norm_rows_standardized_before_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 4.0, 9.0]));
        let g = tape.constant(Array::full(&[4], 1.0));
        let b = tape.constant(Array::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks_exact(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-6, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn layer_norm_weighted_sum_matches_finite_differences() {
        let x = arr(&[2, 3], &[0.3, -1.2, 2.0, 0.9, 0.1, -0.4]);
        let g = arr(&[3], &[1.1, 0.9, 1.3]);
        let b = arr(&[3], &[0.2, -0.1, 0.05]);
        let w = arr(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let report = grad_check(
            |tape, vars| {
                let wc = tape.constant(w.clone());
                let y = tape.layer_norm(vars[0], vars[1], vars[2])?;
                let wy = tape.mul(y, wc)?;
                tape.sum(wy)
            },
            &[x, g, b],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Array::zeros(&[5, 4]));
        let loss = tape.cross_entropy_logits(logits, &[0, 1, 2, 3, 0]).unwrap();
        assert!((tape.value(loss).item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_extreme_logits_finite_gradients() {
        let mut tape = Tape::new();
        let logits = tape.leaf(arr(&[2, 3], &[30.0, -30.0, 0.0, -30.0, 30.0, 0.0]));
        let loss = tape.cross_entropy_logits(logits, &[1, 0]).unwrap();
        assert!(tape.value(loss).item().is_finite());
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(logits).unwrap().all_finite());
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let a = arr(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let b = arr(&[3, 2], &[1.0, 0.5, -0.25, 2.0, 0.75, -1.5]);
        let report = grad_check(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                let sq = tape.mul(c, c)?;
                tape.sum(sq)
            },
            &[a, b],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn linear_map_gradient_is_nearly_exact() {
        // No truncation error for a linear map, so a wide step keeps the
        // finite differences clear of rounding noise.
        let x = arr(&[4], &[0.3, -0.7, 1.9, 0.01]);
        let report = grad_check(
            |tape, vars| {
                let w = tape.constant(arr(&[4], &[2.0, -3.0, 0.5, 7.0]));
                let wx = tape.mul(vars[0], w)?;
                tape.sum(wx)
            },
            &[x],
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr(&[2], &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_is_typed_and_named() {
        let mut tape = Tape::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let b = tape.constant(Array::zeros(&[2, 2]));
        match tape.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn broadcast_add_over_leading_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(arr(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn transpose_slice_concat_round_trip_gradients() {
        let x = arr(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let report = grad_check(
            |tape, vars| {
                let t = tape.transpose(vars[0], &[1, 0])?; // (3,2)
                let top = tape.slice(t, 0, 0, 2)?;
                let bottom = tape.slice(t, 0, 2, 3)?;
                let back = tape.concat(&[top, bottom], 0)?;
                let sq = tape.mul(back, back)?;
                tape.sum(sq)
            },
            &[x],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn variance_and_axis_reductions_check_out() {
        let x = arr(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.5, 7.0]);
        let report = grad_check(
            |tape, vars| {
                let m = tape.mean_axis(vars[0], 1)?;
                let s = tape.sum_axis(vars[0], 0)?;
                let v = tape.variance(s)?;
                let mm = tape.sum(m)?;
                let combined = tape.add(v, mm)?;
                tape.sum(combined)
            },
            &[x],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul3_matches_reshaped_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(arr(&[2, 3, 4], &(0..24).map(|i| i as f64 * 0.1).collect::<Vec<_>>()));
        let b = tape.constant(arr(&[4, 2], &(0..8).map(|i| 1.0 - i as f64 * 0.3).collect::<Vec<_>>()));
        let c3 = tape.matmul3(a, b).unwrap();
        let a2 = tape.reshape(a, &[6, 4]).unwrap();
        let c2 = tape.matmul(a2, b).unwrap();
        assert_eq!(tape.value(c3).shape(), &[2, 3, 2]);
        assert_eq!(tape.value(c3).data(), tape.value(c2).data());
    }

    #[test]
    fn matmul3_gradients_match_finite_differences() {
        let a = arr(&[2, 2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75, 0.1, 0.9, -0.4, 0.7, -0.2, 1.1]);
        let b = arr(&[3, 2], &[1.0, 0.5, -0.25, 2.0, 0.75, -1.5]);
        let report = grad_check(
            |tape, vars| {
                let c = tape.matmul3(vars[0], vars[1])?;
                let sq = tape.mul(c, c)?;
                tape.sum(sq)
            },
            &[a, b],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn attention_rows_attend_and_differentiate() {
        // Value check: with q = k = 0 the attention weights are uniform, so
        // the output is the mean of the value rows.
        let (b, t, d) = (1, 3, 4);
        let mut qkv = vec![0.0; b * t * 3 * d];
        for i in 0..t {
            for c in 0..d {
                qkv[i * 3 * d + 2 * d + c] = (i * d + c) as f64;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[b, t, 3 * d], &qkv));
        let out = tape.attention(x, 2).unwrap();
        for i in 0..t {
            for c in 0..d {
                let mean = (0..t).map(|j| (j * d + c) as f64).sum::<f64>() / t as f64;
                assert!((tape.value(out).data()[i * d + c] - mean).abs() < 1e-12);
            }
        }
        // Gradient check on a random case.
        let mut vals = Vec::new();
        let mut state = 0.37_f64;
        for _ in 0..(2 * 4 * 3 * 4) {
            state = (state * 9.7 + 0.31).sin();
            vals.push(state);
        }
        let qkv = arr(&[2, 4, 12], &vals);
        let report = grad_check(
            |tape, vars| {
                let out = tape.attention(vars[0], 2)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            &[qkv],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn suffix_broadcast_covers_trailing_vector() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let b = tape.leaf(arr(&[2], &[10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0, 17.0, 28.0]
        );
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(arr(&[3], &[0.1, 0.2, 0.3]));
            let e = tape.exp(x).unwrap();
            let s = tape.sin(e).unwrap();
            let loss = tape.sum(s).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
