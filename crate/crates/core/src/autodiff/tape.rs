use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for fault injection and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softmax,
    Sum,
    Mean,
    Pow,
    Sqrt,
    Clamp,
    Attention,
    Standardize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    Pow(Var, f64),
    Sqrt(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    /// `weights` holds the softmax rows of every head, `[heads x nq x nk]`.
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<f64> },
    /// `inv_std` holds one reciprocal standard deviation per row.
    Standardize { input: Var, inv_std: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Pow(..) => OpKind::Pow,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Attention { .. } => OpKind::Attention,
            Op::Standardize { .. } => OpKind::Standardize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a static forward computation and replays it in reverse to
/// accumulate gradients.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

/// Strides mapping each output element of a broadcast binary op back to its
/// two inputs.
struct Broadcast {
    out: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        if lhs == rhs {
            return Some(Broadcast {
                out: lhs.to_vec(),
                lhs_strides: Vec::new(),
                rhs_strides: Vec::new(),
                same: true,
            });
        }
        let rank = lhs.len().max(rhs.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pl, pr) = (pad(lhs), pad(rhs));
        let mut out = Vec::with_capacity(rank);
        for d in 0..rank {
            if pl[d] == pr[d] || pr[d] == 1 {
                out.push(pl[d]);
            } else if pl[d] == 1 {
                out.push(pr[d]);
            } else {
                return None;
            }
        }
        let strides = |p: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if p[d] == 1 && out[d] != 1 { 0 } else { acc };
                acc *= p[d];
            }
            st
        };
        Some(Broadcast {
            lhs_strides: strides(&pl),
            rhs_strides: strides(&pr),
            out,
            same: false,
        })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out.len();
        let mut idx = vec![0usize; rank];
        let (mut il, mut ir) = (0usize, 0usize);
        for o in 0..n {
            f(o, il, ir);
            for d in (0..rank).rev() {
                idx[d] += 1;
                il += self.lhs_strides[d];
                ir += self.rhs_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                il -= self.lhs_strides[d] * self.out[d];
                ir -= self.rhs_strides[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mat_view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix buffer sized by shape")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of every `kind` op wrong by a factor of 1.5.
    /// Only meant for exercising the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches value shape")
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{:?}", op.kind())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Broadcast::new(va.shape(), vb.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; bc.numel()];
        bc.visit(|o, i, j| out[o] = f(da[i], db[j]));
        let value = Tensor::new(bc.out, out)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        let (m, k) = va.dims2().map_err(|_| mismatch())?;
        let (k2, n) = vb.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        {
            let mut cv = ArrayViewMut2::from_shape((m, n), &mut out[..]).expect("sized");
            general_mat_mul(
                1.0,
                &mat_view(va.data(), m, k),
                &mat_view(vb.data(), k, n),
                0.0,
                &mut cv,
            );
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = va.dims2()?;
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { axis, shape: base });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for v in inputs {
            let t = &self.nodes[v.0].value;
            let len = t.shape()[axis];
            let d = t.data();
            for o in 0..outer {
                let src = &d[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, shape });
        }
        if start > end || end > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let d = va.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&d[base..base + width * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let value = Tensor::new(new_shape, out)?;
        self.push(value, Op::Slice { input: a, axis, start }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let out = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(value, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Clamps into `[lo, hi]`; either bound may be infinite.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = va.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { input: a, axis }, &[a])
    }

    /// Multi-head scaled dot-product attention of `q` `[nq x d]` over `k` and
    /// `v` `[nk x d]`, with channels split evenly into `heads` groups.
    /// Returns the concatenated head outputs `[nq x d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mismatch = |rhs: &Tensor| Error::Shape {
            op: "attention",
            lhs: tq.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let (nq, d) = tq.dims2()?;
        let (nk, dk) = tk.dims2().map_err(|_| mismatch(tk))?;
        if dk != d {
            return Err(mismatch(tk));
        }
        if tv.shape() != [nk, d] {
            return Err(mismatch(tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} channels do not split into {heads} heads")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (xq, xk, xv) = (tq.data(), tk.data(), tv.data());
        let mut weights = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..nq {
                let w = &mut weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let qi = &xq[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    let kj = &xk[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *wj = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    total += *wj;
                }
                let oi = &mut out[i * d + off..i * d + off + hd];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj /= total;
                    let vj = &xv[j * d + off..j * d + off + hd];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += *wj * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, d], out)?;
        self.push(value, Op::Attention { q, k, v, heads, weights }, &[q, k, v])
    }

    /// Attention weights recorded by an [`attention`](Self::attention) node,
    /// `[heads x nq x nk]`.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, weights, .. } => {
                let nq = self.nodes[q.0].value.shape()[0];
                let nk = self.nodes[k.0].value.shape()[0];
                Tensor::new(vec![*heads, nq, nk], weights.clone()).ok()
            }
            _ => None,
        }
    }

    /// Each row of a matrix shifted to zero mean and scaled to unit variance
    /// (population variance plus `eps`).
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (r, c) = va.dims2()?;
        let d = va.data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::Standardize { input: a, inv_std }, &[a])
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let d = va.data();
        let value = match axis {
            None => {
                let s: f64 = d.iter().sum();
                let n = d.len().max(1) as f64;
                Tensor::scalar(if mean { s / n } else { s })
            }
            Some(axis) => {
                let shape = va.shape().to_vec();
                if axis >= shape.len() {
                    return Err(Error::Axis { axis, shape });
                }
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let row = &d[o * len * inner + k * inner..o * len * inner + (k + 1) * inner];
                        for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
                if mean && len > 0 {
                    out.iter_mut().for_each(|x| *x /= len as f64);
                }
                let mut new_shape = shape;
                new_shape[axis] = 1;
                Tensor::new(new_shape, out)?
            }
        };
        let op = if mean {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        self.push(value, op, &[a])
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    /// Gradients from earlier calls are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = self.grads[id].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            for (input, contrib) in self.backward_rule(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `id` to its inputs, given its output
    /// gradient `g`.
    fn backward_rule(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (val(a), val(b));
                let bc = Broadcast::new(ta.shape(), tb.shape()).expect("checked in forward");
                let (xa, xb) = (ta.data(), tb.data());
                let kind = node.op.kind();
                if bc.same {
                    if self.wants(a) {
                        let ga = match kind {
                            OpKind::Add | OpKind::Sub => g.to_vec(),
                            OpKind::Mul => g.iter().zip(xb).map(|(g, b)| g * b).collect(),
                            _ => g.iter().zip(xb).map(|(g, b)| g / b).collect(),
                        };
                        out.push((a, ga));
                    }
                    if self.wants(b) {
                        let gb = match kind {
                            OpKind::Add => g.to_vec(),
                            OpKind::Sub => g.iter().map(|g| -g).collect(),
                            OpKind::Mul => g.iter().zip(xa).map(|(g, a)| g * a).collect(),
                            _ => g.iter().zip(xa).zip(xb).map(|((g, a), b)| -g * a / (b * b)).collect(),
                        };
                        out.push((b, gb));
                    }
                    return out;
                }
                if self.wants(a) {
                    let mut ga = vec![0.0; xa.len()];
                    bc.visit(|o, i, j| {
                        ga[i] += match kind {
                            OpKind::Add | OpKind::Sub => g[o],
                            OpKind::Mul => g[o] * xb[j],
                            _ => g[o] / xb[j],
                        }
                    });
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; xb.len()];
                    bc.visit(|o, i, j| {
                        gb[j] += match kind {
                            OpKind::Add => g[o],
                            OpKind::Sub => -g[o],
                            OpKind::Mul => g[o] * xa[i],
                            _ => -g[o] * xa[i] / (xb[j] * xb[j]),
                        }
                    });
                    out.push((b, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().expect("matrix");
                let n = tb.shape()[1];
                let gv = mat_view(g, m, n);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    let mut view = ArrayViewMut2::from_shape((m, k), &mut ga[..]).expect("sized");
                    general_mat_mul(1.0, &gv, &mat_view(tb.data(), k, n).t(), 0.0, &mut view);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    let mut view = ArrayViewMut2::from_shape((k, n), &mut gb[..]).expect("sized");
                    general_mat_mul(1.0, &mat_view(ta.data(), m, k).t(), &gv, 0.0, &mut view);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().expect("matrix");
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, ga));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let total = shape[*axis];
                let (outer, _, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((*v, gv));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let width = node.value.shape()[*axis];
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    gi[base..base + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                out.push((*input, gi));
            }
            Op::Exp(a) => out.push((*a, g.iter().zip(y).map(|(g, y)| g * y).collect())),
            Op::Log(a) => {
                let x = val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(a) => {
                out.push((*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Pow(a, p) => {
                let x = val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(g, x)| g * p * x.powf(p - 1.0)).collect()));
            }
            Op::Sqrt(a) => out.push((
                *a,
                // A zero upstream gradient stays zero even where sqrt(0) has no slope.
                g.iter().zip(y).map(|(&g, y)| if g == 0.0 { 0.0 } else { g * 0.5 / y }).collect(),
            )),
            Op::Clamp { input, lo, hi } => {
                let x = val(*input).data();
                out.push((
                    *input,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gi[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                out.push((*input, gi));
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (nq, d) = tq.dims2().expect("matrix");
                let nk = tk.shape()[0];
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (xq, xk, xv) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * d];
                let mut ds = vec![0.0; nk];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..nq {
                        let w = &weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let gi = &g[i * d + off..i * d + off + hd];
                        let mut dot = 0.0;
                        for j in 0..nk {
                            let vj = &xv[j * d + off..j * d + off + hd];
                            let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = dp;
                            dot += dp * w[j];
                            for (o, x) in gv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                                *o += w[j] * x;
                            }
                        }
                        let qi = &xq[i * d + off..i * d + off + hd];
                        for j in 0..nk {
                            let s = w[j] * (ds[j] - dot) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            let kj = &xk[j * d + off..j * d + off + hd];
                            for (o, x) in gq[i * d + off..i * d + off + hd].iter_mut().zip(kj) {
                                *o += s * x;
                            }
                            for (o, x) in gk[j * d + off..j * d + off + hd].iter_mut().zip(qi) {
                                *o += s * x;
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        out.push((var, grad));
                    }
                }
            }
            Op::Standardize { input, inv_std } => {
                let c = node.value.shape()[1];
                let mut gi = vec![0.0; y.len()];
                for (i, inv) in inv_std.iter().enumerate() {
                    let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, g), y) in gi[i * c..(i + 1) * c].iter_mut().zip(gr).zip(yr) {
                        *o = inv * (g - mg - y * mgy);
                    }
                }
                out.push((*input, gi));
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let shape = val(*input).shape();
                let n = val(*input).numel();
                let gi = match axis {
                    None => {
                        let scale = if is_mean { 1.0 / n.max(1) as f64 } else { 1.0 };
                        vec![g[0] * scale; n]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_split(shape, *axis);
                        let scale = if is_mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
                        let mut gi = vec![0.0; n];
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    gi[o * len * inner + k * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        gi
                    }
                };
                out.push((*input, gi));
            }
        }
        out
    }
}

/// Composite helpers built only from the primitive ops above.
impl Tape {
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        let c = self.scalar(value);
        self.add(a, c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `|x| = relu(x) + relu(-x)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let n = self.neg(a)?;
        let neg = self.relu(n)?;
        self.add(pos, neg)
    }

    /// Elementwise minimum, `(a + b - |a - b|) / 2`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.add(a, b)?;
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        let r = self.sub(s, ad)?;
        self.scale(r, 0.5)
    }

    /// Elementwise maximum, `(a + b + |a - b|) / 2`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.add(a, b)?;
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        let r = self.add(s, ad)?;
        self.scale(r, 0.5)
    }

    /// Row `index` of a matrix as a `[1 x cols]` tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.slice(a, 0, index, index + 1)
    }

    /// Stacks the listed rows of a matrix, in order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let picked = rows
            .iter()
            .map(|&r| self.row(a, r))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&picked, 0)
    }
}
