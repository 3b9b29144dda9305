//! Execution-order tape with per-node backward rules.

use super::ops;
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, used for error messages and for the
/// backward-fault hook that gradient-check negative controls rely on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    MatMul,
    Add,
    Mul,
    Scale,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Relu,
    Embedding,
    Concat,
    Slice,
    Mean,
    Sum,
    Permute,
    Reshape,
    Pick,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Embedding => "embedding_lookup",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Permute => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Pick => "pick",
        }
    }

    fn backward_name(self) -> &'static str {
        match self {
            OpKind::Input => "backward(input)",
            OpKind::MatMul => "backward(matmul)",
            OpKind::Add => "backward(add)",
            OpKind::Mul => "backward(mul)",
            OpKind::Scale => "backward(scale)",
            OpKind::Softmax => "backward(softmax)",
            OpKind::LogSoftmax => "backward(log_softmax)",
            OpKind::LayerNorm => "backward(layer_norm)",
            OpKind::Relu => "backward(relu)",
            OpKind::Embedding => "backward(embedding_lookup)",
            OpKind::Concat => "backward(concat)",
            OpKind::Slice => "backward(slice)",
            OpKind::Mean => "backward(mean)",
            OpKind::Sum => "backward(sum)",
            OpKind::Permute => "backward(transpose)",
            OpKind::Reshape => "backward(reshape)",
            OpKind::Pick => "backward(pick)",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Input, MatMul, Add, Mul, Scale, Softmax, LogSoftmax, LayerNorm, Relu, Embedding,
            Concat, Slice, Mean, Sum, Permute, Reshape, Pick,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

enum Op<F> {
    Input { param: Option<usize> },
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: F },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, rstd: Vec<F> },
    Relu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Mean { a: usize, axis: usize },
    Sum { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Pick { a: usize, idx: Vec<usize> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter
/// slot. Slots never reached by the loss hold zeros.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, slot: usize) -> Option<&Tensor<F>> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn into_slots(self) -> Vec<Option<Tensor<F>>> {
        self.slots
    }
}

/// A single-writer record of operations in execution order.
///
/// Inputs are either parameters (registered with a slot, collected by
/// [`Graph::backward`]) or constants. Every op validates shapes up front and
/// rejects non-finite results, naming the op that produced them.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    fault: Option<OpKind>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Makes the backward rule of `kind` wrong on purpose (input gradients
    /// scaled by 1.5). Only useful as a gradient-check negative control.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let needs_grad = match &op {
            Op::Input { param } => param.is_some(),
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                self.nodes[*a].needs_grad || self.nodes[*b].needs_grad
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.nodes[*x].needs_grad
                    || self.nodes[*gamma].needs_grad
                    || self.nodes[*beta].needs_grad
            }
            Op::Embedding { table, .. } => self.nodes[*table].needs_grad,
            Op::Concat { inputs, .. } => inputs.iter().any(|&i| self.nodes[i].needs_grad),
            Op::Scale { a, .. }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Relu { a }
            | Op::Slice { a, .. }
            | Op::Mean { a, .. }
            | Op::Sum { a }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Pick { a, .. } => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable tensor under gradient slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Input { param: Some(slot) })
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Input { param: None })
    }

    /// `a · b` over the last two axes. `a` is `[.., m, k]`; `b` is either a
    /// shared `[k, n]` matrix or a batch `[.., k, n]` with the same leading
    /// dims as `a`. Output is `[.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes; `b` is `[n, k]` or `[.., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = av.len() / k;
            ops::gemm(rows, k, n, av, false, bv, trans_b, &mut out, false);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let batch = av.len() / (m * k);
            for i in 0..batch {
                ops::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    trans_b,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
        )
    }

    /// Broadcasting addition (numpy rules, right-aligned).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add { a: a.0, b: b.0 })
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul { a: a.0, b: b.0 })
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ops::broadcast_shape(op, ta.shape(), tb.shape())?;
        let data = ops::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, f);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = F::from_f64_lossy(factor);
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Scale { a: a.0, factor })
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let y = ops::softmax(t.data(), t.shape(), axis, false);
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        self.push(out, Op::Softmax { a: a.0, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let t = self.value(a);
        let y = ops::softmax(t.data(), t.shape(), axis, true);
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        self.push(out, Op::LogSoftmax { a: a.0, axis })
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().ok_or(TensorError::Axis {
            op: "layer_norm",
            axis: 0,
            shape: sx.clone(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (y, xhat, rstd) = ops::layer_norm(
            self.value(x).data(),
            dim,
            self.value(gamma).data(),
            self.value(beta).data(),
            F::from_f64_lossy(eps),
        );
        self.push(
            Tensor::from_parts(sx, y),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(F::zero())).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Relu { a: a.0 })
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("table shape {st:?} with {} ids", ids.len()),
            });
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = ops::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let s = self.shape(a).to_vec();
        if start >= end || end > s[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                size: s[axis],
            });
        }
        let (outer, len, inner) = ops::split_axis(&s, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = end - start;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
        )
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let s = self.shape(a).to_vec();
        let (outer, len, inner) = ops::split_axis(&s, axis);
        let data = self.value(a).data();
        let inv = F::one() / F::from_usize(len).unwrap();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + data[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        self.push(Tensor::from_parts(out_shape, out), Op::Mean { a: a.0, axis })
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 })
    }

    /// General axis permutation; `perm[i]` is the input axis that becomes
    /// output axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("permutation {perm:?} for shape {s:?}"),
            });
        }
        let (data, out_shape) = ops::permute(self.value(a).data(), &s, perm);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: d0.max(d1),
                shape: self.shape(a).to_vec(),
            });
        }
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone();
        let out = t.reshaped(shape)?;
        self.push(out, Op::Reshape { a: a.0 })
    }

    /// For `a` shaped `[.., V]`, picks `a[r, idx[r]]` for every leading row
    /// `r`, giving shape `[..]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let v = *s.last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { self.value(a).numel() / v };
        if s.len() < 2 || rows != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= v {
                return Err(TensorError::Index {
                    op: "pick",
                    index: i,
                    size: v,
                });
            }
            out.push(data[r * v + i]);
        }
        self.push(
            Tensor::from_parts(s[..s.len() - 1].to_vec(), out),
            Op::Pick {
                a: a.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns one gradient per
    /// parameter slot that was registered on this graph; slots the loss does
    /// not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        let max_slot = self.nodes[..n]
            .iter()
            .filter_map(|node| match node.op {
                Op::Input { param: Some(s) } => Some(s),
                _ => None,
            })
            .max();
        let mut slots: Vec<Option<Tensor<F>>> = vec![None; max_slot.map_or(0, |m| m + 1)];

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if let Op::Input { param: Some(slot) } = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                match &mut slots[slot] {
                    Some(t) => ops::add_assign(t.data_mut(), &g),
                    s @ None => *s = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            let kind = node.op.kind();
            let factor = if self.fault == Some(kind) {
                F::from_f64_lossy(1.5)
            } else {
                F::one()
            };
            let emit = |grads: &mut Vec<Option<Vec<F>>>, j: usize, mut d: Vec<F>| -> Result<()> {
                if !self.nodes[j].needs_grad {
                    return Ok(());
                }
                if factor != F::one() {
                    d.iter_mut().for_each(|x| *x = *x * factor);
                }
                if !F::all_finite(&d) {
                    return Err(TensorError::NonFinite {
                        op: kind.backward_name(),
                    });
                }
                match &mut grads[j] {
                    Some(acc) => ops::add_assign(acc, &d),
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };
            let out_shape = node.value.shape();
            match &node.op {
                Op::Input { .. } => {}
                Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (sa, sb) = (ta.shape(), tb.shape());
                    let k = sa[sa.len() - 1];
                    let m = sa[sa.len() - 2];
                    let n_out = out_shape[out_shape.len() - 1];
                    if self.nodes[*a].needs_grad {
                        let mut da = vec![F::zero(); ta.numel()];
                        if sb.len() == 2 {
                            let rows = ta.numel() / k;
                            // dA = dC · Bᵀ (or dC · B when B was transposed)
                            ops::gemm(rows, n_out, k, &g, false, tb.data(), !trans_b, &mut da, false);
                        } else {
                            let batch = ta.numel() / (m * k);
                            for bi in 0..batch {
                                ops::gemm(
                                    m,
                                    n_out,
                                    k,
                                    &g[bi * m * n_out..],
                                    false,
                                    &tb.data()[bi * k * n_out..],
                                    !trans_b,
                                    &mut da[bi * m * k..],
                                    false,
                                );
                            }
                        }
                        emit(&mut grads, *a, da)?;
                    }
                    if self.nodes[*b].needs_grad {
                        let mut db = vec![F::zero(); tb.numel()];
                        let (rows, batch) = if sb.len() == 2 {
                            (ta.numel() / k, 1)
                        } else {
                            (m, ta.numel() / (m * k))
                        };
                        for bi in 0..batch {
                            let a_part = &ta.data()[bi * rows * k..];
                            let g_part = &g[bi * rows * n_out..];
                            let db_part = &mut db[bi * k * n_out..];
                            if *trans_b {
                                // dB[n,k] = dCᵀ · A
                                ops::gemm(n_out, rows, k, g_part, true, a_part, false, db_part, false);
                            } else {
                                // dB[k,n] = Aᵀ · dC
                                ops::gemm(k, rows, n_out, a_part, true, g_part, false, db_part, false);
                            }
                        }
                        emit(&mut grads, *b, db)?;
                    }
                }
                Op::Add { a, b } => {
                    for &j in [a, b] {
                        let d = ops::reduce_to(&g, out_shape, self.nodes[j].value.shape());
                        emit(&mut grads, j, d)?;
                    }
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        let prod = ops::broadcast_binary(&g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x * y);
                        emit(&mut grads, *a, ops::reduce_to(&prod, out_shape, ta.shape()))?;
                    }
                    if self.nodes[*b].needs_grad {
                        let prod = ops::broadcast_binary(&g, out_shape, ta.data(), ta.shape(), out_shape, |x, y| x * y);
                        emit(&mut grads, *b, ops::reduce_to(&prod, out_shape, tb.shape()))?;
                    }
                }
                Op::Scale { a, factor } => {
                    emit(&mut grads, *a, g.iter().map(|&x| x * *factor).collect())?;
                }
                Op::Softmax { a, axis } => {
                    let d = ops::softmax_backward(node.value.data(), &g, out_shape, *axis, false);
                    emit(&mut grads, *a, d)?;
                }
                Op::LogSoftmax { a, axis } => {
                    let d = ops::softmax_backward(node.value.data(), &g, out_shape, *axis, true);
                    emit(&mut grads, *a, d)?;
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let dim = out_shape[out_shape.len() - 1];
                    let (dx, dgamma, dbeta) = ops::layer_norm_backward(
                        &g,
                        xhat,
                        rstd,
                        self.nodes[*gamma].value.data(),
                        dim,
                    );
                    emit(&mut grads, *x, dx)?;
                    emit(&mut grads, *gamma, dgamma)?;
                    emit(&mut grads, *beta, dbeta)?;
                }
                Op::Relu { a } => {
                    let x = self.nodes[*a].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                        .collect();
                    emit(&mut grads, *a, d)?;
                }
                Op::Embedding { table, ids } => {
                    let st = self.nodes[*table].value.shape();
                    let d = st[1];
                    let mut dt = vec![F::zero(); st[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        ops::add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                    emit(&mut grads, *table, dt)?;
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = ops::split_axis(out_shape, *axis);
                    let mut offset = 0;
                    for &j in inputs {
                        let len = self.nodes[j].value.shape()[*axis];
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + len * inner]);
                        }
                        offset += len;
                        emit(&mut grads, j, d)?;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let sa = self.nodes[*a].value.shape();
                    let (outer, len, inner) = ops::split_axis(sa, *axis);
                    let width = out_shape[*axis];
                    let mut d = vec![F::zero(); self.nodes[*a].value.numel()];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        d[dst..dst + width * inner]
                            .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                    }
                    emit(&mut grads, *a, d)?;
                }
                Op::Mean { a, axis } => {
                    let sa = self.nodes[*a].value.shape();
                    let (outer, len, inner) = ops::split_axis(sa, *axis);
                    let inv = F::one() / F::from_usize(len).unwrap();
                    let mut d = vec![F::zero(); self.nodes[*a].value.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                d[(o * len + j) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    emit(&mut grads, *a, d)?;
                }
                Op::Sum { a } => {
                    let d = vec![g[0]; self.nodes[*a].value.numel()];
                    emit(&mut grads, *a, d)?;
                }
                Op::Permute { a, perm } => {
                    let (d, _) = ops::permute(&g, out_shape, &ops::inverse_perm(perm));
                    emit(&mut grads, *a, d)?;
                }
                Op::Reshape { a } => emit(&mut grads, *a, g)?,
                Op::Pick { a, idx } => {
                    let v = *self.nodes[*a].value.shape().last().unwrap();
                    let mut d = vec![F::zero(); self.nodes[*a].value.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        d[r * v + i] = g[r];
                    }
                    emit(&mut grads, *a, d)?;
                }
            }
        }
        Ok(Gradients { slots })
    }
}
