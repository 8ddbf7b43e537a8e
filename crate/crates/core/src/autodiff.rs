//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Graph`] is a linear tape: every forward operation appends a node
//! holding its output value and enough saved state to run its backward rule.
//! Nodes are created in topological order, so [`Graph::backward`] walks the
//! tape in reverse exactly once.
//!
//! Shape rules are strict: apart from [`Graph::broadcast`] no operation
//! broadcasts, and every mismatch is reported as [`Error::Shape`] naming the
//! operation and the offending dimensions. Every forward output is checked
//! for NaN/infinity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, strides, Scalar, Tensor};

/// Layer normalization epsilon (the DeiT/timm convention).
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Div,
    Exp,
    Log,
    Tanh,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
    Max,
    Reshape,
    Permute,
    Concat,
    Gather,
    Broadcast,
    Upsample3d,
    Conv3dPointwise,
}

impl OpKind {
    /// Every differentiable operation kind.
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Div,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::Broadcast,
        OpKind::Upsample3d,
        OpKind::Conv3dPointwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Div => "div",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
            OpKind::Broadcast => "broadcast",
            OpKind::Upsample3d => "upsample3d",
            OpKind::Conv3dPointwise => "conv3d_pointwise",
        }
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Div(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, axis: usize, rstd: Vec<S> },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Max { x: usize, axis: usize, arg: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, map: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Gather { x: usize, axis: usize, indices: Vec<usize> },
    Broadcast { x: usize, map: Vec<usize> },
    Upsample3d { x: usize, factor: usize },
    Conv3dPointwise { x: usize, w: usize, b: usize },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Div(..) => OpKind::Div,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Upsample3d { .. } => OpKind::Upsample3d,
            Op::Conv3dPointwise { .. } => OpKind::Conv3dPointwise,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Tape of recorded operations.
///
/// A graph optionally borrows a [`ParamStore`]; [`Graph::param`] loads a
/// parameter as a gradient-tracking leaf once and returns the same handle on
/// later calls, so gradients for shared weights accumulate in one place.
pub struct Graph<'p, S> {
    nodes: Vec<Node<S>>,
    params: Option<&'p ParamStore<S>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    sign_flip: Option<OpKind>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, param_vars: Vec::new(), grad_enabled: true, sign_flip: None }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
            sign_flip: None,
        }
    }

    /// Graph that records no gradient edges: parameters load as constants.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        let mut g = Self::with_params(params);
        g.grad_enabled = false;
        g
    }

    /// Mutation-testing hook: negate every gradient contribution produced by
    /// the backward rule of `kind`. Used to confirm gradient checks catch a
    /// broken rule.
    #[doc(hidden)]
    pub fn inject_backward_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        self.push_unchecked(t.into_data(), shape, Op::Leaf, false)
    }

    /// Gradient-tracking input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let shape = t.shape().to_vec();
        let rg = self.grad_enabled;
        self.push_unchecked(t.into_data(), shape, Op::Leaf, rg)
    }

    pub fn scalar(&mut self, x: S) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let p = store.get(id);
        let rg = self.grad_enabled;
        let v = self.push_unchecked(p.tensor.data().to_vec(), p.tensor.shape().to_vec(), Op::Param(id), rg);
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// The parameter a node was loaded from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Consumes the graph, releasing its borrow of the parameter store, and
    /// returns the parameter gradients.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<S>)> {
        self.param_grads().map(|(id, g)| (id, g.to_vec())).collect()
    }

    /// Gradients of every loaded parameter, in load order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[S])> + '_ {
        self.param_vars.iter().enumerate().filter_map(move |(i, v)| {
            let v = (*v)?;
            self.nodes[v.0].grad.as_deref().map(|g| (ParamId(i), g))
        })
    }

    fn push_unchecked(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, shape, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>, inputs: &[usize]) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op.kind().name(), node: self.nodes.len() });
        }
        let rg = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, shape, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let r = self.nodes[x.0].shape.len();
        if axis >= r {
            return Err(shape_err(op, format!("axis {axis} out of range for rank {r}")));
        }
        Ok(())
    }

    // ---- forward operations -------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch dimensions must be identical.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(shape_err("matmul", format!("inner dims {k} vs {} in {sa:?} x {sb:?}", sb[r - 2])));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for bi in 0..batch {
                mm(&av[bi * m * k..], &bv[bi * k * n..], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(out, shape, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<S> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Scale(a.0, s), &[a.0])
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, op, &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a.0))
    }

    /// Logistic function `1 / (1 + exp(-x))`, evaluated without overflow.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut m = S::neg_infinity();
                for i in 0..len {
                    m = m.max(xv[at(i)]);
                }
                let mut z = S::zero();
                for i in 0..len {
                    let e = (xv[at(i)] - m).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] /= z;
                }
            }
        }
        self.push(out, shape, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); outer * inner];
        let nf = S::of(len as f64);
        let eps = S::of(LAYER_NORM_EPS);
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| xv[at(i)]).sum::<S>() / nf;
                let var = (0..len).map(|i| (xv[at(i)] - mean) * (xv[at(i)] - mean)).sum::<S>() / nf;
                let r = S::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..len {
                    out[at(i)] = (xv[at(i)] - mean) * r;
                }
            }
        }
        self.push(out, shape, Op::LayerNorm { x: x.0, axis, rstd }, &[x.0])
    }

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        self.check_axis(name, x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, outer, len, inner))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce("sum", x, axis)?;
        let out = reduce_sum(&self.nodes[x.0].value, outer, len, inner);
        self.push(out, shape, Op::Sum { x: x.0, axis }, &[x.0])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce("mean", x, axis)?;
        let nf = S::of(len as f64);
        let out = reduce_sum(&self.nodes[x.0].value, outer, len, inner).into_iter().map(|s| s / nf).collect();
        self.push(out, shape, Op::Mean { x: x.0, axis }, &[x.0])
    }

    /// Maximum along `axis`; gradient flows to the first maximal element.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce("max", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![S::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                for i in 1..len {
                    if xv[(o * len + i) * inner + j] > xv[(o * len + best) * inner + j] {
                        best = i;
                    }
                }
                arg[o * inner + j] = best;
                out[o * inner + j] = xv[(o * len + best) * inner + j];
            }
        }
        self.push(out, shape, Op::Max { x: x.0, axis, arg }, &[x.0])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.nodes[x.0].shape)));
        }
        let value = self.nodes[x.0].value.clone();
        self.push(value, shape.to_vec(), Op::Reshape(x.0), &[x.0])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("permutation {perm:?} invalid for {shape:?}")));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = strided_map(&out_shape, &src_strides);
        let xv = &self.nodes[x.0].value;
        let out = map.iter().map(|&s| xv[s]).collect();
        self.push(out, out_shape, Op::Permute { x: x.0, map }, &[x.0])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let r = self.nodes[x.0].shape.len();
        if a >= r || b >= r {
            return Err(shape_err("transpose", format!("axes ({a},{b}) for rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.nodes[first.0].shape.clone();
        let mut total = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.nodes[x.0].shape[axis];
                out.extend_from_slice(&self.nodes[x.0].value[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(out, shape, Op::Concat { xs: ids.clone(), axis }, &ids)
    }

    /// Selects `indices` along `axis`. Indices may repeat; they carry no
    /// gradient and the backward pass scatter-adds into the source.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("gather", x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis);
        if indices.is_empty() {
            return Err(shape_err("gather", "empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(shape_err("gather", format!("index {bad} out of range for axis {axis} of {shape:?}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&xv[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push(out, out_shape, Op::Gather { x: x.0, axis, indices: indices.to_vec() }, &[x.0])
    }

    /// Expands `x` to `shape`. Dimensions are aligned from the right; each
    /// source dimension must equal the target or be 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.nodes[x.0].shape.clone();
        if src.len() > shape.len() {
            return Err(shape_err("broadcast", format!("{src:?} -> {shape:?}")));
        }
        let off = shape.len() - src.len();
        let src_st = strides(&src);
        let mut st = vec![0usize; shape.len()];
        for (i, &d) in src.iter().enumerate() {
            if d == shape[off + i] {
                st[off + i] = src_st[i];
            } else if d != 1 {
                return Err(shape_err("broadcast", format!("{src:?} -> {shape:?}")));
            }
        }
        let map = strided_map(shape, &st);
        let xv = &self.nodes[x.0].value;
        let out = map.iter().map(|&s| xv[s]).collect();
        self.push(out, shape.to_vec(), Op::Broadcast { x: x.0, map }, &[x.0])
    }

    /// Nearest-neighbor upsampling of a channels-last volume
    /// `[X, Y, Z, C] -> [fX, fY, fZ, C]`.
    pub fn upsample3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err("upsample3d", format!("expected [X,Y,Z,C], got {s:?} (factor {factor})")));
        }
        let (nx, ny, nz, c) = (s[0] * factor, s[1] * factor, s[2] * factor, s[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(nx * ny * nz * c);
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let src = (((ix / factor) * s[1] + iy / factor) * s[2] + iz / factor) * c;
                    out.extend_from_slice(&xv[src..src + c]);
                }
            }
        }
        self.push(out, vec![nx, ny, nz, c], Op::Upsample3d { x: x.0, factor }, &[x.0])
    }

    /// Pointwise (1x1x1) convolution of a channels-last volume:
    /// `[X, Y, Z, Cin] x [Cin, Cout] + [Cout] -> [X, Y, Z, Cout]`.
    pub fn conv3d_pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.nodes[x.0].shape.clone(), self.nodes[w.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sx.len() != 4 || sw.len() != 2 || sw[0] != sx[3] || sb.as_slice() != [sw[1]] {
            return Err(shape_err("conv3d_pointwise", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, k, n) = (sx[0] * sx[1] * sx[2], sw[0], sw[1]);
        let mut out = vec![S::zero(); m * n];
        let bv = &self.nodes[b.0].value;
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bv);
        }
        mm(&self.nodes[x.0].value, &self.nodes[w.0].value, &mut out, m, k, n);
        self.push(out, vec![sx[0], sx[1], sx[2], n], Op::Conv3dPointwise { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0])
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates `dloss/dnode` into every gradient-tracking node reachable
    /// from `loss`. Calling twice without resetting doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Drops all stored gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let flip = self.sign_flip == Some(node.op.kind());
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, mut d: Vec<S>| {
            if flip {
                d.iter_mut().for_each(|x| *x = -*x);
            }
            match &mut grads[i] {
                Some(a) => a.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |i: usize| &nodes[i].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                if wants(a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    for bi in 0..batch {
                        mm_a_bt(&g[bi * m * n..], &val(b)[bi * k * n..], &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                    acc(a, da);
                }
                if wants(b) {
                    let mut db = vec![S::zero(); batch * k * n];
                    for bi in 0..batch {
                        mm_at_b(&val(a)[bi * m * k..], &g[bi * m * n..], &mut db[bi * k * n..(bi + 1) * k * n], m, k, n);
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&d, &x)| d * x).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
                }
            }
            &Op::Div(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&d, &x)| d / x).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(y).zip(val(b)).map(|((&d, &q), &x)| -d * q / x).collect());
                }
            }
            &Op::Scale(a, s) => acc(a, g.iter().map(|&d| d * s).collect()),
            &Op::Exp(a) => acc(a, g.iter().zip(y).map(|(&d, &e)| d * e).collect()),
            &Op::Log(a) => acc(a, g.iter().zip(val(a)).map(|(&d, &x)| d / x).collect()),
            &Op::Tanh(a) => acc(a, g.iter().zip(y).map(|(&d, &t)| d * (S::one() - t * t)).collect()),
            &Op::Gelu(a) => acc(a, g.iter().zip(val(a)).map(|(&d, &x)| d * gelu_grad(x)).collect()),
            &Op::Sigmoid(a) => acc(a, g.iter().zip(y).map(|(&d, &s)| d * s * (S::one() - s)).collect()),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, axis);
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: S = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let nf = S::of(len as f64);
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let mg: S = (0..len).map(|i| g[at(i)]).sum::<S>() / nf;
                        let mgy: S = (0..len).map(|i| g[at(i)] * y[at(i)]).sum::<S>() / nf;
                        let r = rstd[o * inner + j];
                        for i in 0..len {
                            dx[at(i)] = r * (g[at(i)] - mg - y[at(i)] * mgy);
                        }
                    }
                }
                acc(*x, dx);
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(&nodes[x].shape, axis);
                let s = match node.op {
                    Op::Mean { .. } => S::one() / S::of(len as f64),
                    _ => S::one(),
                };
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            dx[(o * len + i) * inner + j] = g[o * inner + j] * s;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::Max { x, axis, arg } => {
                let (outer, len, inner) = axis_split(&nodes[*x].shape, *axis);
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        dx[(o * len + arg[o * inner + j]) * inner + j] = g[o * inner + j];
                    }
                }
                acc(*x, dx);
            }
            &Op::Reshape(x) => acc(x, g.to_vec()),
            Op::Permute { x, map } => {
                let mut dx = vec![S::zero(); g.len()];
                for (&s, &d) in map.iter().zip(g) {
                    dx[s] = d;
                }
                acc(*x, dx);
            }
            Op::Broadcast { x, map } => {
                let mut dx = vec![S::zero(); nodes[*x].value.len()];
                for (&s, &d) in map.iter().zip(g) {
                    dx[s] += d;
                }
                acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x].shape[*axis];
                    if wants(x) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + len * inner]);
                        }
                        acc(x, dx);
                    }
                    offset += len;
                }
            }
            Op::Gather { x, axis, indices } => {
                let (outer, len, inner) = axis_split(&nodes[*x].shape, *axis);
                let mut dx = vec![S::zero(); outer * len * inner];
                let m = indices.len();
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                        let dst = &mut dx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                acc(*x, dx);
            }
            &Op::Upsample3d { x, factor } => {
                let s = &nodes[x].shape;
                let c = s[3];
                let (nx, ny, nz) = (s[0] * factor, s[1] * factor, s[2] * factor);
                let mut dx = vec![S::zero(); nodes[x].value.len()];
                let mut k = 0;
                for ix in 0..nx {
                    for iy in 0..ny {
                        for iz in 0..nz {
                            let src = (((ix / factor) * s[1] + iy / factor) * s[2] + iz / factor) * c;
                            dx[src..src + c].iter_mut().zip(&g[k..k + c]).for_each(|(a, &b)| *a += b);
                            k += c;
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::Conv3dPointwise { x, w, b } => {
                let sx = &nodes[x].shape;
                let (m, k, n) = (sx[0] * sx[1] * sx[2], sx[3], nodes[w].shape[1]);
                if wants(x) {
                    let mut dx = vec![S::zero(); m * k];
                    mm_a_bt(g, val(w), &mut dx, m, n, k);
                    acc(x, dx);
                }
                if wants(w) {
                    let mut dw = vec![S::zero(); k * n];
                    mm_at_b(val(x), g, &mut dw, m, k, n);
                    acc(w, dw);
                }
                if wants(b) {
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    acc(b, db);
                }
            }
        }
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + S::of(0.044715) * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(0.797_884_560_802_865_4);
    let half = S::of(0.5);
    let a = S::of(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn reduce_sum<S: Scalar>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let row = &x[(o * len + i) * inner..(o * len + i + 1) * inner];
            out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
    }
    out
}

/// Source flat index for every element of an output of `shape` read
/// through `src_strides`.
fn strided_map(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn mm_a_bt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn mm_at_b<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}


#[cfg(test)]
pub(crate) fn var_at(i: usize) -> Var {
    Var(i)
}
