//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints into the nodes that (transitively) depend on a leaf
//! created with `requires_grad`. Nodes that do not need a gradient are
//! skipped, so the same code path serves inference at no extra cost.
//!
//! Shapes are checked on every op. The only broadcasts are the explicit
//! `*_bcast` ops, where the right operand's shape must equal the trailing
//! dimensions of the left operand.

use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, rstd: Vec<f64> },
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Rope { a: Var, base: f64 },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation graph; one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
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

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(src: &Tensor, axes: &[usize]) -> Tensor {
    let shape = src.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the source buffer for each output axis
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let data = src.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn rope_apply(x: &Tensor, base: f64, sign: f64) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let dim = shape[rank - 1];
    let positions = shape[rank - 2];
    let half = dim / 2;
    let mut table = Vec::with_capacity(positions * half);
    for p in 0..positions {
        for i in 0..half {
            let theta = (p as f64) * base.powf(-2.0 * i as f64 / dim as f64);
            table.push((theta.cos(), sign * theta.sin()));
        }
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for (chunk_idx, (o, s)) in out.chunks_mut(dim).zip(src.chunks(dim)).enumerate() {
        let p = chunk_idx % positions;
        for i in 0..half {
            let (c, sn) = table[p * half + i];
            let (x0, x1) = (s[2 * i], s[2 * i + 1]);
            o[2 * i] = x0 * c - x1 * sn;
            o[2 * i + 1] = x0 * sn + x1 * c;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(|| format!("op `{name}`"))?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf holding `t`; gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t))
    }

    /// Leaf sharing storage with an existing tensor (no copy).
    pub fn leaf_shared(&mut self, t: Arc<Tensor>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.leaf(t)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(name, format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch_a = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if kb != k || (!shared && batch_a != &sb[..sb.len() - 2]) {
            return Err(Error::shape(name, format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared && !trans_b {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    let bslice = if shared { bv } else { &bv[i * k * n..(i + 1) * k * n] };
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        bslice,
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a, b, trans_b },
            needs,
            name,
        )
    }

    /// `a @ b`; `b` is either rank 2 (shared across `a`'s batch dims) or has
    /// the same batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` over the last two axes of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, name)?;
        Ok(Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), needs, "mul")
    }

    fn bcast_len(&self, a: Var, b: Var, name: &'static str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(name, format!("{sa:?} with {sb:?}")));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` with `b` repeated over `a`'s leading dims.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.bcast_len(a, b, "add_bcast")?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(vb.data()) {
                *o += y;
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::AddBcast(a, b), needs, "add_bcast")
    }

    /// `a * b` with `b` repeated over `a`'s leading dims.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.bcast_len(a, b, "mul_bcast")?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &y) in chunk.iter_mut().zip(vb.data()) {
                *o *= y;
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::MulBcast(a, b), needs, "mul_bcast")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).scale(s);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, s), needs, "scale")
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", va.shape())));
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let src = va.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    z += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= z;
                }
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let needs = self.needs(a);
        self.push(t, Op::Softmax { a, axis }, needs, "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let n = *va.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        let mut out = va.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let needs = self.needs(a);
        self.push(t, Op::LayerNorm { a, rstd }, needs, "layer_norm")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(t, Op::Silu(a), needs, "silu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(t, Op::Sigmoid(a), needs, "sigmoid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        self.push(t, Op::Reshape(a), needs, "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for {:?}", self.shape(a)),
            ));
        }
        let t = permute_data(self.value(a), axes);
        let needs = self.needs(a);
        self.push(t, Op::Permute { a, axes: axes.to_vec() }, needs, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(a, &axes)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() || start + len > va.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, va.shape()),
            ));
        }
        let (outer, ext, inner) = split_axis(va.shape(), axis);
        let src = va.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::from_parts(shape, out);
        let needs = self.needs(a);
        self.push(t, Op::Slice { a, axis, start }, needs, "slice")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {ref_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {ref_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let ext = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Rotary embedding: rotates consecutive feature pairs of the last axis
    /// by an angle proportional to the index along the second-to-last axis.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let va = self.value(a);
        if va.rank() < 2 || va.shape()[va.rank() - 1] % 2 != 0 {
            return Err(Error::shape("rope", format!("{:?} needs an even last axis", va.shape())));
        }
        let t = rope_apply(va, base, 1.0);
        let needs = self.needs(a);
        self.push(t, Op::Rope { a, base }, needs, "rope")
    }

    /// Rows `ids` of a rank-2 table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", vt.shape())));
        }
        let (rows, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather_rows", format!("row {id} of {rows}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), dim], out);
        let needs = self.needs(table);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, needs, "gather_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(t, Op::Sum(a), needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let t = Tensor::scalar(va.sum() / va.len() as f64);
        let needs = self.needs(a);
        self.push(t, Op::Mean(a), needs, "mean")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::from_parts(self.shape(output).to_vec(), vec![1.0]));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, dy, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = dy.zip_map(self.value(*b), |d, x| d * x).expect("shapes checked");
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = dy.zip_map(self.value(*a), |d, x| d * x).expect("shapes checked");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut g = vec![0.0; n];
                    for chunk in dy.data().chunks(n) {
                        for (s, v) in g.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, g));
                }
            }
            Op::MulBcast(a, b) => {
                let vb = self.value(*b);
                let n = vb.len();
                if self.needs(*a) {
                    let mut g = dy.data().to_vec();
                    for chunk in g.chunks_mut(n) {
                        for (s, v) in chunk.iter_mut().zip(vb.data()) {
                            *s *= v;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(dy.shape().to_vec(), g));
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let mut g = vec![0.0; n];
                    for (dchunk, achunk) in dy.data().chunks(n).zip(va.data().chunks(n)) {
                        for ((s, d), x) in g.iter_mut().zip(dchunk).zip(achunk) {
                            *s += d * x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), g));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.scale(*s)),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yv, dv) = (y.data(), dy.data());
                let mut g = vec![0.0; yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += yv[base + l * inner] * dv[base + l * inner];
                        }
                        for l in 0..len {
                            let k = base + l * inner;
                            g[k] = yv[k] * (dv[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::LayerNorm { a, rstd } => {
                let n = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.len()];
                for (r, ((gy, yy), dd)) in g
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(dy.data().chunks(n))
                    .enumerate()
                {
                    let mean_d = dd.iter().sum::<f64>() / n as f64;
                    let mean_dy = dd.iter().zip(yy).map(|(d, v)| d * v).sum::<f64>() / n as f64;
                    for k in 0..n {
                        gy[k] = rstd[r] * (dd[k] - mean_d - yy[k] * mean_dy);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let g = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &d)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        d * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Sigmoid(a) => {
                let g = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, dy.data().to_vec()));
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.accumulate(grads, *a, permute_data(dy, &inverse));
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.shape(*a).to_vec();
                let (outer, ext, inner) = split_axis(&src_shape, *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0; src_shape.iter().product()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(src_shape, g));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let ext = shape[*axis];
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            g.extend_from_slice(&dy.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(shape, g));
                    }
                    offset += ext;
                }
            }
            Op::Rope { a, base } => self.accumulate(grads, *a, rope_apply(dy, *base, -1.0)),
            Op::Gather { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let dim = shape[1];
                let mut g = vec![0.0; shape[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    for (s, v) in g[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&dy.data()[r * dim..(r + 1) * dim])
                    {
                        *s += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(shape, g));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape.iter().product();
                self.accumulate(grads, *a, Tensor::from_parts(shape, vec![dy.item(); n]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n: usize = shape.iter().product();
                let v = dy.item() / n as f64;
                self.accumulate(grads, *a, Tensor::from_parts(shape, vec![v; n]));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = dy.shape()[dy.rank() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = vb.rank() == 2;
        let d = dy.data();
        if self.needs(a) {
            let mut ga = vec![0.0; va.len()];
            if shared {
                // dA = dY · op(B)ᵀ
                gemm(batch * m, n, k, d, false, vb.data(), !trans_b, &mut ga, 0.0);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &d[i * m * n..(i + 1) * m * n],
                        false,
                        &vb.data()[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
            }
            self.accumulate(grads, a, Tensor::from_parts(sa.to_vec(), ga));
        }
        if self.needs(b) {
            let mut gb = vec![0.0; vb.len()];
            if shared {
                if trans_b {
                    gemm(n, batch * m, k, d, true, va.data(), false, &mut gb, 0.0);
                } else {
                    gemm(k, batch * m, n, va.data(), true, d, false, &mut gb, 0.0);
                }
            } else {
                for i in 0..batch {
                    let (ai, di, gi) = (
                        &va.data()[i * m * k..(i + 1) * m * k],
                        &d[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                    if trans_b {
                        gemm(n, m, k, di, true, ai, false, gi, 0.0);
                    } else {
                        gemm(k, m, n, ai, true, di, false, gi, 0.0);
                    }
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(vb.shape().to_vec(), gb));
        }
    }
}
