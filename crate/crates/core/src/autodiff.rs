//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Values live in `f64` buffers. In [`Precision::F32`] every recorded value and
//! every gradient buffer is rounded through `f32`, so storage behaves as single
//! precision while reductions still accumulate in double. [`Precision::F64`]
//! skips the rounding and exists for finite-difference verification.

use crate::error::{LdagError, Result};
use crate::tensor::{bilinear_resize_adjoint, bilinear_resize_f64, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn round_all(self, mut xs: Vec<f64>) -> Vec<f64> {
        if self == Precision::F32 {
            xs.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        xs
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    Select { x: Var, index: usize },
    BroadcastSpatial { x: Var, plane: usize },
    ChannelLinear { weight: Var, bias: Var, x: Var },
    Cosine(Var, Var),
    Softmax(Var),
    Upsample { x: Var, from: (usize, usize), to: (usize, usize) },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A tape of primitive operations in topological (recording) order.
#[derive(Debug, Default)]
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, extent, inner)` strides for reducing `axis` of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copy a node's value out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::from_f64(node.shape.clone(), &node.value).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let value = self.precision.round_all(value);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Record an input. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(LdagError::Dimension(format!(
                "leaf shape {shape:?} needs {} values, got {}",
                numel(&shape),
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.to_f64(), Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LdagError::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.requires_grad(x);
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(1 + e^x)` in the overflow-free form.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            &[m, k] => (m, k),
            s => return Err(LdagError::Dimension(format!("matmul lhs must be rank 2, got {s:?}"))),
        };
        let (k2, n) = match self.shape(b) {
            &[k2, n] => (k2, n),
            s => return Err(LdagError::Dimension(format!("matmul rhs must be rank 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(LdagError::Dimension(format!(
                "matmul inner extents differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| av[i * k + p] * bv[p * n + j]).sum();
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![], vec![total], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires_grad(x);
        self.push(vec![], vec![mean], Op::MeanAll(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(LdagError::Dimension(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..extent).map(|e| v[(o * extent + e) * inner + i]).sum();
                out[o * inner + i] = if mean { s / extent as f64 } else { s };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LdagError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(LdagError::Dimension("cannot concat scalars; reshape to [1]".into()));
        }
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(LdagError::Dimension(format!(
                    "concat: shape {s:?} incompatible with trailing extents {tail:?}"
                )));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(LdagError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Element `index` of a rank-1 tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = match self.shape(x) {
            &[len] => len,
            s => return Err(LdagError::Dimension(format!("select needs rank 1, got {s:?}"))),
        };
        if index >= len {
            return Err(LdagError::Dimension(format!("select index {index} >= {len}")));
        }
        let v = self.value(x)[index];
        let rg = self.requires_grad(x);
        Ok(self.push(vec![], vec![v], Op::Select { x, index }, rg))
    }

    /// Repeat a `[C]` vector over an `h x w` grid, giving `[C, h, w]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = match self.shape(x) {
            &[c] => c,
            s => return Err(LdagError::Dimension(format!("broadcast needs rank 1, got {s:?}"))),
        };
        let plane = h * w;
        let value = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(plane))
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![c, h, w], value, Op::BroadcastSpatial { x, plane }, rg))
    }

    /// 1x1 channel mixing: `out[o] = bias[o] + sum_i weight[o, i] * x[i]` at every cell.
    pub fn channel_linear(&mut self, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let (co, ci) = match self.shape(weight) {
            &[co, ci] => (co, ci),
            s => return Err(LdagError::Dimension(format!("weight must be rank 2, got {s:?}"))),
        };
        if self.shape(bias) != [co] {
            return Err(LdagError::Dimension(format!(
                "bias shape {:?} does not match {co} output channels",
                self.shape(bias)
            )));
        }
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(LdagError::Dimension(format!("input must be C x H x W, got {s:?}"))),
        };
        if c != ci {
            return Err(LdagError::Dimension(format!(
                "channel_linear expects {ci} input channels, got {c}"
            )));
        }
        let plane = h * w;
        let (wv, bv, xv) = (self.value(weight), self.value(bias), self.value(x));
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            let row = &mut out[o * plane..(o + 1) * plane];
            row.iter_mut().for_each(|r| *r = bv[o]);
            for i in 0..ci {
                let wt = wv[o * ci + i];
                if wt == 0.0 {
                    continue;
                }
                let src = &xv[i * plane..(i + 1) * plane];
                row.iter_mut().zip(src).for_each(|(r, &s)| *r += wt * s);
            }
        }
        let rg = self.any_grad(&[weight, bias, x]);
        Ok(self.push(vec![co, h, w], out, Op::ChannelLinear { weight, bias, x }, rg))
    }

    /// Dense layer on a vector, expressed as a 1x1 channel mix on a 1x1 grid.
    pub fn linear(&mut self, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let grid = self.reshape(x, vec![n, 1, 1])?;
        let out = self.channel_linear(weight, bias, grid)?;
        let co = self.shape(out)[0];
        self.reshape(out, vec![co])
    }

    /// Cosine similarity of two rank-1 tensors, as a scalar.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).len() != 1 {
            return Err(LdagError::Dimension(format!(
                "cosine needs rank-1 inputs, got {:?}",
                self.shape(u)
            )));
        }
        self.same_shape(u, v, "cosine")?;
        let (uv, vv) = (self.value(u), self.value(v));
        let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(LdagError::Degenerate("cosine of a zero-norm vector".into()));
        }
        let dot: f64 = uv.iter().zip(vv).map(|(a, b)| a * b).sum();
        let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(vec![], vec![cos], Op::Cosine(u, v), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 || self.value(x).is_empty() {
            return Err(LdagError::Dimension(format!(
                "softmax needs a non-empty rank-1 input, got {:?}",
                self.shape(x)
            )));
        }
        let v = self.value(x);
        if v.iter().any(|s| !s.is_finite()) {
            return Err(LdagError::Degenerate("softmax of non-finite scores".into()));
        }
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / total).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Bilinear resize of a `[C, H, W]` tensor; linear, so gradients flow through it.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(LdagError::Dimension(format!("upsample needs C x H x W, got {s:?}"))),
        };
        let out = bilinear_resize_f64(self.value(x), c, (h, w), (out_h, out_w));
        let rg = self.requires_grad(x);
        let op = Op::Upsample {
            x,
            from: (h, w),
            to: (out_h, out_w),
        };
        Ok(self.push(vec![c, out_h, out_w], out, op, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != targets.len() {
            return Err(LdagError::Dimension(format!(
                "bce: {} logits vs {} targets",
                v.len(),
                targets.len()
            )));
        }
        let total: f64 = v
            .iter()
            .zip(targets)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let loss = total / v.len() as f64;
        let rg = self.requires_grad(logits);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(vec![], vec![loss], op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LdagError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let p = self.precision;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = p.round_all(g);
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.requires_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contribution)
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|g| g * f).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for q in 0..k {
                            da[i * k + q] = (0..n).map(|j| g[i * n + j] * bv[q * n + j]).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    for q in 0..k {
                        for j in 0..n {
                            db[q * n + j] = (0..m).map(|i| av[i * k + q] * g[i * n + j]).sum();
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let yv = &node.value;
                acc(*x, g.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                acc(*x, g.iter().zip(xv).map(|(g, &v)| g * sigmoid(v)).collect());
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, extent, inner) = axis_split(self.shape(*x), *axis);
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / extent as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            dx[(o * extent + e) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &part in parts {
                    let len = self.value(part).len();
                    acc(part, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Select { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*index] = g[0];
                acc(*x, dx);
            }
            Op::BroadcastSpatial { x, plane } => {
                let dx = g.chunks(*plane).map(|c| c.iter().sum()).collect();
                acc(*x, dx);
            }
            Op::ChannelLinear { weight, bias, x } => {
                let (co, ci) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let plane = self.value(*x).len() / ci;
                let (wv, xv) = (self.value(*weight), self.value(*x));
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; ci * plane];
                    for o in 0..co {
                        let go = &g[o * plane..(o + 1) * plane];
                        for i in 0..ci {
                            let wt = wv[o * ci + i];
                            dx[i * plane..(i + 1) * plane]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(d, &gg)| *d += wt * gg);
                        }
                    }
                    acc(*x, dx);
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; co * ci];
                    for o in 0..co {
                        let go = &g[o * plane..(o + 1) * plane];
                        for i in 0..ci {
                            let xi = &xv[i * plane..(i + 1) * plane];
                            dw[o * ci + i] = go.iter().zip(xi).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(*weight, dw);
                }
                if self.requires_grad(*bias) {
                    acc(*bias, g.chunks(plane).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Cosine(u, v) => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = uv.iter().zip(vv).map(|(a, b)| a * b).sum();
                let cos = dot / (nu * nv);
                let g0 = g[0];
                if self.requires_grad(*u) {
                    acc(
                        *u,
                        uv.iter()
                            .zip(vv)
                            .map(|(&a, &b)| g0 * (b / (nu * nv) - cos * a / (nu * nu)))
                            .collect(),
                    );
                }
                if self.requires_grad(*v) {
                    acc(
                        *v,
                        uv.iter()
                            .zip(vv)
                            .map(|(&a, &b)| g0 * (a / (nu * nv) - cos * b / (nv * nv)))
                            .collect(),
                    );
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, y.iter().zip(g).map(|(y, g)| y * (g - dot)).collect());
            }
            Op::Upsample { x, from, to } => {
                let planes = self.shape(*x)[0];
                acc(*x, bilinear_resize_adjoint(g, planes, *from, *to));
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = self.value(*logits);
                let n = xv.len() as f64;
                acc(
                    *logits,
                    xv.iter()
                        .zip(targets)
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect(),
                );
            }
        }
    }
}

/// Gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// The gradient of `v`, or `None` when `v` did not participate.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The gradient of `v`, zero-filled when it did not participate.
    pub fn get_or_zero(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }
}

/// Numerically stable logistic function, shared with prediction code.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
