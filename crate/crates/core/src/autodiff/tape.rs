use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::kernels;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Detach,
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    MeanSpatial(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    SoftCe { logits: usize, targets: Vec<f64>, probs: Vec<f64> },
    Huber { a: usize, b: usize, delta: f64, scale: f64 },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanAll(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// `detach` nodes carry no inputs and never require gradients: backward cannot cross them.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    detach_points: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` received no contribution.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when nothing reached it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            detach_points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn detach_points(&self) -> &[usize] {
        &self.detach_points
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Value-identical copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        if matches!(self.nodes[i].op, Op::Detach) {
            return Ok(x);
        }
        let value = self.nodes[i].value.clone();
        let v = self.push(value, Op::Detach, false);
        self.detach_points.push(v.idx);
        Ok(v)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.map(f);
        let rg = self.rg(i);
        Ok(self.push(value, op(i), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.map(|v| v * k);
        let rg = self.rg(i);
        Ok(self.push(value, Op::Scale(i, k), rg))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (i, j) = (self.check(x)?, self.check(s)?);
        if self.nodes[j].value.len() != 1 {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        let k = self.nodes[j].value.item();
        let value = self.nodes[i].value.map(|v| v * k);
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(value, Op::ScaleBy(i, j), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[i]
            .value
            .zip_map(&self.nodes[j].value, f)
            .map_err(|_| shape_err(name, self.shape(a), self.shape(b)))?;
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(value, op(i, j), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `[n, c] + [c]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(bias)?);
        let (av, bv) = (&self.nodes[i].value, &self.nodes[j].value);
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.len() {
            return Err(shape_err("add_bias", av.shape(), bv.shape()));
        }
        let c = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v + bv.data()[k % c])
            .collect();
        let value = Tensor::from_raw(av.shape().to_vec(), data);
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(value, Op::AddBias(i, j), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[i].value, &self.nodes[j].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), n, k, m);
        let value = Tensor::from_raw(vec![n, m], data);
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(value, Op::MatMul(i, j), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let i = self.check(a)?;
        let av = &self.nodes[i].value;
        if av.rank() != 2 {
            return Err(shape_err("transpose", av.shape(), &[2]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let value = Tensor::from_raw(vec![c, r], kernels::transpose(av.data(), r, c));
        let rg = self.rg(i);
        Ok(self.push(value, Op::Transpose(i), rg))
    }

    /// Stride-1 convolution with zero "same" padding. `x: [n, ci, h, w]`, `k: [co, ci, kh, kw]`, odd kernel sides.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (i, j) = (self.check(x)?, self.check(k)?);
        let (xv, kv) = (&self.nodes[i].value, &self.nodes[j].value);
        if xv.rank() != 4
            || kv.rank() != 4
            || xv.shape()[1] != kv.shape()[1]
            || kv.shape()[2] % 2 == 0
            || kv.shape()[3] % 2 == 0
        {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        }
        let geo = kernels::ConvGeometry::new(xv.shape(), kv.shape());
        let value = Tensor::from_raw(geo.out_shape(), kernels::conv2d(xv.data(), kv.data(), &geo));
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(value, Op::Conv2d(i, j), rg))
    }

    /// Mean over the trailing spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let xv = &self.nodes[i].value;
        if xv.rank() != 4 {
            return Err(shape_err("mean_spatial", xv.shape(), &[4]));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        let data = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_raw(vec![n, c], data);
        let rg = self.rg(i);
        Ok(self.push(value, Op::MeanSpatial(i), rg))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| Error::Spec("concat of nothing".into()))?;
        let n = first[0];
        let mut width = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat", &first, s));
            }
            width += s[1];
        }
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_raw(vec![n, width], data), Op::Concat(idx), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let i = self.check(x)?;
        let xv = &self.nodes[i].value;
        if xv.rank() != 2 || start >= end || end > xv.shape()[1] {
            return Err(shape_err("slice_cols", xv.shape(), &[start, end]));
        }
        let n = xv.shape()[0];
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_raw(vec![n, end - start], data), Op::SliceCols(i, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.reshape(shape)?;
        let rg = self.rg(i);
        Ok(self.push(value, Op::Reshape(i), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let xv = &self.nodes[i].value;
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(i);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(i), rg))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let lv = &self.nodes[i].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(shape_err("softmax_cross_entropy label", &[bad], &[c]));
        }
        let probs = kernels::softmax_rows(lv.data(), c);
        let n = labels.len();
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &y)| kernels::log_softmax_at(lv.row(r), y))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(i);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[n, c]` logits against soft targets (rows of probabilities).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let i = self.check(logits)?;
        let lv = &self.nodes[i].value;
        if lv.shape() != targets.shape() || lv.rank() != 2 {
            return Err(shape_err("soft_cross_entropy", lv.shape(), targets.shape()));
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let probs = kernels::softmax_rows(lv.data(), c);
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row);
            for (z, t) in row.iter().zip(targets.row(r)) {
                loss -= t * (z - lse);
            }
        }
        let rg = self.rg(i);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftCe {
                logits: i,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `scale` times the mean Huber penalty of `a - b`.
    pub fn huber(&mut self, a: Var, b: Var, delta: f64, scale: f64) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[i].value, &self.nodes[j].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("huber", av.shape(), bv.shape()));
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| kernels::huber(x - y, delta))
            .sum();
        let value = Tensor::scalar(scale * total / av.len() as f64);
        let rg = self.rg(i) || self.rg(j);
        Ok(self.push(
            value,
            Op::Huber {
                a: i,
                b: j,
                delta,
                scale,
            },
            rg,
        ))
    }

    /// Group normalization over `[n, c, h, w]` (or `[n, c]`), with per-channel `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (i, g, b) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = &self.nodes[i].value;
        let c = if xv.rank() >= 2 { xv.shape()[1] } else { 0 };
        if c == 0
            || groups == 0
            || c % groups != 0
            || self.nodes[g].value.shape() != [c]
            || self.nodes[b].value.shape() != [c]
        {
            return Err(shape_err("group_norm", xv.shape(), self.nodes[g].value.shape()));
        }
        let out = kernels::group_norm(
            xv.data(),
            xv.shape(),
            self.nodes[g].value.data(),
            self.nodes[b].value.data(),
            groups,
            eps,
        );
        let value = Tensor::from_raw(xv.shape().to_vec(), out.y);
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x: i,
                gamma: g,
                beta: b,
                groups,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only leaves keep their gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &up, &mut grads);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            let keep = matches!(self.nodes[i].op, Op::Leaf);
            if !keep {
                *g = None;
            } else if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of leaf {i}")));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let ga = kernels::matmul_nt(up.data(), bv.data(), n, m, k);
                    self.accum(grads, *a, Tensor::from_raw(vec![n, k], ga));
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_tn(av.data(), up.data(), n, k, m);
                    self.accum(grads, *b, Tensor::from_raw(vec![k, m], gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (up.shape()[0], up.shape()[1]);
                self.accum(grads, *a, Tensor::from_raw(vec![c, r], kernels::transpose(up.data(), r, c)));
            }
            Op::Conv2d(x, k) => {
                let geo = kernels::ConvGeometry::new(val(*x).shape(), val(*k).shape());
                if self.rg(*x) {
                    let gx = kernels::conv2d_grad_input(up.data(), val(*k).data(), &geo);
                    self.accum(grads, *x, Tensor::from_raw(val(*x).shape().to_vec(), gx));
                }
                if self.rg(*k) {
                    let gk = kernels::conv2d_grad_kernel(up.data(), val(*x).data(), &geo);
                    self.accum(grads, *k, Tensor::from_raw(val(*k).shape().to_vec(), gk));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, up.clone());
                self.accum(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, up.clone());
                self.accum(grads, *b, up.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, up.zip_map(val(*b), |g, y| g * y).unwrap());
                }
                if self.rg(*b) {
                    self.accum(grads, *b, up.zip_map(val(*a), |g, x| g * x).unwrap());
                }
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, up.clone());
                if self.rg(*b) {
                    let c = val(*b).len();
                    let mut gb = vec![0.0; c];
                    for (k, g) in up.data().iter().enumerate() {
                        gb[k % c] += g;
                    }
                    self.accum(grads, *b, Tensor::from_raw(vec![c], gb));
                }
            }
            Op::Scale(a, k) => self.accum(grads, *a, up.map(|g| g * k)),
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                if self.rg(*a) {
                    self.accum(grads, *a, up.map(|g| g * k));
                }
                if self.rg(*s) {
                    let d: f64 = up.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                    self.accum(grads, *s, Tensor::from_raw(val(*s).shape().to_vec(), vec![d]));
                }
            }
            Op::Relu(a) => {
                let g = up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap();
                self.accum(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = up.zip_map(&node.value, |g, y| g * (1.0 - y * y)).unwrap();
                self.accum(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = up.zip_map(&node.value, |g, y| g * y * (1.0 - y)).unwrap();
                self.accum(grads, *a, g);
            }
            Op::MeanSpatial(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let mut g = Vec::with_capacity(val(*a).len());
                for &u in up.data() {
                    g.extend(std::iter::repeat(u / hw as f64).take(hw));
                }
                self.accum(grads, *a, Tensor::from_raw(s.to_vec(), g));
            }
            Op::Concat(parts) => {
                let n = up.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(n * w);
                        for r in 0..n {
                            g.extend_from_slice(&up.row(r)[offset..offset + w]);
                        }
                        self.accum(grads, p, Tensor::from_raw(vec![n, w], g));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let s = val(*a).shape();
                let (n, c) = (s[0], s[1]);
                let w = up.shape()[1];
                let mut g = vec![0.0; n * c];
                for r in 0..n {
                    g[r * c + start..r * c + start + w].copy_from_slice(up.row(r));
                }
                self.accum(grads, *a, Tensor::from_raw(vec![n, c], g));
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, Tensor::from_raw(val(*a).shape().to_vec(), up.data().to_vec()));
            }
            Op::MeanAll(a) => {
                let n = val(*a).len();
                self.accum(grads, *a, Tensor::full(val(*a).shape(), up.item() / n as f64));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = val(*logits).shape()[1];
                let n = labels.len() as f64;
                let mut g = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * c + y] -= 1.0;
                }
                let k = up.item() / n;
                g.iter_mut().for_each(|v| *v *= k);
                self.accum(grads, *logits, Tensor::from_raw(val(*logits).shape().to_vec(), g));
            }
            Op::SoftCe { logits, targets, probs } => {
                let s = val(*logits).shape();
                let k = up.item() / s[0] as f64;
                let g = probs.iter().zip(targets).map(|(p, t)| (p - t) * k).collect();
                self.accum(grads, *logits, Tensor::from_raw(s.to_vec(), g));
            }
            Op::Huber { a, b, delta, scale } => {
                let (av, bv) = (val(*a), val(*b));
                let k = up.item() * scale / av.len() as f64;
                let ga = av.zip_map(bv, |x, y| k * (x - y).clamp(-delta, *delta)).unwrap();
                if self.rg(*b) {
                    self.accum(grads, *b, ga.map(|v| -v));
                }
                self.accum(grads, *a, ga);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let back = kernels::group_norm_backward(
                    up.data(),
                    val(*x).shape(),
                    val(*gamma).data(),
                    xhat,
                    inv_std,
                    *groups,
                );
                let shape = val(*x).shape().to_vec();
                let c = shape[1];
                self.accum(grads, *x, Tensor::from_raw(shape, back.dx));
                self.accum(grads, *gamma, Tensor::from_raw(vec![c], back.dgamma));
                self.accum(grads, *beta, Tensor::from_raw(vec![c], back.dbeta));
            }
        }
    }
}
