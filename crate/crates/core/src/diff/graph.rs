use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{LsrError, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { input: usize, scale: f64 },
    Log(usize),
    Sigmoid(usize),
    Relu(usize),
    Broadcast(usize),
    SumFrom { input: usize },
    Mean(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Softmax(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run tape. Every primitive is evaluated eagerly when recorded, so
/// node order is a topological order and backward replays it in reverse.
///
/// Broadcasting is never implicit: the element-wise binary primitives require
/// identical shapes, and [`Graph::broadcast_to`] stretches a tensor explicitly
/// under right-aligned rules (each source extent equals the target or is 1).
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    branch_hash: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            branch_hash: None,
        }
    }

    /// Graph that fingerprints every relu sign and max-pool winner; used by the
    /// gradient checker to detect finite differences straddling a kink.
    pub fn with_branch_tracking() -> Self {
        let mut g = Self::new();
        g.branch_hash = Some(FNV_OFFSET);
        g
    }

    pub fn branch_fingerprint(&self) -> Option<u64> {
        self.branch_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.validate_finite("constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.validate_finite("param")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`,
    /// available for gradient-requiring leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).grad.as_ref()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            Err(LsrError::ForeignVar)
        } else {
            Ok(v.index)
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var> {
        value.validate_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn mix(&mut self, word: u64) {
        if let Some(h) = self.branch_hash.as_mut() {
            *h = (*h ^ word).wrapping_mul(FNV_PRIME);
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(LsrError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push_checked(name, value, op(ia, ib), &[ia, ib])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push_checked(name, value, op, &[ia])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `scale * a + shift`, element-wise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("affine", a, |x| scale * x + shift, Op::Affine { input: ia, scale })
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("log", a, f64::ln, Op::Log(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(ia))
    }

    /// `max(x, 0)`. The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if self.branch_hash.is_some() {
            let bits: Vec<u64> = self.nodes[ia].value.data().iter().map(|&x| (x > 0.0) as u64).collect();
            for b in bits {
                self.mix(b);
            }
        }
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(ia))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let map = broadcast_index_map(src.shape(), shape).ok_or_else(|| LsrError::ShapeMismatch {
            op: "broadcast",
            lhs: src.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        self.push_checked("broadcast", value, Op::Broadcast(ia), &[ia])
    }

    /// Sum over every axis from `axis` onwards; the result has shape `shape[..axis]`.
    pub fn sum_from(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if axis > src.shape().len() {
            return Err(LsrError::ShapeMismatch {
                op: "sum_from",
                lhs: src.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let out_shape = src.shape()[..axis].to_vec();
        let inner: usize = src.shape()[axis..].iter().product();
        let data = if inner == 0 {
            vec![0.0; out_shape.iter().product()]
        } else {
            src.data().chunks(inner).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::from_parts(out_shape, data);
        self.push_checked("sum_from", value, Op::SumFrom { input: ia }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_from(a, 0)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if src.numel() == 0 {
            return Err(LsrError::Empty("mean"));
        }
        let m = src.data().iter().sum::<f64>() / src.numel() as f64;
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(ia), &[ia])
    }

    /// Stride-1 cross-correlation of `(N, Ci, H, W)` input with a
    /// `(Co, Ci, Kh, Kw)` kernel, zero padding on all sides, optional `(Co)` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.check(input)?, self.check(kernel)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let xs = self.nodes[ii].value.shape().to_vec();
        let ks = self.nodes[ik].value.shape().to_vec();
        let mismatch = || LsrError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ks.clone(),
        };
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(mismatch());
        }
        if xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3] {
            return Err(mismatch());
        }
        if let Some(ib) = ib {
            let bs = self.nodes[ib].value.shape();
            if bs != [ks[0]] {
                return Err(LsrError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bs.to_vec(),
                    rhs: vec![ks[0]],
                });
            }
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            padding,
        };
        let data = kernels::conv2d_forward(
            &geometry,
            self.nodes[ii].value.data(),
            self.nodes[ik].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let shape = vec![xs[0], ks[0], geometry.out_h(), geometry.out_w()];
        let value = Tensor::from_parts(shape, data);
        let mut inputs = vec![ii, ik];
        inputs.extend(ib);
        self.push_checked(
            "conv2d",
            value,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                bias: ib,
                geometry,
            },
            &inputs,
        )
    }

    /// 2x2 stride-2 max pooling over `(N, C, H, W)` with even H and W.
    /// Ties route the gradient to the first maximum in row-major order.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(LsrError::ShapeMismatch {
                op: "maxpool2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (data, argmax) = kernels::maxpool2_forward(&s, self.nodes[ia].value.data());
        if self.branch_hash.is_some() {
            for &i in &argmax {
                self.mix(i as u64);
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], s[2] / 2, s[3] / 2], data);
        self.push_checked("maxpool2", value, Op::MaxPool2 { input: ia, argmax }, &[ia])
    }

    /// Nearest-neighbour 2x spatial upsampling of `(N, C, H, W)`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if s.len() != 4 {
            return Err(LsrError::ShapeMismatch {
                op: "upsample2",
                lhs: s,
                rhs: vec![4],
            });
        }
        let data = kernels::upsample2_forward(&s, self.nodes[ia].value.data());
        let value = Tensor::from_parts(vec![s[0], s[1], 2 * s[2], 2 * s[3]], data);
        self.push_checked("upsample2", value, Op::Upsample2(ia), &[ia])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(LsrError::Empty("concat"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(LsrError::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(LsrError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.push_checked("concat", value, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(LsrError::ShapeMismatch {
                op: "narrow",
                lhs: s,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * s[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::from_parts(shape, data);
        self.push_checked("narrow", value, Op::Narrow { input: ia, axis, start }, &[ia])
    }

    /// Softmax across axis 1 of a tensor with at least two axes.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if s.len() < 2 {
            return Err(LsrError::ShapeMismatch {
                op: "softmax",
                lhs: s,
                rhs: vec![2],
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let src = self.nodes[ia].value.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..inner {
                let at = |k: usize| (b * c + k) * inner + p;
                let m = (0..c).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (src[at(k)] - m).exp()).sum();
                for k in 0..c {
                    data[at(k)] = (src[at(k)] - m).exp() / z;
                }
            }
        }
        let value = Tensor::from_parts(s, data);
        self.push_checked("softmax", value, Op::Softmax(ia), &[ia])
    }

    /// Reverse sweep from a scalar output. Gradients land on every leaf created
    /// with [`Graph::param`]; earlier gradients are overwritten.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let io = self.check(output)?;
        let out_shape = self.nodes[io].value.shape().to_vec();
        if self.nodes[io].value.numel() != 1 {
            return Err(LsrError::NotScalar(out_shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; io + 1];
        adj[io] = Some(vec![1.0]);

        for i in (0..=io).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.grad = Some(Tensor::from_parts(shape, data));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let wants = |j: usize| nodes[j].requires_grad;
        let accumulate = |adj: &mut [Option<Vec<f64>>], j: usize, f: &dyn Fn(usize) -> f64| {
            accumulate_into(nodes, adj, j, f)
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, &|k| g[k]);
                accumulate(adj, *b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, &|k| g[k]);
                accumulate(adj, *b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                accumulate(adj, *a, &|k| g[k] * vb[k]);
                accumulate(adj, *b, &|k| g[k] * va[k]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                accumulate(adj, *a, &|k| g[k] / vb[k]);
                accumulate(adj, *b, &|k| -g[k] * va[k] / (vb[k] * vb[k]));
            }
            Op::Affine { input, scale } => accumulate(adj, *input, &|k| g[k] * scale),
            Op::Log(a) => {
                let va = nodes[*a].value.data();
                accumulate(adj, *a, &|k| g[k] / va[k]);
            }
            Op::Sigmoid(a) => accumulate(adj, *a, &|k| g[k] * out[k] * (1.0 - out[k])),
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                accumulate(adj, *a, &|k| if va[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Broadcast(a) => {
                if wants(*a) {
                    let map = broadcast_index_map(nodes[*a].value.shape(), nodes[i].value.shape())
                        .expect("validated at construction");
                    let buf = adj[*a].get_or_insert_with(|| vec![0.0; nodes[*a].value.numel()]);
                    for (k, src) in map.into_iter().enumerate() {
                        buf[src] += g[k];
                    }
                }
            }
            Op::SumFrom { input } => {
                let inner = nodes[*input].value.numel() / g.len().max(1);
                accumulate(adj, *input, &|k| g[k / inner.max(1)]);
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel() as f64;
                accumulate(adj, *a, &|_| g[0] / n);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let (gin, gk, gb) = kernels::conv2d_backward(
                    geometry,
                    nodes[*input].value.data(),
                    nodes[*kernel].value.data(),
                    g,
                    wants(*input),
                    wants(*kernel),
                    bias.is_some_and(wants),
                );
                if let Some(v) = gin {
                    accumulate(adj, *input, &|k| v[k]);
                }
                if let Some(v) = gk {
                    accumulate(adj, *kernel, &|k| v[k]);
                }
                if let (Some(b), Some(v)) = (bias, gb) {
                    accumulate(adj, *b, &|k| v[k]);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let buf = adj[*input].get_or_insert_with(|| vec![0.0; nodes[*input].value.numel()]);
                    for (k, &src) in argmax.iter().enumerate() {
                        buf[src] += g[k];
                    }
                }
            }
            Op::Upsample2(a) => {
                if wants(*a) {
                    let v = kernels::upsample2_backward(nodes[*a].value.shape(), g);
                    accumulate(adj, *a, &|k| v[k]);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &j in inputs {
                    let chunk = nodes[j].value.shape()[*axis] * inner;
                    if wants(j) {
                        let buf = adj[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
                        for o in 0..outer {
                            let src = &g[o * total + offset..][..chunk];
                            for (d, s) in buf[o * chunk..][..chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { input, axis, start } => {
                if wants(*input) {
                    let s = nodes[*input].value.shape();
                    let len = nodes[i].value.shape()[*axis];
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let buf = adj[*input].get_or_insert_with(|| vec![0.0; nodes[*input].value.numel()]);
                    for o in 0..outer {
                        let dst = &mut buf[(o * s[*axis] + start) * inner..][..len * inner];
                        for (d, v) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let s = nodes[i].value.shape();
                    let (n, c) = (s[0], s[1]);
                    let inner: usize = s[2..].iter().product();
                    let buf = adj[*a].get_or_insert_with(|| vec![0.0; out.len()]);
                    for b in 0..n {
                        for p in 0..inner {
                            let at = |k: usize| (b * c + k) * inner + p;
                            let dot: f64 = (0..c).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..c {
                                buf[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate_into(nodes: &[Node], adj: &mut [Option<Vec<f64>>], j: usize, f: &dyn Fn(usize) -> f64) {
    if !nodes[j].requires_grad {
        return;
    }
    let buf = adj[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
    for (k, d) in buf.iter_mut().enumerate() {
        *d += f(k);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each flat index of `target`, the flat index of `source` it reads from,
/// or `None` if `source` cannot be broadcast to `target`.
fn broadcast_index_map(source: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if source.len() > target.len() {
        return None;
    }
    let offset = target.len() - source.len();
    let mut strides = vec![0usize; target.len()];
    let mut stride = 1;
    for (k, &ext) in source.iter().enumerate().rev() {
        let t = target[k + offset];
        if ext == t {
            strides[k + offset] = if ext == 1 { 0 } else { stride };
        } else if ext != 1 {
            return None;
        }
        stride *= ext;
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..target.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < target[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Some(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut g = Graph::new();
        let z = g.scalar(0.0).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 0.5);
        let m = g.scalar(-3.0).unwrap();
        let r = g.relu(m).unwrap();
        assert_eq!(g.value(r).item().unwrap(), 0.0);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, k, None, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.affine(x, 2.0, 0.0).unwrap();
        assert!(matches!(g.backward(y), Err(LsrError::NotScalar(s)) if s == vec![2]));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.param(Tensor::scalar(1.0)).unwrap();
        let _ = g2.param(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g2.backward(x), Err(LsrError::ForeignVar)));
        assert!(matches!(g2.relu(x), Err(LsrError::ForeignVar)));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut g = Graph::new();
        let x = g.scalar(0.0).unwrap();
        assert!(matches!(g.log(x), Err(LsrError::NonFinite { op: "log" })));
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let mut g = Graph::new();
        let x = g.param(t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.broadcast_to(x, &[2, 3, 4]).unwrap();
        assert_eq!(g.value(y).data()[4..8], [2.0; 4]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[1, 1, 2], &[5.0, 6.0])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back).data(), &[5.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.param(t(&[1, 1, 4, 4], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>())).unwrap();
            let k = g.param(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>())).unwrap();
            let y = g.conv2d(x, k, None, 1).unwrap();
            let y = g.relu(y).unwrap();
            let y = g.maxpool2(y).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            (g.value(s).item().unwrap().to_bits(), g.grad(k).unwrap().data().to_vec())
        };
        let (a, ga) = build();
        let (b, gb) = build();
        assert_eq!(a, b);
        assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
