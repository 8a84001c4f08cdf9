//! Tape-recorded reverse-mode differentiation.
//!
//! Every primitive appends one node to the tape. `backward` replays the tape
//! from the loss to the first node, so adjoints are visited in exact reverse
//! order of recording and contributions to an operand are summed.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{check_values, numel, Tensor};

use super::params::{ParamGrads, ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Flat index map from an output element to the broadcast operand element.
type IndexMap = Option<Vec<usize>>;

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, map_a: IndexMap, map_b: IndexMap },
    Mul { a: Var, b: Var, map_a: IndexMap, map_b: IndexMap },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, d: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    LogSumExp { x: Var, outer: usize, ext: usize, inner: usize },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Slice { a: Var, outer: usize, ext: usize, start: usize, len: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, total: usize, inner: usize },
    Sum { a: Var },
    SumAxis { a: Var, outer: usize, ext: usize, inner: usize, scale: f64 },
    CausalConv { kernel: Var, input: Var, len: usize, channels: usize },
    Conv2d { x: Var, w: Var, b: Var, h: usize, w_: usize, cin: usize, cout: usize, k: usize },
    /// Channelwise SSM kernel generation; parameters are re-read in backward.
    SsmKernel(crate::ssm::KernelOp),
    /// Scalar function of one input whose full gradient was computed in forward.
    ScalarFn { input: Var, jacobian: Vec<f64> },
}

/// One computation record. Parameters are read-shared from a [`ParamStore`].
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    pub(crate) nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

fn broadcast_map(src: &[usize], out: &[usize]) -> IndexMap {
    if src == out {
        return None;
    }
    let rank = out.len();
    let off = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        let ext = if i < off { 1 } else { src[i - off] };
        strides[i] = if ext == 1 { 0 } else { s };
        s *= ext;
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &IndexMap, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    let u = (2.0 / PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `[m×k]·[k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_values(&value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. It is differentiated iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t)
    }

    /// Records data that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.push_leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push_leaf(store.get(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::contract(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let map_a = broadcast_map(self.shape(a), &shape);
        let map_b = broadcast_map(self.shape(b), &shape);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..numel(&shape))
            .map(|i| va[at(&map_a, i)] + vb[at(&map_b, i)])
            .collect();
        self.push(shape, out, Op::Add { a, b, map_a, map_b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let map_a = broadcast_map(self.shape(a), &shape);
        let map_b = broadcast_map(self.shape(b), &shape);
        let (va, vb) = (self.value(a), self.value(b));
        let out = (0..numel(&shape))
            .map(|i| va[at(&map_a, i)] * vb[at(&map_b, i)])
            .collect();
        self.push(shape, out, Op::Mul { a, b, map_a, map_b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layernorm of a scalar"))?;
        if d == 0 {
            return Err(Error::dim("layernorm over an empty axis"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layernorm gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::contract("layernorm eps must be positive"));
        }
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm { x, gain, bias, d, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Stable `log Σ exp` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * ext + e) * inner + i;
                out[o * inner + i] = logsumexp_iter((0..ext).map(|e| xv[idx(e)]));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(out_shape, out, Op::LogSumExp { x, outer, ext, inner }, &[x])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose of rank-{} tensor", s.len())));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis)?;
        if start + len > ext {
            return Err(Error::dim(format!(
                "slice {start}..{} of axis {axis} with extent {ext}",
                start + len
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, out, Op::Slice { a, outer, ext, start, len, inner }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut spans = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            spans.push((p, s[axis]));
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, ext) in &spans {
                let v = self.value(p);
                out.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(shape, out, Op::Concat { parts: spans, outer, total, inner }, parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis)?;
        let scale = if mean { 1.0 / ext as f64 } else { 1.0 };
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &v[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= scale);
        shape.remove(axis);
        self.push(shape, out, Op::SumAxis { a, outer, ext, inner, scale }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Per-channel causal convolution of `input [L×C]` with `kernel [C×L]`,
    /// evaluated by zero-padded FFT products.
    pub fn causal_conv(&mut self, kernel: Var, input: Var) -> Result<Var> {
        let (sk, si) = (self.shape(kernel), self.shape(input));
        if sk.len() != 2 || si.len() != 2 || sk[0] != si[1] || sk[1] != si[0] {
            return Err(Error::dim(format!("causal_conv kernel {sk:?} with input {si:?}")));
        }
        let (len, channels) = (si[0], si[1]);
        let out = crate::ssm::channelwise_conv(self.value(kernel), self.value(input), len, channels);
        self.push(
            vec![len, channels],
            out,
            Op::CausalConv { kernel, input, len, channels },
            &[kernel, input],
        )
    }

    /// Same-padded 2-D convolution. `x [H×W×Cin]`, `w [Cout×k×k×Cin]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 3
            && sw.len() == 4
            && sw[1] == sw[2]
            && sw[1] % 2 == 1
            && sw[3] == sx[2]
            && sb == [sw[0]];
        if !ok {
            return Err(Error::dim(format!("conv2d input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let (h, w_, cin, cout, k) = (sx[0], sx[1], sx[2], sw[0], sw[1]);
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), h, w_, cin, cout, k);
        self.push(
            vec![h, w_, cout],
            out,
            Op::Conv2d { x, w, b, h, w_, cin, cout, k },
            &[x, w, b],
        )
    }

    /// Records a scalar whose gradient w.r.t. `input` is already known.
    pub(crate) fn scalar_fn(&mut self, input: Var, value: f64, jacobian: Vec<f64>) -> Result<Var> {
        if jacobian.len() != self.value(input).len() {
            return Err(Error::dim("jacobian length differs from input"));
        }
        check_values(&jacobian)?;
        self.push(Vec::new(), vec![value], Op::ScalarFn { input, jacobian }, &[input])
    }

    /// Propagates adjoints from a scalar `loss` back through the record.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        let param_vars = self.param_vars.clone();
        Ok(Gradients { leaf_grads, param_vars })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = &self.nodes[b.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            let row = &bv[p * n..(p + 1) * n];
                            let gi = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += gi.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = &self.nodes[a.0].value;
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, gi) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += aip * gi;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, map_a, map_b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[at(map_a, i)] += gi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[at(map_b, i)] += gi;
                    }
                }
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[at(map_a, i)] += gi * vb[at(map_b, i)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[at(map_b, i)] += gi * va[at(map_a, i)];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
                }
            }
            Op::Relu { a } => {
                let x = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i]);
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, d, xhat, rstd } => {
                let d = *d;
                let rows = rstd.len();
                let gv = &self.nodes[gain.0].value;
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut gh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            gh[c] = g[r * d + c] * gv[c];
                        }
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (gh[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::LogSumExp { x, outer, ext, inner } => {
                let xv = &self.nodes[x.0].value;
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let out = y[o * inner + i];
                            if out == f64::NEG_INFINITY {
                                continue;
                            }
                            let go = g[o * inner + i];
                            for e in 0..*ext {
                                let j = (o * ext + e) * inner + i;
                                gx[j] += go * (xv[j] - out).exp();
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Slice { a, outer, ext, start, len, inner } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let base = (o * ext + start) * inner;
                        for (dst, src) in ga[base..base + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Concat { parts, outer, total, inner } => {
                let mut offset = 0;
                for &(p, ext) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        let chunk = ext * inner;
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            for (dst, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[src..src + chunk]) {
                                *dst += s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumAxis { a, outer, ext, inner, scale } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..*outer {
                        for e in 0..*ext {
                            for i in 0..*inner {
                                ga[(o * ext + e) * inner + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::CausalConv { kernel, input, len, channels } => {
                let (len, channels) = (*len, *channels);
                if self.nodes[kernel.0].needs_grad || self.nodes[input.0].needs_grad {
                    let (gk, gx) = crate::ssm::channelwise_conv_adjoint(
                        &self.nodes[kernel.0].value,
                        &self.nodes[input.0].value,
                        g,
                        len,
                        channels,
                    );
                    if let Some(acc) = self.acc(grads, *kernel) {
                        acc.iter_mut().zip(&gk).for_each(|(o, v)| *o += v);
                    }
                    if let Some(acc) = self.acc(grads, *input) {
                        acc.iter_mut().zip(&gx).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Conv2d { x, w, b, h, w_, cin, cout, k } => {
                let (h, wd, cin, cout, k) = (*h, *w_, *cin, *cout, *k);
                if let Some(gb) = self.acc(grads, *b) {
                    for px in 0..h * wd {
                        for co in 0..cout {
                            gb[co] += g[px * cout + co];
                        }
                    }
                }
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if let Some(gw) = self.acc(grads, *w) {
                    conv2d_weight_grad(xv, g, gw, h, wd, cin, cout, k);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    conv2d_input_grad(wv, g, gx, h, wd, cin, cout, k);
                }
            }
            Op::SsmKernel(op) => {
                let contributions = op.backward(self, g);
                for (v, contrib) in contributions {
                    if let Some(acc) = self.acc(grads, v) {
                        acc.iter_mut().zip(&contrib).for_each(|(o, c)| *o += c);
                    }
                }
            }
            Op::ScalarFn { input, jacobian } => {
                if let Some(gi) = self.acc(grads, *input) {
                    gi.iter_mut().zip(jacobian).for_each(|(o, j)| *o += g[0] * j);
                }
            }
        }
    }
}

pub(crate) fn logsumexp_iter(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], h: usize, wd: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            let o = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            o.copy_from_slice(b);
            for ky in 0..k {
                let sy = y as isize + ky as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r as isize;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let px = &x[(sy as usize * wd + sx as usize) * cin..][..cin];
                    for (co, ov) in o.iter_mut().enumerate() {
                        let wr = &w[((co * k + ky) * k + kx) * cin..][..cin];
                        *ov += wr.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_weight_grad(x: &[f64], g: &[f64], gw: &mut [f64], h: usize, wd: usize, cin: usize, cout: usize, k: usize) {
    let r = k / 2;
    for y in 0..h {
        for xx in 0..wd {
            let go = &g[(y * wd + xx) * cout..][..cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r as isize;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let px = &x[(sy as usize * wd + sx as usize) * cin..][..cin];
                    for (co, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &mut gw[((co * k + ky) * k + kx) * cin..][..cin];
                        wr.iter_mut().zip(px).for_each(|(o, p)| *o += gv * p);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_input_grad(w: &[f64], g: &[f64], gx: &mut [f64], h: usize, wd: usize, cin: usize, cout: usize, k: usize) {
    let r = k / 2;
    for y in 0..h {
        for xx in 0..wd {
            let go = &g[(y * wd + xx) * cout..][..cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r as isize;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let px = &mut gx[(sy as usize * wd + sx as usize) * cin..][..cin];
                    for (co, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wr = &w[((co * k + ky) * k + kx) * cin..][..cin];
                        px.iter_mut().zip(wr).for_each(|(o, wv)| *o += gv * wv);
                    }
                }
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
pub struct Gradients {
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars[id.0].and_then(|v| self.wrt(v))
    }

    /// Dense per-parameter gradients aligned with `store`.
    pub fn to_param_grads(&self, store: &ParamStore) -> ParamGrads {
        ParamGrads(
            store
                .ids()
                .map(|id| {
                    self.param(id)
                        .map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec)
                })
                .collect(),
        )
    }

    /// Adds these gradients into `store`'s accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = self.param(id) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
