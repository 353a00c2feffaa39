//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its output and the ids of its
//! inputs. Node ids grow monotonically, so recording order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use super::conv::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Deconv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    SoftmaxRows(Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    Select {
        input: Var,
        indices: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        window: usize,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Scale(f64),
}

/// Recorded computation. One graph per forward pass; not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient slot per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; all zeros when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, leaving the slot empty.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of `in_shape`
/// broadcast against it.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            in_strides[i + offset] = stride;
        }
        stride *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            idx -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a gradient of broadcast shape back down to `in_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Tensor {
    if out_shape == in_shape {
        return Tensor::from_parts(in_shape.to_vec(), grad.to_vec());
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut acc = vec![0.0; in_shape.iter().product()];
    for (g, &i) in grad.iter().zip(&map) {
        acc[i] += g;
    }
    Tensor::from_parts(in_shape.to_vec(), acc)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const BCE_CLAMP: f64 = 1e-7;
const COSINE_EPS: f64 = 1e-12;

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

    pub fn contains(&self, v: Var) -> bool {
        v.0 < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is computed by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant; its gradient is always reported as zero.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let av = ad[i * n + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[k * p..(k + 1) * p];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of a `(C_in, H, W)` input with a `(C_out, C_in, kh, kw)` kernel,
    /// zero padding on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d input {si:?} with kernel {sk:?}, stride {stride}"
            )));
        }
        let (h, w) = (si[1] + 2 * padding, si[2] + 2 * padding);
        if h < sk[2] || w < sk[3] {
            return Err(Error::Dimension(format!(
                "conv2d kernel {sk:?} larger than padded input {si:?}"
            )));
        }
        let geom = ConvGeometry {
            in_channels: si[0],
            out_channels: sk[0],
            in_h: si[1],
            in_w: si[2],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
            out_h: (h - sk[2]) / stride + 1,
            out_w: (w - sk[3]) / stride + 1,
        };
        let out = conv::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::from_parts(vec![geom.out_channels, geom.out_h, geom.out_w], out);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Transposed convolution of a `(C_in, H, W)` input with a `(C_in, C_out, kh, kw)`
    /// kernel. Output side is `(H - 1) * stride + max(kh, stride)`, so a kernel no
    /// larger than the stride scatters input values onto a zero canvas.
    pub fn deconv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[0] || stride == 0 {
            return Err(Error::Dimension(format!(
                "deconv2d input {si:?} with kernel {sk:?}, stride {stride}"
            )));
        }
        let geom = ConvGeometry {
            in_channels: si[0],
            out_channels: sk[1],
            in_h: si[1],
            in_w: si[2],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding: 0,
            out_h: (si[1].max(1) - 1) * stride + sk[2].max(stride),
            out_w: (si[2].max(1) - 1) * stride + sk[3].max(stride),
        };
        let out = conv::deconv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::from_parts(vec![geom.out_channels, geom.out_h, geom.out_w], out);
        Ok(self.push(value, Op::Deconv2d { input, kernel, geom }, &[input, kernel]))
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Scale(c) => Ok(self.scale(args[0], c)),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// `1 - x`, used to turn sketch intensities into darkness.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > 0.0 { e } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared entries of `a - b`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dimension(format!(
                    "concat trailing dims {:?} vs {tail:?}",
                    s.get(1..)
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("softmax_rows of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(x), &[x]))
    }

    /// Rows `rows[i]` of a 2-D table, stacked into `(rows.len(), D)`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows from {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!("row {bad} out of range for table of {n}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            rows: rows.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![rows.len(), d], out), op, &[table]))
    }

    /// Flat-index selection into a 1-D result.
    pub fn select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(input).numel();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(input).data();
        let out = indices.iter().map(|&i| src[i]).collect::<Vec<_>>();
        let op = Op::Select {
            input,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![indices.len()], out), op, &[input]))
    }

    /// Non-overlapping average pooling of a `(C, H, W)` tensor.
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || window == 0 || s[1] % window != 0 || s[2] % window != 0 {
            return Err(Error::Dimension(format!("avg_pool2d window {window} on {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / window, w / window);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * oh * ow];
        let inv = 1.0 / (window * window) as f64;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / window) * ow + x / window] += src[(ch * h + y) * w + x] * inv;
                }
            }
        }
        let op = Op::AvgPool2d { input, window };
        Ok(self.push(Tensor::from_parts(vec![c, oh, ow], out), op, &[input]))
    }

    /// Mean binary cross-entropy of `pred` against a 0/1 target, with `pred`
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Dimension(format!(
                "bce prediction length {} vs target length {}",
                p.len(),
                target.len()
            )));
        }
        let mut acc = 0.0;
        for (&pv, &t) in p.iter().zip(target) {
            let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let v = Tensor::scalar(acc / p.len() as f64);
        let op = Op::Bce {
            pred,
            target: target.to_vec(),
        };
        Ok(self.push(v, op, &[pred]))
    }

    /// Cosine similarity of two tensors viewed as flat vectors; 0 when either is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() != vb.numel() {
            return Err(Error::Dimension(format!(
                "cosine of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (dot, na, nb) = cosine_parts(va.data(), vb.data());
        let denom = (na * nb).sqrt();
        let c = if denom > COSINE_EPS { dot / denom } else { 0.0 };
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.contains(root) {
            return Err(Error::Contract(format!("root {root:?} is not recorded on this graph")));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].tracked {
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        for k in 0..n {
                            let brow = &tb.data()[k * p..(k + 1) * p];
                            let grow = &gd[r * p..(r + 1) * p];
                            ga[r * n + k] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], ga));
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![0.0; n * p];
                    for r in 0..m {
                        let grow = &gd[r * p..(r + 1) * p];
                        for k in 0..n {
                            let av = ta.data()[r * n + k];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[k * p..(k + 1) * p].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, p], gb));
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let (gx, gk) = conv::conv2d_backward(geom, x.data(), k.data(), gd);
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
                self.accumulate(grads, *kernel, Tensor::from_parts(k.shape().to_vec(), gk));
            }
            Op::Deconv2d { input, kernel, geom } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let (gx, gk) = conv::deconv2d_backward(geom, x.data(), k.data(), gd);
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
                self.accumulate(grads, *kernel, Tensor::from_parts(k.shape().to_vec(), gk));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce_to(gd, out.shape(), self.shape(*a));
                self.accumulate(grads, *a, ga);
                let mut gb = reduce_to(gd, out.shape(), self.shape(*b));
                if sign < 0.0 {
                    gb = gb.map(|v| -v);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    let prod = binary_broadcast(g, tb, |x, y| x * y).expect("shapes checked in forward");
                    self.accumulate(grads, *a, reduce_to(prod.data(), out.shape(), ta.shape()));
                }
                if self.nodes[b.0].tracked {
                    let prod = binary_broadcast(g, ta, |x, y| x * y).expect("shapes checked in forward");
                    self.accumulate(grads, *b, reduce_to(prod.data(), out.shape(), tb.shape()));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xin)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&s, gd[0]));
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(s, gd.to_vec()));
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![c, r], d));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, Tensor::from_parts(s, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape()[1].max(1);
                let mut d = vec![0.0; out.numel()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((o, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::GatherRows { table, rows } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut acc = vec![0.0; s[0] * d];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        acc[r * d + j] += gd[k * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(s, acc));
            }
            Op::Select { input, indices } => {
                let s = self.shape(*input).to_vec();
                let mut acc = vec![0.0; self.value(*input).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    acc[i] += gd[k];
                }
                self.accumulate(grads, *input, Tensor::from_parts(s, acc));
            }
            Op::AvgPool2d { input, window } => {
                let s = self.shape(*input).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f64;
                let mut acc = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            acc[(ch * h + y) * w + x] = gd[(ch * oh + y / window) * ow + x / window] * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(s, acc));
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred);
                let n = p.numel() as f64;
                let d = p
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            gd[0] * (pv - t) / (pv * (1.0 - pv)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_parts(p.shape().to_vec(), d));
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (_, na, nb) = cosine_parts(va.data(), vb.data());
                let denom = (na * nb).sqrt();
                if denom <= COSINE_EPS {
                    return;
                }
                let c = out.data()[0];
                let ga = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| gd[0] * (y / denom - c * x / na))
                    .collect();
                let gb = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| gd[0] * (x / denom - c * y / nb))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
        }
    }
}

/// `(a·b, |a|², |b|²)`.
fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}
