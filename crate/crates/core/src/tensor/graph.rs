use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{Tensor, TensorError, SQRT_ABS_EPS};

/// Index of a node inside a [`Graph`]. Nodes only reference earlier nodes, so
/// insertion order is a topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Row-wise ops act on the last axis of a 2-D tensor.
#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Constant(Tensor),
    /// Elementwise sum; the right operand may also be a `[n]` row broadcast over a `[B, n]` left operand.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `input · weightᵀ + bias` with `input: [B, i]`, `weight: [o, i]`, `bias: [o]`.
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    /// `sqrt(|v| + SQRT_ABS_EPS)` elementwise.
    SqrtAbs(NodeId),
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    InnerProduct(NodeId, NodeId),
    L2Norm(NodeId),
    /// `out[b] = a[b, idx[b]]`.
    Pick(NodeId, Vec<usize>),
    /// `out[k] = a[idx[k]]` over leading-axis rows.
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Stride-1 convolution, `input: [B, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: usize,
    },
    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    MaxPool2d(NodeId),
    Identity(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::SqrtAbs(_) => "sqrt-abs",
            Op::Max(..) => "max",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row-sum",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::InnerProduct(..) => "inner-product",
            Op::L2Norm(_) => "l2-norm",
            Op::Pick(..) => "pick",
            Op::GatherRows(..) => "gather-rows",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d(_) => "maxpool2d",
            Op::Identity(_) => "identity",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Max(a, b) => {
                vec![*a, *b]
            }
            Op::InnerProduct(a, b) => vec![*a, *b],
            Op::Affine { input, weight, bias } | Op::Conv2d { input, weight, bias, .. } => {
                vec![*input, *weight, *bias]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::SqrtAbs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Norm(a)
            | Op::Pick(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a, _)
            | Op::MaxPool2d(a)
            | Op::Identity(a) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    barrier: bool,
    label: Option<String>,
}

/// A static computation graph. Build it once, then evaluate with different
/// [`Bindings`] via [`forward`] and differentiate with [`backward`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
}

macro_rules! unary {
    ($($fn_name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $fn_name(&mut self, a: NodeId) -> NodeId {
            self.push(Op::$variant(a))
        })*
    };
}

macro_rules! binary {
    ($($fn_name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $fn_name(&mut self, a: NodeId, b: NodeId) -> NodeId {
            self.push(Op::$variant(a, b))
        })*
    };
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "parent {p:?} does not precede the new node");
        }
        self.nodes.push(Node { op, barrier: false, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares (or returns the existing) named input placeholder.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    unary! {
        transpose => Transpose, relu => Relu, exp => Exp, log => Log,
        square => Square, sqrt_abs => SqrtAbs, sum => Sum, mean => Mean,
        row_sum => RowSum, softmax => Softmax, log_softmax => LogSoftmax,
        l2_norm => L2Norm, max_pool2d => MaxPool2d, identity => Identity,
    }

    binary! {
        add => Add, sub => Sub, mul => Mul, matmul => MatMul, max => Max,
        inner_product => InnerProduct,
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Affine { input, weight, bias })
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, padding: usize) -> NodeId {
        self.push(Op::Conv2d { input, weight, bias, padding })
    }

    pub fn pick(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        self.push(Op::Pick(a, idx))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a, idx))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    /// Identity node flagged as a gradient barrier (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let id = self.push(Op::Identity(a));
        self.nodes[id.0].barrier = true;
        id
    }

    pub fn set_barrier(&mut self, id: NodeId, barrier: bool) {
        self.nodes[id.0].barrier = barrier;
    }

    pub fn is_barrier(&self, id: NodeId) -> bool {
        self.nodes[id.0].barrier
    }

    pub fn set_label(&mut self, id: NodeId, label: &str) {
        self.nodes[id.0].label = Some(label.to_string());
    }

    fn describe(&self, i: usize) -> String {
        match &self.nodes[i].label {
            Some(l) => format!("#{i} `{l}`"),
            None => match &self.nodes[i].op {
                Op::Input(name) => format!("#{i} `{name}`"),
                _ => format!("#{i}"),
            },
        }
    }

    fn find_label(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.label.as_deref() == Some(label))
    }
}

/// Named input values for a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.map.insert(name.to_string(), Cow::Owned(t));
        self
    }

    pub fn bind_ref(&mut self, name: &str, t: &'a Tensor) -> &mut Self {
        self.map.insert(name.to_string(), Cow::Borrowed(t));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(|c| c.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
    labels: HashMap<String, usize>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Value of the node carrying `label` (see [`Graph::set_label`]).
    pub fn named(&self, label: &str) -> Option<&Tensor> {
        self.labels.get(label).map(|&i| &self.values[i])
    }
}

/// Gradients of a scalar output with respect to named graph inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_name.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn shape_err(g: &Graph, i: usize, detail: String) -> TensorError {
    TensorError::Shape { node: g.describe(i), op: g.nodes[i].op.name(), detail }
}

fn require_2d(g: &Graph, i: usize, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(g, i, format!("expected a 2-D operand, got {s:?}"))),
    }
}

fn same_shape(g: &Graph, i: usize, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(g, i, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor { shape: a.shape().to_vec(), data }
}

/// `[m, k] × [k, n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

fn conv_dims(g: &Graph, i: usize, x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<ConvDims, TensorError> {
    let (&[batch, cin, h, wd], &[cout, wc, k, k2]) = (x.shape(), w.shape()) else {
        return Err(shape_err(
            g,
            i,
            format!("expected [B,C,H,W] and [O,C,k,k], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    };
    if wc != cin || k != k2 || b.shape() != [cout] || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(shape_err(
            g,
            i,
            format!("input {:?}, weight {:?}, bias {:?}, padding {pad}", x.shape(), w.shape(), b.shape()),
        ));
    }
    Ok(ConvDims { batch, cin, h, w: wd, cout, k, oh: h + 2 * pad - k + 1, ow: wd + 2 * pad - k + 1, pad })
}

fn eval_node(g: &Graph, i: usize, v: &[Tensor], bindings: &Bindings) -> Result<Tensor, TensorError> {
    let val = |id: &NodeId| &v[id.0];
    let out = match &g.nodes[i].op {
        Op::Input(name) => bindings.get(name).cloned().ok_or_else(|| TensorError::Unbound(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.shape() == b.shape() {
                zip_map(a, b, |x, y| x + y)
            } else if a.shape().len() == 2 && b.shape() == [a.shape()[1]] {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            } else {
                return Err(shape_err(g, i, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
        }
        Op::Sub(a, b) => {
            same_shape(g, i, val(a), val(b))?;
            zip_map(val(a), val(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(g, i, val(a), val(b))?;
            zip_map(val(a), val(b), |x, y| x * y)
        }
        Op::Max(a, b) => {
            same_shape(g, i, val(a), val(b))?;
            zip_map(val(a), val(b), f64::max)
        }
        Op::Scale(a, c) => val(a).map(|x| x * c),
        Op::MatMul(a, b) => {
            let (m, k) = require_2d(g, i, val(a))?;
            let (k2, n) = require_2d(g, i, val(b))?;
            if k != k2 {
                return Err(shape_err(g, i, format!("[{m},{k}] x [{k2},{n}]")));
            }
            Tensor { shape: vec![m, n], data: matmul_raw(val(a).data(), val(b).data(), m, k, n) }
        }
        Op::Transpose(a) => {
            let (r, c) = require_2d(g, i, val(a))?;
            Tensor { shape: vec![c, r], data: transpose_raw(val(a).data(), r, c) }
        }
        Op::Affine { input, weight, bias } => {
            let (bsz, fin) = require_2d(g, i, val(input))?;
            let (fout, fin2) = require_2d(g, i, val(weight))?;
            if fin != fin2 || val(bias).shape() != [fout] {
                return Err(shape_err(
                    g,
                    i,
                    format!(
                        "input {:?}, weight {:?}, bias {:?}",
                        val(input).shape(),
                        val(weight).shape(),
                        val(bias).shape()
                    ),
                ));
            }
            let wt = transpose_raw(val(weight).data(), fout, fin);
            let mut data = matmul_raw(val(input).data(), &wt, bsz, fin, fout);
            for r in 0..bsz {
                for (o, &bv) in data[r * fout..(r + 1) * fout].iter_mut().zip(val(bias).data()) {
                    *o += bv;
                }
            }
            Tensor { shape: vec![bsz, fout], data }
        }
        Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Square(a) => val(a).map(|x| x * x),
        Op::SqrtAbs(a) => val(a).map(|x| (x.abs() + SQRT_ABS_EPS).sqrt()),
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::Mean(a) => Tensor::scalar(val(a).data().iter().sum::<f64>() / val(a).len() as f64),
        Op::RowSum(a) => {
            let (r, _) = require_2d(g, i, val(a))?;
            Tensor { shape: vec![r], data: (0..r).map(|k| val(a).row(k).iter().sum()).collect() }
        }
        Op::Softmax(a) | Op::LogSoftmax(a) => {
            let (r, _) = require_2d(g, i, val(a))?;
            let mut out = Tensor::zeros(val(a).shape());
            let log = matches!(g.nodes[i].op, Op::LogSoftmax(_));
            for k in 0..r {
                if log {
                    log_softmax_row(val(a).row(k), out.row_mut(k));
                } else {
                    softmax_row(val(a).row(k), out.row_mut(k));
                }
            }
            out
        }
        Op::InnerProduct(a, b) => {
            let (r, _) = require_2d(g, i, val(a))?;
            same_shape(g, i, val(a), val(b))?;
            let data = (0..r).map(|k| val(a).row(k).iter().zip(val(b).row(k)).map(|(x, y)| x * y).sum()).collect();
            Tensor { shape: vec![r], data }
        }
        Op::L2Norm(a) => {
            let (r, _) = require_2d(g, i, val(a))?;
            let data = (0..r).map(|k| val(a).row(k).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            Tensor { shape: vec![r], data }
        }
        Op::Pick(a, idx) => {
            let (r, c) = require_2d(g, i, val(a))?;
            if idx.len() != r || idx.iter().any(|&j| j >= c) {
                return Err(shape_err(g, i, format!("{} indices into [{r},{c}]", idx.len())));
            }
            Tensor { shape: vec![r], data: idx.iter().enumerate().map(|(k, &j)| val(a).row(k)[j]).collect() }
        }
        Op::GatherRows(a, idx) => {
            if val(a).shape().is_empty() || idx.is_empty() || idx.iter().any(|&j| j >= val(a).rows()) {
                return Err(shape_err(g, i, format!("row indices {idx:?} into {:?}", val(a).shape())));
            }
            val(a).select_rows(idx)
        }
        Op::Reshape(a, shape) => val(a).clone().reshape(shape.clone()).map_err(|e| shape_err(g, i, e.to_string()))?,
        Op::Conv2d { input, weight, bias, padding } => {
            let (x, w, b) = (val(input), val(weight), val(bias));
            let d = conv_dims(g, i, x, w, b, *padding)?;
            conv2d_forward(&d, x.data(), w.data(), b.data())
        }
        Op::MaxPool2d(a) => {
            let &[bsz, c, h, w] = val(a).shape() else {
                return Err(shape_err(g, i, format!("expected [B,C,H,W], got {:?}", val(a).shape())));
            };
            if h < 2 || w < 2 {
                return Err(shape_err(g, i, format!("spatial extent {h}x{w} too small")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let src = val(a).data();
            let mut data = Vec::with_capacity(bsz * c * oh * ow);
            for plane in 0..bsz * c {
                let base = plane * h * w;
                for y in 0..oh {
                    for x in 0..ow {
                        let (_, m) = pool_argmax(src, base, w, y, x);
                        data.push(m);
                    }
                }
            }
            Tensor { shape: vec![bsz, c, oh, ow], data }
        }
        Op::Identity(a) => val(a).clone(),
    };
    Ok(out)
}

/// Offset and value of the maximum inside the 2×2 window; ties keep the first in row-major order.
fn pool_argmax(src: &[f64], base: usize, w: usize, y: usize, x: usize) -> (usize, f64) {
    let mut best = (base + 2 * y * w + 2 * x, f64::NEG_INFINITY);
    for dy in 0..2 {
        for dx in 0..2 {
            let off = base + (2 * y + dy) * w + 2 * x + dx;
            if src[off] > best.1 {
                best = (off, src[off]);
            }
        }
    }
    best
}

fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], b: &[f64]) -> Tensor {
    let mut out = vec![0.0; d.batch * d.cout * d.oh * d.ow];
    for n in 0..d.batch {
        for o in 0..d.cout {
            let obase = (n * d.cout + o) * d.oh * d.ow;
            out[obase..obase + d.oh * d.ow].iter_mut().for_each(|v| *v = b[o]);
            for c in 0..d.cin {
                let xbase = (n * d.cin + c) * d.h * d.w;
                let wbase = (o * d.cin + c) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[wbase + ky * d.k + kx];
                        for oy in 0..d.oh {
                            let iy = oy + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let xrow = xbase + (iy - d.pad) * d.w;
                            let orow = obase + oy * d.ow;
                            for ox in 0..d.ow {
                                let ix = ox + kx;
                                if ix < d.pad || ix - d.pad >= d.w {
                                    continue;
                                }
                                out[orow + ox] += wv * x[xrow + ix - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![d.batch, d.cout, d.oh, d.ow], data: out }
}

fn conv2d_backward(d: &ConvDims, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.cout];
    for n in 0..d.batch {
        for o in 0..d.cout {
            let obase = (n * d.cout + o) * d.oh * d.ow;
            gb[o] += g[obase..obase + d.oh * d.ow].iter().sum::<f64>();
            for c in 0..d.cin {
                let xbase = (n * d.cin + c) * d.h * d.w;
                let wbase = (o * d.cin + c) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[wbase + ky * d.k + kx];
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let iy = oy + ky;
                            if iy < d.pad || iy - d.pad >= d.h {
                                continue;
                            }
                            let xrow = xbase + (iy - d.pad) * d.w;
                            let orow = obase + oy * d.ow;
                            for ox in 0..d.ow {
                                let ix = ox + kx;
                                if ix < d.pad || ix - d.pad >= d.w {
                                    continue;
                                }
                                let gv = g[orow + ox];
                                acc += gv * x[xrow + ix - d.pad];
                                gx[xrow + ix - d.pad] += gv * wv;
                            }
                        }
                        gw[wbase + ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Evaluates every node of `graph` in order.
///
/// Fails on bad bindings or shapes, or at the first node whose value is not
/// finite; errors name the offending node.
pub fn forward(graph: &Graph, bindings: &Bindings) -> Result<Evaluation, TensorError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for i in 0..graph.nodes.len() {
        let t = eval_node(graph, i, &values, bindings)?;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { node: graph.describe(i), op: graph.nodes[i].op.name() });
        }
        values.push(t);
    }
    let labels = graph.nodes.iter().enumerate().filter_map(|(i, n)| n.label.clone().map(|l| (l, i))).collect();
    Ok(Evaluation { values, labels })
}

/// Gradient of the scalar `output` with respect to every graph input.
pub fn backward(graph: &Graph, eval: &Evaluation, output: NodeId) -> Result<Gradients, TensorError> {
    let names: Vec<&str> = graph.input_names().collect();
    backward_impl(graph, eval, output, &names)
}

impl Graph {
    /// Like [`backward`] but only propagates towards the listed inputs.
    pub fn backward_wrt(&self, eval: &Evaluation, output: NodeId, wrt: &[&str]) -> Result<Gradients, TensorError> {
        backward_impl(self, eval, output, wrt)
    }

    /// Gradient of the node labelled `label`.
    pub fn labelled(&self, label: &str) -> Option<NodeId> {
        self.find_label(label).map(NodeId)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(contribution.data) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn backward_impl(graph: &Graph, eval: &Evaluation, output: NodeId, wrt: &[&str]) -> Result<Gradients, TensorError> {
    let out_val = &eval.values[output.0];
    if out_val.len() != 1 {
        return Err(TensorError::NotScalar { node: graph.describe(output.0), shape: out_val.shape().to_vec() });
    }
    for name in wrt {
        if !graph.inputs.contains_key(*name) {
            return Err(TensorError::Unbound((*name).to_string()));
        }
    }

    // A node needs a gradient iff a barrier-free path connects it to a requested input.
    let n = output.0 + 1;
    let mut needs = vec![false; n];
    for i in 0..n {
        let node = &graph.nodes[i];
        needs[i] = !node.barrier
            && match &node.op {
                Op::Input(name) => wrt.contains(&name.as_str()),
                Op::Constant(_) => false,
                op => op.parents().iter().any(|p| needs[p.0]),
            };
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[output.0] = Some(Tensor::full(out_val.shape(), 1.0));
    let v = &eval.values;

    for i in (0..n).rev() {
        if !needs[i] {
            continue;
        }
        let Some(gout) = grads[i].take() else { continue };
        let op = &graph.nodes[i].op;
        if let Op::Input(_) = op {
            grads[i] = Some(gout);
            continue;
        }
        let send = |p: NodeId, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
            if needs[p.0] {
                accumulate(&mut grads[p.0], t);
            }
        };
        match op {
            Op::Input(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                send(*a, gout.clone(), &mut grads);
                if v[a.0].shape() == v[b.0].shape() {
                    send(*b, gout, &mut grads);
                } else {
                    let cols = v[b.0].len();
                    let mut gb = vec![0.0; cols];
                    for r in 0..gout.rows() {
                        for (s, &gv) in gb.iter_mut().zip(gout.row(r)) {
                            *s += gv;
                        }
                    }
                    send(*b, Tensor { shape: vec![cols], data: gb }, &mut grads);
                }
            }
            Op::Sub(a, b) => {
                send(*b, gout.map(|x| -x), &mut grads);
                send(*a, gout, &mut grads);
            }
            Op::Mul(a, b) => {
                send(*a, zip_map(&gout, &v[b.0], |g, y| g * y), &mut grads);
                send(*b, zip_map(&gout, &v[a.0], |g, x| g * x), &mut grads);
            }
            Op::Max(a, b) => {
                let (va, vb) = (&v[a.0], &v[b.0]);
                let ga = gout.data().iter().zip(va.data().iter().zip(vb.data()));
                let (ga, gb): (Vec<f64>, Vec<f64>) =
                    ga.map(|(&g, (&x, &y))| if x >= y { (g, 0.0) } else { (0.0, g) }).unzip();
                send(*a, Tensor { shape: va.shape().to_vec(), data: ga }, &mut grads);
                send(*b, Tensor { shape: vb.shape().to_vec(), data: gb }, &mut grads);
            }
            Op::Scale(a, c) => send(*a, gout.map(|x| x * c), &mut grads),
            Op::MatMul(a, b) => {
                let (m, k) = (v[a.0].shape()[0], v[a.0].shape()[1]);
                let nn = v[b.0].shape()[1];
                if needs[a.0] {
                    let bt = transpose_raw(v[b.0].data(), k, nn);
                    let ga = matmul_raw(gout.data(), &bt, m, nn, k);
                    send(*a, Tensor { shape: vec![m, k], data: ga }, &mut grads);
                }
                if needs[b.0] {
                    let at = transpose_raw(v[a.0].data(), m, k);
                    let gb = matmul_raw(&at, gout.data(), k, m, nn);
                    send(*b, Tensor { shape: vec![k, nn], data: gb }, &mut grads);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (v[a.0].shape()[0], v[a.0].shape()[1]);
                send(*a, Tensor { shape: vec![r, c], data: transpose_raw(gout.data(), c, r) }, &mut grads);
            }
            Op::Affine { input, weight, bias } => {
                let (bsz, fin) = (v[input.0].shape()[0], v[input.0].shape()[1]);
                let fout = v[weight.0].shape()[0];
                if needs[input.0] {
                    let gx = matmul_raw(gout.data(), v[weight.0].data(), bsz, fout, fin);
                    send(*input, Tensor { shape: vec![bsz, fin], data: gx }, &mut grads);
                }
                if needs[weight.0] {
                    let gt = transpose_raw(gout.data(), bsz, fout);
                    let gw = matmul_raw(&gt, v[input.0].data(), fout, bsz, fin);
                    send(*weight, Tensor { shape: vec![fout, fin], data: gw }, &mut grads);
                }
                if needs[bias.0] {
                    let mut gb = vec![0.0; fout];
                    for r in 0..bsz {
                        for (s, &gv) in gb.iter_mut().zip(gout.row(r)) {
                            *s += gv;
                        }
                    }
                    send(*bias, Tensor { shape: vec![fout], data: gb }, &mut grads);
                }
            }
            Op::Relu(a) => send(*a, zip_map(&gout, &v[a.0], |g, x| if x > 0.0 { g } else { 0.0 }), &mut grads),
            Op::Exp(a) => send(*a, zip_map(&gout, &v[i], |g, y| g * y), &mut grads),
            Op::Log(a) => send(*a, zip_map(&gout, &v[a.0], |g, x| g / x), &mut grads),
            Op::Square(a) => send(*a, zip_map(&gout, &v[a.0], |g, x| 2.0 * x * g), &mut grads),
            Op::SqrtAbs(a) => {
                let t = gout
                    .data()
                    .iter()
                    .zip(v[a.0].data().iter().zip(v[i].data()))
                    .map(|(&g, (&x, &y))| {
                        let s = if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g * s / (2.0 * y)
                    })
                    .collect();
                send(*a, Tensor { shape: v[a.0].shape().to_vec(), data: t }, &mut grads);
            }
            Op::Sum(a) => send(*a, Tensor::full(v[a.0].shape(), gout.item()), &mut grads),
            Op::Mean(a) => {
                let len = v[a.0].len() as f64;
                send(*a, Tensor::full(v[a.0].shape(), gout.item() / len), &mut grads)
            }
            Op::RowSum(a) => {
                let mut t = Tensor::zeros(v[a.0].shape());
                for r in 0..t.rows() {
                    let gv = gout.data()[r];
                    t.row_mut(r).iter_mut().for_each(|x| *x = gv);
                }
                send(*a, t, &mut grads);
            }
            Op::Softmax(a) => {
                let y = &v[i];
                let mut t = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: f64 = gout.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                    for ((o, &g), &p) in t.row_mut(r).iter_mut().zip(gout.row(r)).zip(y.row(r)) {
                        *o = p * (g - dot);
                    }
                }
                send(*a, t, &mut grads);
            }
            Op::LogSoftmax(a) => {
                let y = &v[i];
                let mut t = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let gsum: f64 = gout.row(r).iter().sum();
                    for ((o, &g), &ly) in t.row_mut(r).iter_mut().zip(gout.row(r)).zip(y.row(r)) {
                        *o = g - ly.exp() * gsum;
                    }
                }
                send(*a, t, &mut grads);
            }
            Op::InnerProduct(a, b) => {
                let (va, vb) = (&v[a.0], &v[b.0]);
                let mut ga = Tensor::zeros(va.shape());
                let mut gb = Tensor::zeros(vb.shape());
                for r in 0..va.rows() {
                    let gv = gout.data()[r];
                    for (o, &y) in ga.row_mut(r).iter_mut().zip(vb.row(r)) {
                        *o = gv * y;
                    }
                    for (o, &x) in gb.row_mut(r).iter_mut().zip(va.row(r)) {
                        *o = gv * x;
                    }
                }
                send(*a, ga, &mut grads);
                send(*b, gb, &mut grads);
            }
            Op::L2Norm(a) => {
                let va = &v[a.0];
                let mut t = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let norm = v[i].data()[r];
                    if norm > 0.0 {
                        let s = gout.data()[r] / norm;
                        for (o, &x) in t.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                send(*a, t, &mut grads);
            }
            Op::Pick(a, idx) => {
                let mut t = Tensor::zeros(v[a.0].shape());
                for (r, &j) in idx.iter().enumerate() {
                    t.row_mut(r)[j] = gout.data()[r];
                }
                send(*a, t, &mut grads);
            }
            Op::GatherRows(a, idx) => {
                let mut t = Tensor::zeros(v[a.0].shape());
                for (k, &j) in idx.iter().enumerate() {
                    for (o, &gv) in t.row_mut(j).iter_mut().zip(gout.row(k)) {
                        *o += gv;
                    }
                }
                send(*a, t, &mut grads);
            }
            Op::Reshape(a, _) | Op::Identity(a) => {
                let shape = v[a.0].shape().to_vec();
                send(*a, Tensor { shape, data: gout.data }, &mut grads);
            }
            Op::Conv2d { input, weight, bias, padding } => {
                let d = conv_dims(graph, i, &v[input.0], &v[weight.0], &v[bias.0], *padding)?;
                let (gx, gw, gb) = conv2d_backward(&d, v[input.0].data(), v[weight.0].data(), gout.data());
                send(*input, Tensor { shape: v[input.0].shape().to_vec(), data: gx }, &mut grads);
                send(*weight, Tensor { shape: v[weight.0].shape().to_vec(), data: gw }, &mut grads);
                send(*bias, Tensor { shape: vec![d.cout], data: gb }, &mut grads);
            }
            Op::MaxPool2d(a) => {
                let va = &v[a.0];
                let (h, w) = (va.shape()[2], va.shape()[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut t = Tensor::zeros(va.shape());
                let mut k = 0;
                for plane in 0..va.shape()[0] * va.shape()[1] {
                    let base = plane * h * w;
                    for y in 0..oh {
                        for x in 0..ow {
                            let (off, _) = pool_argmax(va.data(), base, w, y, x);
                            t.data[off] += gout.data[k];
                            k += 1;
                        }
                    }
                }
                send(*a, t, &mut grads);
            }
        }
    }

    let mut by_name = BTreeMap::new();
    for name in wrt {
        let id = graph.inputs[*name];
        let grad = if id.0 < n {
            grads[id.0].take().unwrap_or_else(|| Tensor::zeros(eval.values[id.0].shape()))
        } else {
            Tensor::zeros(eval.values[id.0].shape())
        };
        if !grad.is_finite() {
            return Err(TensorError::NonFinite { node: graph.describe(id.0), op: "backward" });
        }
        by_name.insert((*name).to_string(), grad);
    }
    Ok(Gradients { by_name })
}
