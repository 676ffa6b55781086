//! Reverse-mode differentiation over the fixed set of vector operations the
//! steering pipeline and its losses require.
//!
//! A [`Tape`] records an eagerly-evaluated computation graph during the
//! forward pass (append-only), then replays it in reverse to accumulate
//! vector-Jacobian products. All tape arithmetic is `f64`; single-precision
//! corpus embeddings are widened at the tape boundary.
//!
//! Every node value is checked for finiteness as it is produced, so a forward
//! pass either yields finite values everywhere or reports which primitive
//! failed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Dense row-major tensor used for trainable parameters and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    /// 1×n row vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    /// d×d identity.
    pub fn identity(d: usize) -> Self {
        let mut t = Tensor::zeros(d, d);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Value shape carried by a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    fn numel(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(&'static str),
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    Div(NodeRef, NodeRef),
    /// Vector times scalar node.
    Scale(NodeRef, NodeRef),
    Dot(NodeRef, NodeRef),
    /// Matrix param times vector.
    MatVec(NodeRef, NodeRef),
    Sigmoid(NodeRef),
    Tanh(NodeRef),
    Exp(NodeRef),
    Log(NodeRef),
    Sqrt(NodeRef),
    Softmax(NodeRef),
    LayerNorm(NodeRef),
    LogSumExp(NodeRef),
    Concat(Vec<NodeRef>),
    Sum(NodeRef),
    Index(NodeRef, usize),
    /// Bounds apply at construction; backward is straight-through.
    Clamp(NodeRef),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    /// Cached 1/sqrt(var + eps) for layernorm backward.
    inv_std: f64,
}

/// Gradient buffers keyed by parameter identity; shapes match the parameters.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<&'static str, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    fn accumulate(&mut self, name: &'static str, shape: Shape, grad: &[f64]) {
        let (rows, cols) = match shape {
            Shape::Matrix(r, c) => (r, c),
            Shape::Vector(n) => (1, n),
            Shape::Scalar => (1, 1),
        };
        let entry = self.grads.entry(name).or_insert_with(|| Tensor::zeros(rows, cols));
        for (e, g) in entry.data_mut().iter_mut().zip(grad) {
            *e += g;
        }
    }
}

/// Append-only reverse-mode tape. Single-writer: one forward/backward pass
/// per tape; independent tapes may run concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeRef) -> &[f64] {
        &self.nodes[n.0].value
    }

    pub fn shape(&self, n: NodeRef) -> Shape {
        self.nodes[n.0].shape
    }

    pub fn scalar_value(&self, n: NodeRef) -> f64 {
        debug_assert_eq!(self.nodes[n.0].shape, Shape::Scalar);
        self.nodes[n.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>, name: &'static str) -> Result<NodeRef> {
        debug_assert_eq!(shape.numel(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteOp { op: name });
        }
        self.nodes.push(Node { op, shape, value, inv_std: 0.0 });
        Ok(NodeRef(self.nodes.len() - 1))
    }

    fn vec_len(&self, n: NodeRef, context: &'static str) -> Result<usize> {
        match self.nodes[n.0].shape {
            Shape::Vector(len) => Ok(len),
            Shape::Scalar => Ok(1),
            // Row-vector parameters participate in vector ops directly.
            Shape::Matrix(1, c) => Ok(c),
            Shape::Matrix(r, c) => Err(Error::DimensionMismatch { expected: 1, got: r * c, context }),
        }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant vector leaf (no gradient).
    pub fn input(&mut self, values: &[f64]) -> Result<NodeRef> {
        self.push(Op::Leaf, Shape::Vector(values.len()), values.to_vec(), "input")
    }

    /// Constant vector leaf widened from single precision.
    pub fn input_f32(&mut self, values: &[f32]) -> Result<NodeRef> {
        let widened: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        self.push(Op::Leaf, Shape::Vector(widened.len()), widened, "input")
    }

    /// Constant scalar leaf.
    pub fn constant(&mut self, v: f64) -> Result<NodeRef> {
        self.push(Op::Leaf, Shape::Scalar, vec![v], "constant")
    }

    /// Registered trainable parameter; gradients are collected under `name`.
    pub fn param(&mut self, name: &'static str, t: &Tensor) -> Result<NodeRef> {
        self.push(
            Op::Param(name),
            Shape::Matrix(t.rows(), t.cols()),
            t.data().to_vec(),
            "param",
        )
    }

    // ── arithmetic ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.vec_len(a, "add")?, self.vec_len(b, "add")?);
        if la != lb {
            return Err(Error::DimensionMismatch { expected: la, got: lb, context: "add" });
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), self.nodes[a.0].shape, value, "add")
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.vec_len(a, "sub")?, self.vec_len(b, "sub")?);
        if la != lb {
            return Err(Error::DimensionMismatch { expected: la, got: lb, context: "sub" });
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), self.nodes[a.0].shape, value, "sub")
    }

    /// Elementwise product (scalar·scalar included).
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.vec_len(a, "mul")?, self.vec_len(b, "mul")?);
        if la != lb {
            return Err(Error::DimensionMismatch { expected: la, got: lb, context: "mul" });
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), self.nodes[a.0].shape, value, "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.vec_len(a, "div")?, self.vec_len(b, "div")?);
        if la != lb {
            return Err(Error::DimensionMismatch { expected: la, got: lb, context: "div" });
        }
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x / y)
            .collect();
        self.push(Op::Div(a, b), self.nodes[a.0].shape, value, "div")
    }

    /// Vector scaled by a scalar node.
    pub fn scale(&mut self, v: NodeRef, s: NodeRef) -> Result<NodeRef> {
        if self.nodes[s.0].shape != Shape::Scalar {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.nodes[s.0].shape.numel(),
                context: "scale",
            });
        }
        let c = self.nodes[s.0].value[0];
        let value: Vec<f64> = self.nodes[v.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(v, s), self.nodes[v.0].shape, value, "scale")
    }

    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (la, lb) = (self.vec_len(a, "dot")?, self.vec_len(b, "dot")?);
        if la != lb {
            return Err(Error::DimensionMismatch { expected: la, got: lb, context: "dot" });
        }
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), Shape::Scalar, vec![v], "dot")
    }

    /// y = W·x for a matrix node W (rows×cols) and vector x of length cols.
    pub fn matvec(&mut self, w: NodeRef, x: NodeRef) -> Result<NodeRef> {
        let (rows, cols) = match self.nodes[w.0].shape {
            Shape::Matrix(r, c) => (r, c),
            other => {
                return Err(Error::DimensionMismatch {
                    expected: 2,
                    got: other.numel(),
                    context: "matvec weight must be a matrix",
                })
            }
        };
        let xlen = self.vec_len(x, "matvec")?;
        if xlen != cols {
            return Err(Error::DimensionMismatch { expected: cols, got: xlen, context: "matvec" });
        }
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; rows];
        for (i, out) in value.iter_mut().enumerate() {
            let row = &wv[i * cols..(i + 1) * cols];
            *out = row.iter().zip(xv).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec(w, x), Shape::Vector(rows), value, "matvec")
    }

    // ── elementwise nonlinearities ──────────────────────────────────────

    pub fn sigmoid(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), self.nodes[x.0].shape, value, "sigmoid")
    }

    pub fn tanh(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), self.nodes[x.0].shape, value, "tanh")
    }

    pub fn exp(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(x), self.nodes[x.0].shape, value, "exp")
    }

    pub fn log(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(Op::Log(x), self.nodes[x.0].shape, value, "log")
    }

    pub fn sqrt(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt(x), self.nodes[x.0].shape, value, "sqrt")
    }

    /// Clamp values to [lo, hi]. The backward pass is a straight-through
    /// estimator (gradient passes unchanged even in the saturated region),
    /// so a value pushed past the bound can still be pulled back.
    pub fn clamp(&mut self, x: NodeRef, lo: f64, hi: f64) -> Result<NodeRef> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp(x), self.nodes[x.0].shape, value, "clamp")
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Max-subtraction stabilized softmax over a vector.
    pub fn softmax(&mut self, x: NodeRef) -> Result<NodeRef> {
        let n = self.vec_len(x, "softmax")?;
        if n == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0, context: "softmax" });
        }
        let xv = &self.nodes[x.0].value;
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value: Vec<f64> = exps.iter().map(|e| e / total).collect();
        self.push(Op::Softmax(x), self.nodes[x.0].shape, value, "softmax")
    }

    /// Zero-mean/unit-variance normalization over the vector axis, eps=1e-5,
    /// no learned affine terms.
    pub fn layernorm(&mut self, x: NodeRef) -> Result<NodeRef> {
        let n = self.vec_len(x, "layernorm")?;
        if n == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0, context: "layernorm" });
        }
        let xv = &self.nodes[x.0].value;
        let (value, inv_std) = layernorm_forward(xv);
        let node = self.push(Op::LayerNorm(x), self.nodes[x.0].shape, value, "layernorm")?;
        self.nodes[node.0].inv_std = inv_std;
        Ok(node)
    }

    /// Max-subtraction stabilized log-sum-exp of a vector.
    pub fn logsumexp(&mut self, x: NodeRef) -> Result<NodeRef> {
        let n = self.vec_len(x, "logsumexp")?;
        if n == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0, context: "logsumexp" });
        }
        let xv = &self.nodes[x.0].value;
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = xv.iter().map(|v| (v - m).exp()).sum();
        self.push(Op::LogSumExp(x), Shape::Scalar, vec![m + total.ln()], "logsumexp")
    }

    pub fn concat(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        let mut value = Vec::new();
        for p in parts {
            self.vec_len(*p, "concat")?;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let len = value.len();
        self.push(Op::Concat(parts.to_vec()), Shape::Vector(len), value, "concat")
    }

    pub fn sum(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.vec_len(x, "sum")?;
        let v: f64 = self.nodes[x.0].value.iter().sum();
        self.push(Op::Sum(x), Shape::Scalar, vec![v], "sum")
    }

    /// Extract one coordinate of a vector as a scalar node.
    pub fn index(&mut self, x: NodeRef, i: usize) -> Result<NodeRef> {
        let n = self.vec_len(x, "index")?;
        if i >= n {
            return Err(Error::DimensionMismatch { expected: n, got: i, context: "index" });
        }
        let v = self.nodes[x.0].value[i];
        self.push(Op::Index(x, i), Shape::Scalar, vec![v], "index")
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node; returns gradients for every
    /// registered parameter. Non-parameter leaves receive no entry.
    pub fn backward(&self, loss: NodeRef) -> Result<GradientMap> {
        if self.nodes[loss.0].shape != Shape::Scalar {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.nodes[loss.0].shape.numel(),
                context: "backward loss must be scalar",
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        let mut map = GradientMap::default();
        for idx in (0..=loss.0).rev() {
            let d = match grads[idx].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => map.accumulate(name, node.shape, &d),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &d, self.nodes[a.0].shape.numel());
                    acc(&mut grads, *b, &d, self.nodes[b.0].shape.numel());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &d, self.nodes[a.0].shape.numel());
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    acc(&mut grads, *b, &neg, self.nodes[b.0].shape.numel());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        d.iter().zip(&self.nodes[b.0].value).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> =
                        d.iter().zip(&self.nodes[a.0].value).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, &da, da.len());
                    acc(&mut grads, *b, &db, db.len());
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let yv = &node.value;
                    let da: Vec<f64> = d.iter().zip(bv).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = d
                        .iter()
                        .zip(yv.iter().zip(bv))
                        .map(|(g, (q, y))| -g * q / y)
                        .collect();
                    acc(&mut grads, *a, &da, da.len());
                    acc(&mut grads, *b, &db, db.len());
                }
                Op::Scale(v, s) => {
                    let c = self.nodes[s.0].value[0];
                    let dv: Vec<f64> = d.iter().map(|g| g * c).collect();
                    let ds: f64 =
                        d.iter().zip(&self.nodes[v.0].value).map(|(g, x)| g * x).sum();
                    acc(&mut grads, *v, &dv, dv.len());
                    acc(&mut grads, *s, &[ds], 1);
                }
                Op::Dot(a, b) => {
                    let g = d[0];
                    let da: Vec<f64> = self.nodes[b.0].value.iter().map(|y| g * y).collect();
                    let db: Vec<f64> = self.nodes[a.0].value.iter().map(|x| g * x).collect();
                    acc(&mut grads, *a, &da, da.len());
                    acc(&mut grads, *b, &db, db.len());
                }
                Op::MatVec(w, x) => {
                    let (rows, cols) = match self.nodes[w.0].shape {
                        Shape::Matrix(r, c) => (r, c),
                        _ => unreachable!(),
                    };
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    let mut dw = vec![0.0; rows * cols];
                    let mut dx = vec![0.0; cols];
                    for i in 0..rows {
                        let gi = d[i];
                        let row = &wv[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dw[i * cols + j] = gi * xv[j];
                            dx[j] += gi * row[j];
                        }
                    }
                    acc(&mut grads, *w, &dw, dw.len());
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> =
                        d.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> =
                        d.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Exp(x) => {
                    let dx: Vec<f64> = d.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Log(x) => {
                    let dx: Vec<f64> =
                        d.iter().zip(&self.nodes[x.0].value).map(|(g, v)| g / v).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Sqrt(x) => {
                    let dx: Vec<f64> =
                        d.iter().zip(&node.value).map(|(g, y)| g * 0.5 / y).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Clamp(x) => {
                    acc(&mut grads, *x, &d, self.nodes[x.0].shape.numel());
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let inner: f64 = d.iter().zip(y).map(|(g, v)| g * v).sum();
                    let dx: Vec<f64> = d.iter().zip(y).map(|(g, v)| v * (g - inner)).collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::LayerNorm(x) => {
                    let y = &node.value;
                    let n = y.len() as f64;
                    let mean_d: f64 = d.iter().sum::<f64>() / n;
                    let mean_dy: f64 = d.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / n;
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(y)
                        .map(|(g, v)| node.inv_std * (g - mean_d - v * mean_dy))
                        .collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::LogSumExp(x) => {
                    let g = d[0];
                    let out = node.value[0];
                    let dx: Vec<f64> = self.nodes[x.0]
                        .value
                        .iter()
                        .map(|v| g * (v - out).exp())
                        .collect();
                    acc(&mut grads, *x, &dx, dx.len());
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].shape.numel();
                        acc(&mut grads, *p, &d[offset..offset + len], len);
                        offset += len;
                    }
                }
                Op::Sum(x) => {
                    let g = d[0];
                    let len = self.nodes[x.0].shape.numel();
                    let dx = vec![g; len];
                    acc(&mut grads, *x, &dx, len);
                }
                Op::Index(x, i) => {
                    let len = self.nodes[x.0].shape.numel();
                    let mut dx = vec![0.0; len];
                    dx[*i] = d[0];
                    acc(&mut grads, *x, &dx, len);
                }
            }
        }
        Ok(map)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], target: NodeRef, delta: &[f64], len: usize) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(delta) {
                *e += g;
            }
        }
        slot => {
            debug_assert_eq!(delta.len(), len);
            *slot = Some(delta.to_vec());
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shared layernorm forward; returns (normalized, 1/sqrt(var + eps)).
pub(crate) fn layernorm_forward(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

// ── gradient checking ──────────────────────────────────────────────────

/// Named parameter set used by the finite-difference harness.
pub type ParamSet = BTreeMap<&'static str, Tensor>;

/// Worst observed coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: &'static str,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of [`check_gradients`]; a report is always produced.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<GradCheckEntry>,
    pub per_param: Vec<(&'static str, f64)>,
}

/// Compare analytic gradients of `eval` against central finite differences.
///
/// `eval` must return the scalar loss and its analytic gradients for the given
/// parameters (typically by building a fresh tape). For each parameter, up to
/// `max_coords` coordinates are probed (all of them when `None`), chosen by a
/// seeded stride so the sweep is deterministic. Relative error per coordinate
/// is |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
pub fn check_gradients<F>(
    params: &ParamSet,
    eval: F,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradientMap)>,
{
    assert!(eps > 0.0, "perturbation must be positive");
    let (_, analytic) = eval(params)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
        per_param: Vec::new(),
    };

    let mut work = params.clone();
    for (name, tensor) in params {
        let len = tensor.len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => {
                // Deterministic spread over the tensor, offset by the seed.
                let stride = (len / m).max(1);
                (0..m).map(|i| (seed as usize + i * stride) % len).collect()
            }
            _ => (0..len).collect(),
        };
        let zero = Tensor::zeros(tensor.rows(), tensor.cols());
        let grad = analytic.get(name).unwrap_or(&zero);
        let mut param_max = 0.0f64;
        for &c in &coords {
            let orig = work[name].data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + eps;
            let (plus, _) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - eps;
            let (minus, _) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(GradCheckEntry {
                    param: name,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
        report.per_param.push((name, param_max));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(0.0).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar_value(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(&[0.0, 0.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_matches_scalar_arithmetic() {
        // Independent evaluation of (x - mean)/sqrt(var + 1e-5) for [1,2,3,4]:
        // mean 2.5, var 1.25, giving ±1.3416, ±0.4472 to 4 decimals.
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.layernorm(x).unwrap();
        let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (got, want) in tape.value(y).iter().zip(expected) {
            assert!(close(*got, want, 5e-4), "{got} vs {want}");
        }
        // Output statistics: mean 0, variance ~1.
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn d_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![3.0]);
        let xn = tape.param("x", &x).unwrap();
        let y = tape.dot(xn, xn).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn d_sigmoid_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![0.0]);
        let xn = tape.param("x", &x).unwrap();
        let s = tape.sigmoid(xn).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(&[1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::new();
        let x = tape.input(&[-1.0]).unwrap();
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, Error::NonFiniteOp { op: "log" }));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.input(&[1.0, 2.0]).unwrap();
        let b = tape.input(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::DimensionMismatch { .. })));
    }

    /// Builds a scalar loss exercising one primitive on a random input and
    /// returns (loss, grads) for the finite-difference sweep.
    fn primitive_loss(
        which: usize,
        params: &ParamSet,
    ) -> Result<(f64, GradientMap)> {
        let mut tape = Tape::new();
        let x = tape.param("x", &params["x"])?;
        let w = tape.param("w", &params["w"])?;
        let out = match which {
            0 => {
                let y = tape.add(x, x)?;
                tape.sum(y)?
            }
            1 => {
                let s = tape.dot(x, x)?;
                let y = tape.scale(x, s)?;
                tape.sum(y)?
            }
            2 => tape.dot(x, x)?,
            3 => {
                let y = tape.matvec(w, x)?;
                let sm = tape.softmax(y)?;
                let ln = tape.layernorm(sm)?;
                tape.dot(ln, y)?
            }
            4 => {
                let y = tape.sigmoid(x)?;
                tape.sum(y)?
            }
            5 => {
                let y = tape.softmax(x)?;
                let z = tape.mul(y, x)?;
                tape.sum(z)?
            }
            6 => {
                let y = tape.layernorm(x)?;
                let z = tape.mul(y, x)?;
                tape.sum(z)?
            }
            7 => {
                let s = tape.dot(x, x)?;
                let e = tape.exp(s)?;
                let l = tape.log(e)?;
                let r = tape.sqrt(l)?;
                let t = tape.tanh(r)?;
                tape.mul(t, s)?
            }
            8 => tape.logsumexp(x)?,
            9 => {
                let c = tape.concat(&[x, x])?;
                let y = tape.softmax(c)?;
                let q = tape.index(y, 1)?;
                let s = tape.sum(y)?;
                tape.div(q, s)?
            }
            _ => {
                let y = tape.matvec(w, x)?;
                let t = tape.tanh(y)?;
                let s = tape.sum(t)?;
                let neg = tape.sub(s, s)?;
                let one = tape.constant(1.25)?;
                let a = tape.add(neg, s)?;
                let m = tape.mul(a, one)?;
                tape.clamp(m, -100.0, 100.0)?
            }
        };
        let grads = tape.backward(out)?;
        Ok((tape.scalar_value(out), grads))
    }

    #[test]
    fn primitives_match_finite_differences() {
        // 100 random inputs spread over the primitive suite, double precision,
        // relative error below 1e-4.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..100 {
            let which = trial % 11;
            let n = 5;
            let x = Tensor::vector((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect());
            let w = Tensor::from_vec(
                3,
                n,
                (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let mut params = ParamSet::new();
            params.insert("x", x);
            params.insert("w", w);
            let report = check_gradients(
                &params,
                |p| primitive_loss(which, p),
                1e-5,
                None,
                trial as u64,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "primitive {which} trial {trial}: {:?}",
                report.worst
            );
        }
    }

    #[test]
    fn check_gradients_is_exact_for_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let w = Tensor::from_vec(2, d, (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = ParamSet::new();
        params.insert("w", w);
        let report = check_gradients(
            &params,
            |p| {
                let mut tape = Tape::new();
                let wn = tape.param("w", &p["w"])?;
                let xn = tape.input(&x)?;
                let y = tape.matvec(wn, xn)?;
                let loss = tape.sum(y)?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar_value(loss), grads))
            },
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report.worst);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]));
        let (_, grads) = {
            let mut tape = Tape::new();
            let w = tape.param("w", &params["w"]).unwrap();
            let z = tape.sub(w, w).unwrap();
            let loss = tape.sum(z).unwrap();
            (tape.scalar_value(loss), tape.backward(loss).unwrap())
        };
        assert!(grads.get("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // Gradient of (loss1 + loss2) equals the sum of individual maps.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let build = |combine: u8, x: &Tensor| -> GradientMap {
            let mut tape = Tape::new();
            let xn = tape.param("x", x).unwrap();
            let l1 = {
                let s = tape.sigmoid(xn).unwrap();
                tape.sum(s).unwrap()
            };
            let l2 = tape.dot(xn, xn).unwrap();
            match combine {
                0 => tape.backward(l1).unwrap(),
                1 => tape.backward(l2).unwrap(),
                _ => {
                    let total = tape.add(l1, l2).unwrap();
                    tape.backward(total).unwrap()
                }
            }
        };
        let g1 = build(0, &x);
        let g2 = build(1, &x);
        let gsum = build(2, &x);
        for i in 0..4 {
            let lhs = gsum.get("x").unwrap().data()[i];
            let rhs = g1.get("x").unwrap().data()[i] + g2.get("x").unwrap().data()[i];
            assert!(close(lhs, rhs, 1e-12));
        }
    }

    #[test]
    fn forward_backward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param("x", &Tensor::vector(vec![0.3, -1.2, 0.7])).unwrap();
            let w = tape
                .param("w", &Tensor::from_vec(2, 3, vec![0.1, 0.2, -0.3, 0.5, -0.1, 0.9]))
                .unwrap();
            let y = tape.matvec(w, x).unwrap();
            let sm = tape.softmax(y).unwrap();
            let ln = tape.layernorm(sm).unwrap();
            let lse = tape.logsumexp(ln).unwrap();
            let grads = tape.backward(lse).unwrap();
            (
                tape.scalar_value(lse).to_bits(),
                grads.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_accumulates_across_shared_params() {
        // The same param node feeding two consumers sums contributions.
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::vector(vec![1.0])).unwrap();
        let two = tape.constant(2.0).unwrap();
        let three = tape.constant(3.0).unwrap();
        let a = tape.mul(x, two).unwrap();
        let b = tape.mul(x, three).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[5.0]);
    }
}
