//! Differentiable computation graph.
//!
//! Nodes are appended to an arena and evaluated eagerly, so a node's value is
//! always available. Reverse-mode ([`Graph::vjp`]) and forward-mode
//! ([`Graph::jvp`]) sweeps build their adjoints/tangents out of the same
//! primitive set — no opaque closures — which is what makes repeated
//! differentiation work: the gradient of a graph that already contains
//! vjp/jvp-produced nodes is just another sweep. Supported differentiation
//! order is two; that is all the spectral gradients and the spectral-norm
//! regularizer require.
//!
//! There is no broadcasting. Every primitive takes explicitly shaped operands;
//! shape errors surface at construction time.
//!
//! Vectors of length one act as scalars. For operator-block evaluation the
//! sweeps also accept "batched" seeds: an `n×p` matrix standing for `p`
//! independent length-`n` tangents (or cotangents) pushed through the graph at
//! once. Column `j` of a batched sweep computes bit-identically to the
//! corresponding single-vector sweep; only ops that appear in model bodies
//! (affine layers, activations, elementwise arithmetic) support batching.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::linalg::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("expected a scalar (length-1 vector), found {0:?}")]
    NotScalar(Shape),
    #[error("cotangent shape {cotangent:?} incompatible with output shape {output:?}")]
    CotangentShape { output: Shape, cotangent: Shape },
    #[error("tangent shape {tangent:?} incompatible with input shape {input:?}")]
    TangentShape { input: Shape, tangent: Shape },
    #[error("{0} does not support batched differentiation")]
    UnsupportedBatched(&'static str),
    #[error("parameter {0:?} already bound with a different value")]
    ParamRebound(String),
    #[error("parameter store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

/// A node's value: a vector or a row-major matrix. Length-1 vectors double as
/// scalars.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Vector(Vector),
    Matrix(Matrix),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Vector(v) => Shape::Vector(v.len()),
            Value::Matrix(m) => Shape::Matrix(m.rows(), m.cols()),
        }
    }

    pub fn as_vector(&self) -> Option<&Vector> {
        match self {
            Value::Vector(v) => Some(v),
            Value::Matrix(_) => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Value::Matrix(m) => Some(m),
            Value::Vector(_) => None,
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            Value::Vector(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    pub fn flat(&self) -> &[f64] {
        match self {
            Value::Vector(v) => v.as_slice(),
            Value::Matrix(m) => m.as_slice(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.flat().len()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleC(f64, NodeId),
    ScaleN(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    LeakyReluMask(NodeId),
    Inner(NodeId, NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Outer(NodeId, NodeId),
    RowScale(NodeId, NodeId),
    RowSum(NodeId),
    ColDot(NodeId, NodeId),
    ColScale(NodeId, NodeId),
    StackCols(Vec<NodeId>),
    Col(NodeId, usize),
    Pack(Vec<NodeId>),
    Component(NodeId, usize),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::ScaleN(a, b)
            | Op::Inner(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::MatMulNT(a, b)
            | Op::Outer(a, b)
            | Op::RowScale(a, b)
            | Op::ColDot(a, b)
            | Op::ColScale(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ScaleC(_, a)
            | Op::LeakyRelu(a, _)
            | Op::LeakyReluMask(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Col(a, _)
            | Op::Component(a, _) => f(*a),
            Op::StackCols(parts) | Op::Pack(parts) => {
                for p in parts {
                    f(*p);
                }
            }
        }
    }
}

struct Node {
    op: Op,
    value: Value,
}

static GRAPH_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Arena-based computation graph. Node indices are insertion-ordered, so the
/// arena order is already topological.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// Identity of this graph instance; lets operators cache graph-resident
    /// state (e.g. a constant matrix node) keyed on the graph they built it in.
    pub fn graph_id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.idx()].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.value(id).shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.value(id).scalar().expect("node is not a scalar")
    }

    pub fn vector_value(&self, id: NodeId) -> &Vector {
        self.value(id).as_vector().expect("node is not a vector")
    }

    pub fn matrix_value(&self, id: NodeId) -> &Matrix {
        self.value(id).as_matrix().expect("node is not a matrix")
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        id
    }

    // ----- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Value) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_vec(&mut self, v: Vector) -> NodeId {
        self.constant(Value::Vector(v))
    }

    pub fn constant_mat(&mut self, m: Matrix) -> NodeId {
        self.constant(Value::Matrix(m))
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant_vec(Vector::from_raw(vec![x]))
    }

    pub fn zeros(&mut self, shape: Shape) -> NodeId {
        match shape {
            Shape::Vector(n) => self.constant_vec(Vector::zeros(n)),
            Shape::Matrix(r, c) => self.constant_mat(Matrix::zeros(r, c)),
        }
    }

    pub fn ones_vec(&mut self, n: usize) -> NodeId {
        self.constant_vec(Vector::from_fn(n, |_| 1.0))
    }

    pub fn ones_mat(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant_mat(Matrix::from_fn(rows, cols, |_, _| 1.0))
    }

    /// Named parameter leaf. Binding the same name twice returns the original
    /// node if the value matches, and errors otherwise.
    pub fn param(&mut self, name: &str, value: Value) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.params.get(name) {
            if self.value(id) == &value {
                return Ok(id);
            }
            return Err(GraphError::ParamRebound(name.to_string()));
        }
        let id = self.push(Op::Param(name.to_string()), value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Name of a parameter leaf, if `id` is one.
    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.idx()].op {
            Op::Param(name) => Some(name),
            _ => None,
        }
    }

    // ----- elementwise --------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Vector(x), Value::Vector(y)) if x.len() == y.len() => {
                Value::Vector(x.axpy(1.0, y))
            }
            (Value::Matrix(x), Value::Matrix(y))
                if x.rows() == y.rows() && x.cols() == y.cols() =>
            {
                let data = x
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(p, q)| p + q)
                    .collect();
                Value::Matrix(Matrix::from_raw(x.rows(), x.cols(), data))
            }
            (x, y) => {
                return Err(shape_err(
                    "add",
                    format!("{:?} + {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Vector plus bias vector; shape-identical to `add`, named for clarity at
    /// call sites building affine layers.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.add(x, b)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale_c(-1.0, x)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Vector(x), Value::Vector(y)) if x.len() == y.len() => {
                Value::Vector(Vector::from_raw(
                    x.as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(p, q)| p * q)
                        .collect(),
                ))
            }
            (Value::Matrix(x), Value::Matrix(y))
                if x.rows() == y.rows() && x.cols() == y.cols() =>
            {
                let data = x
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(p, q)| p * q)
                    .collect();
                Value::Matrix(Matrix::from_raw(x.rows(), x.cols(), data))
            }
            (x, y) => {
                return Err(shape_err(
                    "mul",
                    format!("{:?} * {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale_c(&mut self, c: f64, x: NodeId) -> NodeId {
        let value = match self.value(x) {
            Value::Vector(v) => Value::Vector(v.scaled(c)),
            Value::Matrix(m) => Value::Matrix(Matrix::from_raw(
                m.rows(),
                m.cols(),
                m.as_slice().iter().map(|p| p * c).collect(),
            )),
        };
        self.push(Op::ScaleC(c, x), value)
    }

    /// Scale a vector or matrix by a scalar node.
    pub fn scale_n(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        let sv = self
            .value(s)
            .scalar()
            .ok_or_else(|| shape_err("scale_n", format!("scale operand {:?}", self.shape(s))))?;
        let value = match self.value(x) {
            Value::Vector(v) => Value::Vector(v.scaled(sv)),
            Value::Matrix(m) => Value::Matrix(Matrix::from_raw(
                m.rows(),
                m.cols(),
                m.as_slice().iter().map(|p| p * sv).collect(),
            )),
        };
        Ok(self.push(Op::ScaleN(s, x), value))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId, GraphError> {
        let v = self
            .value(x)
            .as_vector()
            .ok_or_else(|| shape_err("leaky_relu", format!("{:?}", self.shape(x))))?;
        let out = Vector::from_raw(
            v.as_slice()
                .iter()
                .map(|&p| if p >= 0.0 { p } else { slope * p })
                .collect(),
        );
        Ok(self.push(Op::LeakyRelu(x, slope), Value::Vector(out)))
    }

    /// Derivative of `leaky_relu` as a node: 1 where x ≥ 0 (the positive-side
    /// convention at exactly 0), `slope` elsewhere. Piecewise constant, so
    /// further differentiation contributes nothing.
    fn leaky_relu_mask(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).as_vector().expect("mask on vector");
        let out = Vector::from_raw(
            v.as_slice()
                .iter()
                .map(|&p| if p >= 0.0 { 1.0 } else { slope })
                .collect(),
        );
        self.push(Op::LeakyReluMask(x), Value::Vector(out))
    }

    fn unary_vec(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let v = self
            .value(x)
            .as_vector()
            .ok_or_else(|| shape_err(op_name, format!("{:?}", self.shape(x))))?;
        let out = Vector::from_raw(v.as_slice().iter().map(|&p| f(p)).collect());
        Ok(self.push(op(x), Value::Vector(out)))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("log", x, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("exp", x, f64::exp, Op::Exp)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("sqrt", x, f64::sqrt, Op::Sqrt)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("recip", x, f64::recip, Op::Recip)
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("sin", x, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary_vec("cos", x, f64::cos, Op::Cos)
    }

    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Vector(x), Value::Vector(y)) if x.len() == y.len() => x.dot(y),
            (x, y) => {
                return Err(shape_err(
                    "inner",
                    format!("{:?} . {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(
            Op::Inner(a, b),
            Value::Vector(Vector::from_raw(vec![value])),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).flat().iter().sum();
        self.push(Op::Sum(x), Value::Vector(Vector::from_raw(vec![total])))
    }

    // ----- linear algebra -----------------------------------------------

    /// `a * b` where `a` is a matrix and `b` a vector or matrix.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Matrix(m), Value::Vector(v)) if m.cols() == v.len() => {
                Value::Vector(crate::linalg::matvec(m, v).expect("checked dims"))
            }
            (Value::Matrix(m), Value::Matrix(x)) if m.cols() == x.rows() => {
                // Column j of the result accumulates in ascending k, exactly
                // like the vector case, so batched sweeps match serial ones
                // bit for bit.
                let out = Matrix::from_fn(m.rows(), x.cols(), |i, j| {
                    let mut acc = 0.0;
                    for k in 0..m.cols() {
                        acc += m.get(i, k) * x.get(k, j);
                    }
                    acc
                });
                Value::Matrix(out)
            }
            (x, y) => {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `aᵀ * b`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Matrix(m), Value::Vector(v)) if m.rows() == v.len() => {
                let out = Vector::from_fn(m.cols(), |i| {
                    let mut acc = 0.0;
                    for k in 0..m.rows() {
                        acc += m.get(k, i) * v[k];
                    }
                    acc
                });
                Value::Vector(out)
            }
            (Value::Matrix(m), Value::Matrix(x)) if m.rows() == x.rows() => {
                let out = Matrix::from_fn(m.cols(), x.cols(), |i, j| {
                    let mut acc = 0.0;
                    for k in 0..m.rows() {
                        acc += m.get(k, i) * x.get(k, j);
                    }
                    acc
                });
                Value::Matrix(out)
            }
            (x, y) => {
                return Err(shape_err(
                    "matmul_t",
                    format!("{:?}ᵀ x {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::MatMulT(a, b), value))
    }

    /// `a * bᵀ` for matrices.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Matrix(m), Value::Matrix(x)) if m.cols() == x.cols() => {
                let out = Matrix::from_fn(m.rows(), x.rows(), |i, j| {
                    let mut acc = 0.0;
                    for k in 0..m.cols() {
                        acc += m.get(i, k) * x.get(j, k);
                    }
                    acc
                });
                Value::Matrix(out)
            }
            (x, y) => {
                return Err(shape_err(
                    "matmul_nt",
                    format!("{:?} x {:?}ᵀ", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::MatMulNT(a, b), value))
    }

    /// Outer product of two vectors: `u vᵀ`.
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(u), self.value(v)) {
            (Value::Vector(x), Value::Vector(y)) => {
                Value::Matrix(Matrix::from_fn(x.len(), y.len(), |i, j| x[i] * y[j]))
            }
            (x, y) => {
                return Err(shape_err(
                    "outer",
                    format!("{:?} (x) {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::Outer(u, v), value))
    }

    /// `diag(v) * x`: scales row `i` of the matrix by `v[i]`.
    pub fn row_scale(&mut self, v: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(v), self.value(x)) {
            (Value::Vector(s), Value::Matrix(m)) if s.len() == m.rows() => {
                Value::Matrix(Matrix::from_fn(m.rows(), m.cols(), |i, j| s[i] * m.get(i, j)))
            }
            (x_, y) => {
                return Err(shape_err(
                    "row_scale",
                    format!("{:?} rows of {:?}", x_.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::RowScale(v, x), value))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = match self.value(x) {
            Value::Matrix(m) => Value::Vector(Vector::from_fn(m.rows(), |i| m.row(i).iter().sum())),
            v => return Err(shape_err("row_sum", format!("{:?}", v.shape()))),
        };
        Ok(self.push(Op::RowSum(x), value))
    }

    /// Column-wise dot products of two equally shaped matrices; entry `j` is
    /// `Σ_i a[i,j] b[i,j]` accumulated in ascending `i`.
    pub fn col_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(a), self.value(b)) {
            (Value::Matrix(x), Value::Matrix(y))
                if x.rows() == y.rows() && x.cols() == y.cols() =>
            {
                Value::Vector(Vector::from_fn(x.cols(), |j| {
                    let mut acc = 0.0;
                    for i in 0..x.rows() {
                        acc += x.get(i, j) * y.get(i, j);
                    }
                    acc
                }))
            }
            (x, y) => {
                return Err(shape_err(
                    "col_dot",
                    format!("{:?} . {:?}", x.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::ColDot(a, b), value))
    }

    /// Scales column `j` of the matrix by `c[j]`.
    pub fn col_scale(&mut self, c: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        let value = match (self.value(c), self.value(x)) {
            (Value::Vector(s), Value::Matrix(m)) if s.len() == m.cols() => {
                Value::Matrix(Matrix::from_fn(m.rows(), m.cols(), |i, j| s[j] * m.get(i, j)))
            }
            (x_, y) => {
                return Err(shape_err(
                    "col_scale",
                    format!("{:?} cols of {:?}", x_.shape(), y.shape()),
                ))
            }
        };
        Ok(self.push(Op::ColScale(c, x), value))
    }

    /// Stacks equally sized vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("stack_cols", "no columns".into()));
        }
        let n = match self.value(parts[0]) {
            Value::Vector(v) => v.len(),
            v => return Err(shape_err("stack_cols", format!("{:?}", v.shape()))),
        };
        let mut out = Matrix::zeros(n, parts.len());
        for (j, &p) in parts.iter().enumerate() {
            match self.value(p) {
                Value::Vector(v) if v.len() == n => {
                    for i in 0..n {
                        out.set(i, j, v[i]);
                    }
                }
                v => {
                    return Err(shape_err(
                        "stack_cols",
                        format!("column {j} is {:?}, want Vector({n})", v.shape()),
                    ))
                }
            }
        }
        Ok(self.push(Op::StackCols(parts.to_vec()), Value::Matrix(out)))
    }

    /// Extracts column `j` of a matrix as a vector.
    pub fn col(&mut self, x: NodeId, j: usize) -> Result<NodeId, GraphError> {
        let value = match self.value(x) {
            Value::Matrix(m) if j < m.cols() => Value::Vector(m.column(j)),
            v => return Err(shape_err("col", format!("column {j} of {:?}", v.shape()))),
        };
        Ok(self.push(Op::Col(x, j), value))
    }

    /// Packs scalars into a vector.
    pub fn pack(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("pack", "no components".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            data.push(
                self.value(p)
                    .scalar()
                    .ok_or_else(|| shape_err("pack", format!("{:?}", self.shape(p))))?,
            );
        }
        Ok(self.push(
            Op::Pack(parts.to_vec()),
            Value::Vector(Vector::from_raw(data)),
        ))
    }

    /// Extracts component `i` of a vector as a scalar.
    pub fn component(&mut self, x: NodeId, i: usize) -> Result<NodeId, GraphError> {
        let value = match self.value(x) {
            Value::Vector(v) if i < v.len() => Vector::from_raw(vec![v[i]]),
            v => {
                return Err(shape_err(
                    "component",
                    format!("component {i} of {:?}", v.shape()),
                ))
            }
        };
        Ok(self.push(Op::Component(x, i), Value::Vector(value)))
    }

    // ----- differentiation ----------------------------------------------

    fn ancestors_of(&self, output: NodeId) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        mask[output.idx()] = true;
        for idx in (0..=output.idx()).rev() {
            if !mask[idx] {
                continue;
            }
            self.nodes[idx].op.for_each_parent(|p| mask[p.idx()] = true);
        }
        mask
    }

    fn descendants_of(&self, roots: &[NodeId], upto: usize) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        if roots.is_empty() {
            return mask;
        }
        for r in roots {
            mask[r.idx()] = true;
        }
        let lo = roots.iter().map(|r| r.idx()).min().unwrap();
        for idx in lo..=upto.min(self.nodes.len() - 1) {
            if mask[idx] {
                continue;
            }
            let mut hit = false;
            self.nodes[idx].op.for_each_parent(|p| hit |= mask[p.idx()]);
            mask[idx] = hit;
        }
        mask
    }

    fn accumulate(
        &mut self,
        slot: &mut Option<NodeId>,
        contribution: NodeId,
    ) -> Result<(), GraphError> {
        *slot = Some(match slot.take() {
            None => contribution,
            Some(existing) => self.add(existing, contribution)?,
        });
        Ok(())
    }

    /// Width of a (possibly batched) seed for a node of shape `base`;
    /// 1 means unbatched.
    fn seed_width(base: Shape, seed: Shape) -> Option<usize> {
        match (base, seed) {
            (a, b) if a == b => Some(1),
            (Shape::Vector(n), Shape::Matrix(r, p)) if r == n => Some(p),
            _ => None,
        }
    }

    /// Product of a cotangent with the local derivative of an elementwise map
    /// whose derivative values are in `deriv` (a vector node shaped like the
    /// primal). Handles both plain and batched cotangents.
    fn elementwise_pullback(
        &mut self,
        deriv: NodeId,
        cot: NodeId,
        batched: bool,
    ) -> Result<NodeId, GraphError> {
        if batched {
            self.row_scale(deriv, cot)
        } else {
            self.mul(cot, deriv)
        }
    }

    /// Reverse sweep: builds graph nodes computing the adjoints of `targets`
    /// with respect to `output`, seeded with `cotangent`.
    ///
    /// The cotangent must have the output's shape, or — for a vector-valued
    /// output — be an `n×p` matrix of `p` independent cotangents, in which
    /// case the returned adjoints are equally batched. Propagation is
    /// restricted to paths between the targets and the output. Targets the
    /// output does not depend on yield `None` (a structural zero).
    pub fn vjp(
        &mut self,
        output: NodeId,
        cotangent: NodeId,
        targets: &[NodeId],
    ) -> Result<Vec<Option<NodeId>>, GraphError> {
        let out_shape = self.shape(output);
        let cot_shape = self.shape(cotangent);
        let width =
            Self::seed_width(out_shape, cot_shape).ok_or(GraphError::CotangentShape {
                output: out_shape,
                cotangent: cot_shape,
            })?;
        let batched = width > 1;

        let anc = self.ancestors_of(output);
        let desc = self.descendants_of(targets, output.idx());
        let on_path: Vec<bool> = anc.iter().zip(&desc).map(|(a, d)| *a && *d).collect();

        let mut adjoint: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        if on_path[output.idx()] {
            adjoint[output.idx()] = Some(cotangent);
        }

        for idx in (0..=output.idx()).rev() {
            if !on_path[idx] {
                continue;
            }
            let Some(cot) = adjoint[idx] else { continue };
            let this = NodeId(idx as u32);
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant | Op::Param(_) | Op::LeakyReluMask(_) => {}
                Op::Add(a, b) => {
                    if on_path[a.idx()] {
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, cot)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, cot)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::Mul(a, b) => {
                    if on_path[a.idx()] {
                        let contrib = if batched {
                            self.row_scale(b, cot)?
                        } else {
                            self.mul(cot, b)?
                        };
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let contrib = if batched {
                            self.row_scale(a, cot)?
                        } else {
                            self.mul(cot, a)?
                        };
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::ScaleC(c, x) => {
                    if on_path[x.idx()] {
                        let contrib = self.scale_c(c, cot);
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::ScaleN(s, x) => {
                    if on_path[x.idx()] {
                        let contrib = self.scale_n(s, cot)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                    if on_path[s.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("scale_n factor"));
                        }
                        let contrib = match self.shape(x) {
                            Shape::Vector(_) => self.inner(cot, x)?,
                            Shape::Matrix(_, _) => {
                                let prod = self.mul(cot, x)?;
                                self.sum(prod)
                            }
                        };
                        let mut slot = adjoint[s.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[s.idx()] = slot;
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if on_path[x.idx()] {
                        let mask = self.leaky_relu_mask(x, slope);
                        let contrib = self.elementwise_pullback(mask, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Inner(u, v) => {
                    if batched {
                        return Err(GraphError::UnsupportedBatched("inner"));
                    }
                    if on_path[u.idx()] {
                        let contrib = self.scale_n(cot, v)?;
                        let mut slot = adjoint[u.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[u.idx()] = slot;
                    }
                    if on_path[v.idx()] {
                        let contrib = self.scale_n(cot, u)?;
                        let mut slot = adjoint[v.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[v.idx()] = slot;
                    }
                }
                Op::Log(x) => {
                    if on_path[x.idx()] {
                        let deriv = self.recip(x)?;
                        let contrib = self.elementwise_pullback(deriv, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Exp(x) => {
                    if on_path[x.idx()] {
                        let contrib = self.elementwise_pullback(this, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Sqrt(x) => {
                    if on_path[x.idx()] {
                        let r = self.recip(this)?;
                        let deriv = self.scale_c(0.5, r);
                        let contrib = self.elementwise_pullback(deriv, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Recip(x) => {
                    if on_path[x.idx()] {
                        let sq = self.mul(this, this)?;
                        let deriv = self.neg(sq);
                        let contrib = self.elementwise_pullback(deriv, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Sin(x) => {
                    if on_path[x.idx()] {
                        let deriv = self.cos(x)?;
                        let contrib = self.elementwise_pullback(deriv, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Cos(x) => {
                    if on_path[x.idx()] {
                        let s = self.sin(x)?;
                        let deriv = self.neg(s);
                        let contrib = self.elementwise_pullback(deriv, cot, batched)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Sum(x) => {
                    if on_path[x.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("sum"));
                        }
                        let ones = match self.shape(x) {
                            Shape::Vector(n) => self.ones_vec(n),
                            Shape::Matrix(r, c) => self.ones_mat(r, c),
                        };
                        let contrib = self.scale_n(cot, ones)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::MatMul(a, b) => {
                    if on_path[a.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("matmul lhs"));
                        }
                        let contrib = match self.shape(b) {
                            Shape::Vector(_) => self.outer(cot, b)?,
                            Shape::Matrix(_, _) => self.matmul_nt(cot, b)?,
                        };
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let contrib = self.matmul_t(a, cot)?;
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::MatMulT(a, b) => {
                    if on_path[a.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("matmul_t lhs"));
                        }
                        let contrib = match self.shape(b) {
                            Shape::Vector(_) => self.outer(b, cot)?,
                            Shape::Matrix(_, _) => self.matmul_nt(b, cot)?,
                        };
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let contrib = self.matmul(a, cot)?;
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::MatMulNT(a, b) => {
                    if on_path[a.idx()] {
                        let contrib = self.matmul(cot, b)?;
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let contrib = self.matmul_t(cot, a)?;
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::Outer(u, v) => {
                    if on_path[u.idx()] {
                        let contrib = self.matmul(cot, v)?;
                        let mut slot = adjoint[u.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[u.idx()] = slot;
                    }
                    if on_path[v.idx()] {
                        let contrib = self.matmul_t(cot, u)?;
                        let mut slot = adjoint[v.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[v.idx()] = slot;
                    }
                }
                Op::RowScale(v, x) => {
                    if on_path[v.idx()] {
                        let prod = self.mul(cot, x)?;
                        let contrib = self.row_sum(prod)?;
                        let mut slot = adjoint[v.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[v.idx()] = slot;
                    }
                    if on_path[x.idx()] {
                        let contrib = self.row_scale(v, cot)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::RowSum(x) => {
                    if on_path[x.idx()] {
                        let cols = match self.shape(x) {
                            Shape::Matrix(_, c) => c,
                            _ => unreachable!("row_sum of non-matrix"),
                        };
                        let ones = self.ones_vec(cols);
                        let contrib = self.outer(cot, ones)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::ColDot(a, b) => {
                    if on_path[a.idx()] {
                        let contrib = self.col_scale(cot, b)?;
                        let mut slot = adjoint[a.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[a.idx()] = slot;
                    }
                    if on_path[b.idx()] {
                        let contrib = self.col_scale(cot, a)?;
                        let mut slot = adjoint[b.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[b.idx()] = slot;
                    }
                }
                Op::ColScale(c, x) => {
                    if on_path[c.idx()] {
                        let contrib = self.col_dot(cot, x)?;
                        let mut slot = adjoint[c.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[c.idx()] = slot;
                    }
                    if on_path[x.idx()] {
                        let contrib = self.col_scale(c, cot)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::StackCols(parts) => {
                    for (j, p) in parts.iter().enumerate() {
                        if on_path[p.idx()] {
                            let contrib = self.col(cot, j)?;
                            let mut slot = adjoint[p.idx()];
                            self.accumulate(&mut slot, contrib)?;
                            adjoint[p.idx()] = slot;
                        }
                    }
                }
                Op::Col(x, j) => {
                    if on_path[x.idx()] {
                        let (rows, cols) = match self.shape(x) {
                            Shape::Matrix(r, c) => (r, c),
                            _ => unreachable!("col of non-matrix"),
                        };
                        let zero = self.constant_vec(Vector::zeros(rows));
                        let parts: Vec<NodeId> =
                            (0..cols).map(|k| if k == j { cot } else { zero }).collect();
                        let contrib = self.stack_cols(&parts)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
                Op::Pack(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        if on_path[p.idx()] {
                            let contrib = self.component(cot, i)?;
                            let mut slot = adjoint[p.idx()];
                            self.accumulate(&mut slot, contrib)?;
                            adjoint[p.idx()] = slot;
                        }
                    }
                }
                Op::Component(x, i) => {
                    if on_path[x.idx()] {
                        let n = match self.shape(x) {
                            Shape::Vector(n) => n,
                            _ => unreachable!("component of non-vector"),
                        };
                        let zero = self.scalar(0.0);
                        let parts: Vec<NodeId> =
                            (0..n).map(|k| if k == i { cot } else { zero }).collect();
                        let contrib = self.pack(&parts)?;
                        let mut slot = adjoint[x.idx()];
                        self.accumulate(&mut slot, contrib)?;
                        adjoint[x.idx()] = slot;
                    }
                }
            }
        }

        Ok(targets.iter().map(|t| adjoint[t.idx()]).collect())
    }

    /// Forward sweep: builds a graph node computing the directional derivative
    /// of `output` along `tangent` at `input`.
    ///
    /// The tangent must have the input's shape, or — for a vector-valued
    /// input — be an `n×p` matrix of `p` independent tangents, in which case
    /// the result is the `out_len×p` block of directional derivatives. If the
    /// output does not depend on the input, the result is a zero constant of
    /// the appropriate shape.
    pub fn jvp(
        &mut self,
        input: NodeId,
        tangent: NodeId,
        output: NodeId,
    ) -> Result<NodeId, GraphError> {
        let in_shape = self.shape(input);
        let tan_shape = self.shape(tangent);
        let width = Self::seed_width(in_shape, tan_shape).ok_or(GraphError::TangentShape {
            input: in_shape,
            tangent: tan_shape,
        })?;
        let batched = width > 1;

        let zero_result = |g: &mut Graph| -> NodeId {
            match (g.shape(output), batched) {
                (Shape::Vector(n), true) => g.zeros(Shape::Matrix(n, width)),
                (shape, _) => g.zeros(shape),
            }
        };

        if input.idx() > output.idx() {
            return Ok(zero_result(self));
        }
        let anc = self.ancestors_of(output);
        let desc = self.descendants_of(&[input], output.idx());
        let on_path: Vec<bool> = anc.iter().zip(&desc).map(|(a, d)| *a && *d).collect();
        if !on_path[input.idx()] || !on_path[output.idx()] {
            return Ok(zero_result(self));
        }

        let mut tangents: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        tangents[input.idx()] = Some(tangent);

        let batched_tangent_ok = |shape: Shape| matches!(shape, Shape::Vector(_));

        for idx in (input.idx() + 1)..=output.idx() {
            if !on_path[idx] {
                continue;
            }
            let this = NodeId(idx as u32);
            if batched && !batched_tangent_ok(self.shape(this)) {
                return Err(GraphError::UnsupportedBatched("matrix-valued node tangent"));
            }
            let op = self.nodes[idx].op.clone();
            let mut result: Option<NodeId> = None;
            macro_rules! acc {
                ($g:expr, $contrib:expr) => {{
                    let c = $contrib;
                    result = Some(match result {
                        None => c,
                        Some(r) => $g.add(r, c)?,
                    });
                }};
            }
            match op {
                Op::Constant | Op::Param(_) | Op::LeakyReluMask(_) => {}
                Op::Add(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        acc!(self, ta);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        acc!(self, tb);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        let c = if batched {
                            self.row_scale(b, ta)?
                        } else {
                            self.mul(ta, b)?
                        };
                        acc!(self, c);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        let c = if batched {
                            self.row_scale(a, tb)?
                        } else {
                            self.mul(a, tb)?
                        };
                        acc!(self, c);
                    }
                }
                Op::ScaleC(cc, x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.scale_c(cc, tx);
                        acc!(self, c);
                    }
                }
                Op::ScaleN(s, x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.scale_n(s, tx)?;
                        acc!(self, c);
                    }
                    if let Some(ts) = tangents[s.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("scale_n factor"));
                        }
                        let c = self.scale_n(ts, x)?;
                        acc!(self, c);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let mask = self.leaky_relu_mask(x, slope);
                        let c = if batched {
                            self.row_scale(mask, tx)?
                        } else {
                            self.mul(mask, tx)?
                        };
                        acc!(self, c);
                    }
                }
                Op::Inner(u, v) => {
                    if batched {
                        return Err(GraphError::UnsupportedBatched("inner"));
                    }
                    if let Some(tu) = tangents[u.idx()] {
                        let c = self.inner(tu, v)?;
                        acc!(self, c);
                    }
                    if let Some(tv) = tangents[v.idx()] {
                        let c = self.inner(u, tv)?;
                        acc!(self, c);
                    }
                }
                Op::Log(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let deriv = self.recip(x)?;
                        let c = self.elementwise_pullback(deriv, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Exp(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.elementwise_pullback(this, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Sqrt(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let r = self.recip(this)?;
                        let deriv = self.scale_c(0.5, r);
                        let c = self.elementwise_pullback(deriv, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Recip(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let sq = self.mul(this, this)?;
                        let deriv = self.neg(sq);
                        let c = self.elementwise_pullback(deriv, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Sin(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let deriv = self.cos(x)?;
                        let c = self.elementwise_pullback(deriv, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Cos(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let s = self.sin(x)?;
                        let deriv = self.neg(s);
                        let c = self.elementwise_pullback(deriv, tx, batched)?;
                        acc!(self, c);
                    }
                }
                Op::Sum(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        if batched {
                            return Err(GraphError::UnsupportedBatched("sum"));
                        }
                        let c = self.sum(tx);
                        acc!(self, c);
                    }
                }
                Op::MatMul(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        let c = self.matmul(ta, b)?;
                        acc!(self, c);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        let c = self.matmul(a, tb)?;
                        acc!(self, c);
                    }
                }
                Op::MatMulT(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        let c = self.matmul_t(ta, b)?;
                        acc!(self, c);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        let c = self.matmul_t(a, tb)?;
                        acc!(self, c);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        let c = self.matmul_nt(ta, b)?;
                        acc!(self, c);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        let c = self.matmul_nt(a, tb)?;
                        acc!(self, c);
                    }
                }
                Op::Outer(u, v) => {
                    if let Some(tu) = tangents[u.idx()] {
                        let c = self.outer(tu, v)?;
                        acc!(self, c);
                    }
                    if let Some(tv) = tangents[v.idx()] {
                        let c = self.outer(u, tv)?;
                        acc!(self, c);
                    }
                }
                Op::RowScale(v, x) => {
                    if let Some(tv) = tangents[v.idx()] {
                        let c = self.row_scale(tv, x)?;
                        acc!(self, c);
                    }
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.row_scale(v, tx)?;
                        acc!(self, c);
                    }
                }
                Op::RowSum(x) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.row_sum(tx)?;
                        acc!(self, c);
                    }
                }
                Op::ColDot(a, b) => {
                    if let Some(ta) = tangents[a.idx()] {
                        let c = self.col_dot(ta, b)?;
                        acc!(self, c);
                    }
                    if let Some(tb) = tangents[b.idx()] {
                        let c = self.col_dot(a, tb)?;
                        acc!(self, c);
                    }
                }
                Op::ColScale(cn, x) => {
                    if let Some(tc) = tangents[cn.idx()] {
                        let c = self.col_scale(tc, x)?;
                        acc!(self, c);
                    }
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.col_scale(cn, tx)?;
                        acc!(self, c);
                    }
                }
                Op::StackCols(parts) => {
                    let mut tangent_parts = Vec::with_capacity(parts.len());
                    let mut any = false;
                    for p in &parts {
                        match tangents[p.idx()] {
                            Some(tp) => {
                                any = true;
                                tangent_parts.push(tp);
                            }
                            None => {
                                let shape = self.shape(*p);
                                tangent_parts.push(self.zeros(shape));
                            }
                        }
                    }
                    if any {
                        let c = self.stack_cols(&tangent_parts)?;
                        acc!(self, c);
                    }
                }
                Op::Col(x, j) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.col(tx, j)?;
                        acc!(self, c);
                    }
                }
                Op::Pack(parts) => {
                    let mut tangent_parts = Vec::with_capacity(parts.len());
                    let mut any = false;
                    for p in &parts {
                        match tangents[p.idx()] {
                            Some(tp) => {
                                any = true;
                                tangent_parts.push(tp);
                            }
                            None => tangent_parts.push(self.scalar(0.0)),
                        }
                    }
                    if any {
                        let c = self.pack(&tangent_parts)?;
                        acc!(self, c);
                    }
                }
                Op::Component(x, i) => {
                    if let Some(tx) = tangents[x.idx()] {
                        let c = self.component(tx, i)?;
                        acc!(self, c);
                    }
                }
            }
            tangents[idx] = result;
        }

        Ok(match tangents[output.idx()] {
            Some(t) => t,
            None => zero_result(self),
        })
    }

    /// Gradient of a scalar node with respect to every parameter in `store`,
    /// flattened in store order. Parameters the output does not depend on
    /// contribute zeros.
    pub fn grad(&mut self, output: NodeId, store: &ParameterStore) -> Result<Vector, GraphError> {
        let shape = self.shape(output);
        if shape != Shape::Vector(1) {
            return Err(GraphError::NotScalar(shape));
        }
        let one = self.scalar(1.0);
        let mut targets = Vec::new();
        let mut target_for_entry: Vec<Option<usize>> = Vec::with_capacity(store.len());
        for (name, _) in store.iter() {
            match self.param_node(name) {
                Some(id) => {
                    target_for_entry.push(Some(targets.len()));
                    targets.push(id);
                }
                None => target_for_entry.push(None),
            }
        }
        let adjoints = self.vjp(output, one, &targets)?;
        let mut flat = Vec::with_capacity(store.flat_len());
        for ((_, value), slot) in store.iter().zip(&target_for_entry) {
            let n = value.flat_len();
            match slot.and_then(|k| adjoints[k]) {
                Some(node) => {
                    let adj = self.value(node);
                    debug_assert_eq!(adj.flat_len(), n);
                    flat.extend_from_slice(adj.flat());
                }
                None => flat.extend(std::iter::repeat(0.0).take(n)),
            }
        }
        Ok(Vector::from_raw(flat))
    }
}

/// Ordered collection of named parameter tensors.
///
/// Flatten/unflatten round-trips exactly: entries keep insertion order and
/// matrices flatten row-major.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<(String, Value)>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Value) -> Result<(), GraphError> {
        if self.index.contains_key(name) {
            return Err(GraphError::Store(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn set(&mut self, name: &str, value: Value) -> Result<(), GraphError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| GraphError::Store(format!("unknown parameter {name:?}")))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(GraphError::Store(format!("shape change for {name:?}")));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.flat_len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn flatten(&self) -> Vector {
        let mut flat = Vec::with_capacity(self.flat_len());
        for (_, v) in &self.entries {
            flat.extend_from_slice(v.flat());
        }
        Vector::from_raw(flat)
    }

    /// Rebuilds a store with the same names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &Vector) -> Result<Self, GraphError> {
        if flat.len() != self.flat_len() {
            return Err(GraphError::Store(format!(
                "flat length {} != expected {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut out = Self::new();
        let mut offset = 0;
        for (name, value) in &self.entries {
            let n = value.flat_len();
            let chunk = &flat.as_slice()[offset..offset + n];
            offset += n;
            let v = match value.shape() {
                Shape::Vector(_) => Value::Vector(Vector::from_raw(chunk.to_vec())),
                Shape::Matrix(r, c) => Value::Matrix(Matrix::from_raw(r, c, chunk.to_vec())),
            };
            out.insert(name, v)?;
        }
        Ok(out)
    }

    /// Binds every entry as a parameter leaf of the graph.
    pub fn bind(&self, g: &mut Graph) -> Result<(), GraphError> {
        for (name, value) in &self.entries {
            g.param(name, value.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use approx::assert_relative_eq;

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.constant_vec(Vector::new(vec![-1.0]).unwrap());
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_relative_eq!(g.vector_value(y)[0], -0.01);
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut g = Graph::new();
        let w = g.constant_mat(Matrix::identity(3));
        let b = g.constant_vec(Vector::zeros(3));
        let x = g.constant_vec(Vector::new(vec![0.3, -0.7, 2.0]).unwrap());
        let wx = g.matmul(w, x).unwrap();
        let y = g.bias_add(wx, b).unwrap();
        assert_eq!(g.vector_value(y).as_slice(), &[0.3, -0.7, 2.0]);
    }

    #[test]
    fn vjp_of_linear_scaling() {
        // f(x) = 2x, cotangent u -> adjoint 2u.
        let mut g = Graph::new();
        let x = g.constant_vec(Vector::new(vec![1.0, 2.0]).unwrap());
        let y = g.scale_c(2.0, x);
        let u = g.constant_vec(Vector::new(vec![3.0, -1.0]).unwrap());
        let adj = g.vjp(y, u, &[x]).unwrap()[0].unwrap();
        assert_eq!(g.vector_value(adj).as_slice(), &[6.0, -2.0]);
    }

    #[test]
    fn vjp_of_matmul_is_adjoint_map() {
        // f(x) = A x, cotangent u -> Aᵀ u.
        let mut g = Graph::new();
        let a_mat = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = g.constant_mat(a_mat.clone());
        let x = g.constant_vec(Vector::new(vec![1.0, 1.0]).unwrap());
        let y = g.matmul(a, x).unwrap();
        let u = g.constant_vec(Vector::new(vec![1.0, 2.0]).unwrap());
        let adj = g.vjp(y, u, &[x]).unwrap()[0].unwrap();
        // Aᵀu = [1*1+3*2, 2*1+4*2] = [7, 10]
        assert_eq!(g.vector_value(adj).as_slice(), &[7.0, 10.0]);
    }

    #[test]
    fn jvp_of_elementwise_square() {
        // f(x) = x ⊙ x at (1,2), tangent (1,1) -> (2,4).
        let mut g = Graph::new();
        let x = g.constant_vec(Vector::new(vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let t = g.constant_vec(Vector::new(vec![1.0, 1.0]).unwrap());
        let j = g.jvp(x, t, y).unwrap();
        assert_eq!(g.vector_value(j).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn jvp_of_linear_map_is_map_itself() {
        let mut g = Graph::new();
        let a_mat = Matrix::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let a = g.constant_mat(a_mat);
        let x = g.constant_vec(Vector::new(vec![5.0, 7.0]).unwrap());
        let y = g.matmul(a, x).unwrap();
        let t = g.constant_vec(Vector::new(vec![1.0, 2.0]).unwrap());
        let j = g.jvp(x, t, y).unwrap();
        assert_eq!(g.vector_value(j).as_slice(), &[2.0, -1.0]);
    }

    /// Small two-layer network used by several derivative checks.
    fn build_net(
        g: &mut Graph,
        w1: &Matrix,
        b1: &Vector,
        w2: &Matrix,
        x: NodeId,
    ) -> NodeId {
        let w1n = g.constant_mat(w1.clone());
        let b1n = g.constant_vec(b1.clone());
        let w2n = g.constant_mat(w2.clone());
        let h = g.matmul(w1n, x).unwrap();
        let h = g.bias_add(h, b1n).unwrap();
        let h = g.leaky_relu(h, 0.01).unwrap();
        g.matmul(w2n, h).unwrap()
    }

    #[test]
    fn transpose_pairing_on_random_net() {
        // <u, J v> == <Jᵀ u, v> to 1e-10 relative.
        let mut rng = SeedRng::new(21);
        for _ in 0..10 {
            let w1 = Matrix::from_fn(5, 3, |_, _| rng.standard_normal());
            let b1 = Vector::from_fn(5, |_| rng.standard_normal());
            let w2 = Matrix::from_fn(4, 5, |_, _| rng.standard_normal());
            let xv = Vector::from_fn(3, |_| rng.standard_normal());
            let u = Vector::from_fn(4, |_| rng.standard_normal());
            let v = Vector::from_fn(3, |_| rng.standard_normal());

            let mut g = Graph::new();
            let x = g.constant_vec(xv);
            let y = build_net(&mut g, &w1, &b1, &w2, x);
            let tv = g.constant_vec(v.clone());
            let jv = g.jvp(x, tv, y).unwrap();
            let un = g.constant_vec(u.clone());
            let jtu = g.vjp(y, un, &[x]).unwrap()[0].unwrap();

            let lhs = u.dot(g.vector_value(jv));
            let rhs = g.vector_value(jtu).dot(&v);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn vjp_matches_finite_differences_of_inner_product() {
        // <u, f(x)> differentiated by hand-rolled central differences.
        let mut rng = SeedRng::new(5);
        let w1 = Matrix::from_fn(6, 4, |_, _| rng.standard_normal());
        let b1 = Vector::from_fn(6, |_| rng.standard_normal());
        let w2 = Matrix::from_fn(3, 6, |_, _| rng.standard_normal());
        let x0 = Vector::from_fn(4, |_| rng.standard_normal());
        let u = Vector::from_fn(3, |_| rng.standard_normal());

        let eval = |x: &Vector| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant_vec(x.clone());
            let y = build_net(&mut g, &w1, &b1, &w2, xn);
            u.dot(g.vector_value(y))
        };

        let mut g = Graph::new();
        let xn = g.constant_vec(x0.clone());
        let y = build_net(&mut g, &w1, &b1, &w2, xn);
        let un = g.constant_vec(u.clone());
        let adj = g.vjp(y, un, &[xn]).unwrap()[0].unwrap();
        let grad = g.vector_value(adj).clone();

        let h = 1e-6;
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..4 {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            err2 += (fd - grad[i]).powi(2);
            norm2 += fd * fd;
        }
        assert!((err2 / norm2).sqrt() < 1e-5);
    }

    #[test]
    fn grad_of_half_squared_norm_is_theta() {
        let mut store = ParameterStore::new();
        let theta = Vector::new(vec![1.0, -2.0, 0.5]).unwrap();
        store.insert("theta", Value::Vector(theta.clone())).unwrap();

        let mut g = Graph::new();
        store.bind(&mut g).unwrap();
        let t = g.param_node("theta").unwrap();
        let sq = g.inner(t, t).unwrap();
        let half = g.scale_c(0.5, sq);
        let grad = g.grad(half, &store).unwrap();
        assert_eq!(grad.as_slice(), theta.as_slice());
    }

    #[test]
    fn grad_is_zero_for_unused_parameters() {
        let mut store = ParameterStore::new();
        store
            .insert("used", Value::Vector(Vector::new(vec![2.0]).unwrap()))
            .unwrap();
        store
            .insert("unused", Value::Vector(Vector::new(vec![1.0, 1.0]).unwrap()))
            .unwrap();

        let mut g = Graph::new();
        let u = g
            .param("used", Value::Vector(Vector::new(vec![2.0]).unwrap()))
            .unwrap();
        let y = g.mul(u, u).unwrap();
        let grad = g.grad(y, &store).unwrap();
        assert_eq!(grad.as_slice(), &[4.0, 0.0, 0.0]);
    }

    #[test]
    fn batched_jvp_matches_columnwise_sweeps() {
        let mut rng = SeedRng::new(31);
        let w1 = Matrix::from_fn(8, 3, |_, _| rng.standard_normal());
        let b1 = Vector::from_fn(8, |_| rng.standard_normal());
        let w2 = Matrix::from_fn(3, 8, |_, _| rng.standard_normal());
        let x0 = Vector::from_fn(3, |_| rng.standard_normal());

        let tangents: Vec<Vector> = (0..4).map(|_| Vector::from_fn(3, |_| rng.standard_normal())).collect();
        let block = Matrix::from_fn(3, 4, |i, j| tangents[j][i]);

        let mut g = Graph::new();
        let x = g.constant_vec(x0.clone());
        let y = build_net(&mut g, &w1, &b1, &w2, x);
        let tb = g.constant_mat(block);
        let jb = g.jvp(x, tb, y).unwrap();
        let batched = g.matrix_value(jb).clone();

        for (j, t) in tangents.iter().enumerate() {
            let tn = g.constant_vec(t.clone());
            let jv = g.jvp(x, tn, y).unwrap();
            let single = g.vector_value(jv);
            for i in 0..3 {
                // bit-identical, not merely close
                assert_eq!(single[i], batched.get(i, j));
            }
        }
    }

    #[test]
    fn batched_vjp_matches_columnwise_sweeps() {
        let mut rng = SeedRng::new(32);
        let w1 = Matrix::from_fn(8, 3, |_, _| rng.standard_normal());
        let b1 = Vector::from_fn(8, |_| rng.standard_normal());
        let w2 = Matrix::from_fn(3, 8, |_, _| rng.standard_normal());
        let x0 = Vector::from_fn(3, |_| rng.standard_normal());

        let cots: Vec<Vector> = (0..4).map(|_| Vector::from_fn(3, |_| rng.standard_normal())).collect();
        let block = Matrix::from_fn(3, 4, |i, j| cots[j][i]);

        let mut g = Graph::new();
        let x = g.constant_vec(x0.clone());
        let y = build_net(&mut g, &w1, &b1, &w2, x);
        let cb = g.constant_mat(block);
        let ab = g.vjp(y, cb, &[x]).unwrap()[0].unwrap();
        let batched = g.matrix_value(ab).clone();

        for (j, u) in cots.iter().enumerate() {
            let un = g.constant_vec(u.clone());
            let a = g.vjp(y, un, &[x]).unwrap()[0].unwrap();
            let single = g.vector_value(a);
            for i in 0..3 {
                assert_eq!(single[i], batched.get(i, j));
            }
        }
    }

    #[test]
    fn second_order_grad_through_jvp() {
        // d/dθ of ||J_f(x) v||² for f(x) = (θ ⊙ x), J v = θ ⊙ v, so the
        // objective is Σ θ_i² v_i² and the gradient is 2 θ ⊙ v ⊙ v.
        let theta = Vector::new(vec![1.5, -0.5]).unwrap();
        let v = Vector::new(vec![2.0, 3.0]).unwrap();
        let mut store = ParameterStore::new();
        store.insert("theta", Value::Vector(theta.clone())).unwrap();

        let mut g = Graph::new();
        store.bind(&mut g).unwrap();
        let t = g.param_node("theta").unwrap();
        let x = g.constant_vec(Vector::new(vec![0.7, -1.2]).unwrap());
        let y = g.mul(t, x).unwrap();
        let vn = g.constant_vec(v.clone());
        let jv = g.jvp(x, vn, y).unwrap(); // = θ ⊙ v
        let obj = g.inner(jv, jv).unwrap(); // = Σ θ² v²
        let grad = g.grad(obj, &store).unwrap();
        for i in 0..2 {
            assert_relative_eq!(grad[i], 2.0 * theta[i] * v[i] * v[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn param_store_flatten_roundtrip() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Value::Matrix(Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()))
            .unwrap();
        store
            .insert("b", Value::Vector(Vector::new(vec![5.0, 6.0]).unwrap()))
            .unwrap();
        let flat = store.flatten();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = store.unflatten(&flat).unwrap();
        assert_eq!(back.flatten().as_slice(), flat.as_slice());
        assert!(store.insert("w", Value::Vector(Vector::zeros(1))).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant_vec(Vector::zeros(2));
        let b = g.constant_vec(Vector::zeros(3));
        assert!(g.add(a, b).is_err());
        let m = g.constant_mat(Matrix::zeros(2, 2));
        assert!(g.add(a, m).is_err());
        assert!(g.matmul(a, b).is_err());
    }
}
