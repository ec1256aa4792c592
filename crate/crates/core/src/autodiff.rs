//! Tape-based reverse-mode automatic differentiation over scalars and dense
//! vectors/matrices.
//!
//! The tape records every elementary operation of a forward pass in
//! topological order; [`Tape::backward`] replays it in reverse and accumulates
//! adjoints into the registered parameters. One tape per training job; the
//! graph is rebuilt each epoch via [`Tape::reset`], which truncates everything
//! except the parameter leaves.

use thiserror::Error;

/// Dense shape of a tape value. Scalars are 1x1, vectors are nx1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
///
/// A `Value` is only meaningful together with the tape that produced it;
/// mixing handles across tapes is a logic error.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Value(u32);

impl Value {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch ({lhs} vs {rhs})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: domain violation (operand value {value})")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: empty operand")]
    EmptyOperand { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: Shape },
    #[error("parameters must be registered before any other node is recorded")]
    LateParameter,
    #[error("index {index} out of bounds for value of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("{0} is not a parameter node")]
    NotAParameter(usize),
    #[error("gradient check requires fd_step > 0, got {0}")]
    BadFdStep(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Sqrt(Value),
    /// sqrt(max(x, 0)) with derivative 0 for x <= 0; keeps rollouts alive when
    /// a transient state leaves the physical domain.
    SqrtClamped(Value),
    Sin(Value),
    Exp(Value),
    Sigmoid(Value),
    Relu(Value),
    Affine {
        w: Value,
        x: Value,
        b: Value,
    },
    Sum(Value),
    Mean(Value),
    SqNorm(Value),
    Stack(Box<[Value]>),
    Index(Value, u32),
}

/// Wengert list with a flat `f64` arena for values and adjoints.
///
/// Parameters are the first nodes on the tape and survive [`Tape::reset`];
/// their gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    vals: Vec<f64>,
    n_params: usize,
    params_len: usize,
    param_grads: Vec<f64>,
    adj: Vec<f64>,
    scratch: Vec<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            shapes: Vec::new(),
            offsets: Vec::new(),
            vals: Vec::new(),
            n_params: 0,
            params_len: 0,
            param_grads: Vec::new(),
            adj: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, shape: Shape, data: &[f64]) -> Value {
        debug_assert_eq!(shape.len(), data.len());
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.shapes.push(shape);
        self.offsets.push(self.vals.len());
        self.vals.extend_from_slice(data);
        Value(id)
    }

    fn push_uninit(&mut self, op: Op, shape: Shape) -> Value {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.shapes.push(shape);
        self.offsets.push(self.vals.len());
        self.vals.resize(self.vals.len() + shape.len(), 0.0);
        Value(id)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, v: Value) -> Shape {
        self.shapes[v.idx()]
    }

    /// Forward value of a node.
    pub fn value(&self, v: Value) -> &[f64] {
        let off = self.offsets[v.idx()];
        &self.vals[off..off + self.shapes[v.idx()].len()]
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self, v: Value) -> f64 {
        debug_assert!(self.shapes[v.idx()].is_scalar());
        self.vals[self.offsets[v.idx()]]
    }

    // ---- leaves -----------------------------------------------------------

    /// Registers a trainable parameter. All parameters must be registered
    /// before the first non-parameter node.
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Value, TapeError> {
        if self.ops.len() != self.n_params {
            return Err(TapeError::LateParameter);
        }
        let shape = Shape::matrix(rows, cols);
        if shape.len() != data.len() {
            return Err(TapeError::ShapeMismatch {
                op: "param",
                lhs: shape,
                rhs: Shape::vector(data.len()),
            });
        }
        let v = self.push(Op::Param, shape, data);
        self.n_params += 1;
        self.params_len = self.vals.len();
        self.param_grads.resize(self.params_len, 0.0);
        Ok(v)
    }

    pub fn param_scalar(&mut self, x: f64) -> Result<Value, TapeError> {
        self.param(1, 1, &[x])
    }

    pub fn param_vector(&mut self, data: &[f64]) -> Result<Value, TapeError> {
        self.param(data.len(), 1, data)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Value {
        debug_assert_eq!(rows * cols, data.len());
        self.push(Op::Const, Shape::matrix(rows, cols), data)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Value {
        self.constant(1, 1, &[x])
    }

    pub fn constant_vector(&mut self, data: &[f64]) -> Value {
        self.constant(data.len(), 1, data)
    }

    // ---- parameter registry ------------------------------------------------

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Total number of scalar entries across all parameters.
    pub fn params_len(&self) -> usize {
        self.params_len
    }

    pub fn is_param(&self, v: Value) -> bool {
        v.idx() < self.n_params
    }

    /// Accumulated gradient of a parameter node.
    pub fn grad(&self, param: Value) -> Result<&[f64], TapeError> {
        if !self.is_param(param) {
            return Err(TapeError::NotAParameter(param.idx()));
        }
        let off = self.offsets[param.idx()];
        Ok(&self.param_grads[off..off + self.shapes[param.idx()].len()])
    }

    pub fn set_param(&mut self, param: Value, data: &[f64]) -> Result<(), TapeError> {
        if !self.is_param(param) {
            return Err(TapeError::NotAParameter(param.idx()));
        }
        let shape = self.shapes[param.idx()];
        if shape.len() != data.len() {
            return Err(TapeError::ShapeMismatch {
                op: "set_param",
                lhs: shape,
                rhs: Shape::vector(data.len()),
            });
        }
        let off = self.offsets[param.idx()];
        self.vals[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Flat view of all parameter entries (the first `params_len` slots).
    pub fn flat_params(&self) -> &[f64] {
        &self.vals[..self.params_len]
    }

    pub fn flat_grads(&self) -> &[f64] {
        &self.param_grads
    }

    /// Mutable parameter entries alongside their gradients, for optimizers.
    pub fn flat_params_and_grads_mut(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.vals[..self.params_len], &self.param_grads)
    }

    pub fn set_flat_param(&mut self, index: usize, value: f64) {
        assert!(index < self.params_len);
        self.vals[index] = value;
    }

    pub fn flat_param(&self, index: usize) -> f64 {
        self.vals[index]
    }

    /// Drops every non-parameter node. Parameter values and gradients are
    /// kept; existing parameter handles stay valid.
    pub fn reset(&mut self) {
        self.ops.truncate(self.n_params);
        self.shapes.truncate(self.n_params);
        self.offsets.truncate(self.n_params);
        self.vals.truncate(self.params_len);
    }

    pub fn zero_grad(&mut self) {
        self.param_grads.fill(0.0);
    }

    // ---- elementary operations --------------------------------------------

    fn binary_shape(
        &self,
        op: &'static str,
        a: Value,
        b: Value,
    ) -> Result<(Shape, bool, bool), TapeError> {
        let sa = self.shapes[a.idx()];
        let sb = self.shapes[b.idx()];
        if sa == sb {
            Ok((sa, false, false))
        } else if sa.is_scalar() {
            Ok((sb, true, false))
        } else if sb.is_scalar() {
            Ok((sa, false, true))
        } else {
            Err(TapeError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            })
        }
    }

    fn elementwise_binary(
        &mut self,
        op_name: &'static str,
        op: Op,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value, TapeError> {
        let (shape, a_scalar, b_scalar) = self.binary_shape(op_name, a, b)?;
        let out = self.push_uninit(op, shape);
        let (oa, ob, oo) = (
            self.offsets[a.idx()],
            self.offsets[b.idx()],
            self.offsets[out.idx()],
        );
        for i in 0..shape.len() {
            let va = self.vals[oa + if a_scalar { 0 } else { i }];
            let vb = self.vals[ob + if b_scalar { 0 } else { i }];
            self.vals[oo + i] = f(va, vb);
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TapeError> {
        self.elementwise_binary("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, TapeError> {
        self.elementwise_binary("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TapeError> {
        self.elementwise_binary("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, TapeError> {
        for &d in self.value(b) {
            if d == 0.0 {
                return Err(TapeError::Domain {
                    op: "div",
                    value: d,
                });
            }
        }
        self.elementwise_binary("div", Op::Div(a, b), a, b, |x, y| x / y)
    }

    fn elementwise_unary(
        &mut self,
        op: Op,
        a: Value,
        f: impl Fn(f64) -> f64,
    ) -> Value {
        let shape = self.shapes[a.idx()];
        let out = self.push_uninit(op, shape);
        let (oa, oo) = (self.offsets[a.idx()], self.offsets[out.idx()]);
        for i in 0..shape.len() {
            self.vals[oo + i] = f(self.vals[oa + i]);
        }
        out
    }

    pub fn neg(&mut self, a: Value) -> Result<Value, TapeError> {
        Ok(self.elementwise_unary(Op::Neg(a), a, |x| -x))
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value, TapeError> {
        for &x in self.value(a) {
            if x < 0.0 {
                return Err(TapeError::Domain {
                    op: "sqrt",
                    value: x,
                });
            }
        }
        Ok(self.elementwise_unary(Op::Sqrt(a), a, f64::sqrt))
    }

    /// sqrt(max(x, 0)); derivative 0 on x <= 0, like the relu subgradient.
    pub fn sqrt_clamped(&mut self, a: Value) -> Result<Value, TapeError> {
        Ok(self.elementwise_unary(Op::SqrtClamped(a), a, |x| x.max(0.0).sqrt()))
    }

    pub fn sin(&mut self, a: Value) -> Result<Value, TapeError> {
        Ok(self.elementwise_unary(Op::Sin(a), a, f64::sin))
    }

    pub fn exp(&mut self, a: Value) -> Result<Value, TapeError> {
        for &x in self.value(a) {
            if x.exp().is_infinite() {
                return Err(TapeError::Domain {
                    op: "exp",
                    value: x,
                });
            }
        }
        Ok(self.elementwise_unary(Op::Exp(a), a, f64::exp))
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value, TapeError> {
        Ok(self.elementwise_unary(Op::Sigmoid(a), a, stable_sigmoid))
    }

    pub fn relu(&mut self, a: Value) -> Result<Value, TapeError> {
        Ok(self.elementwise_unary(Op::Relu(a), a, |x| x.max(0.0)))
    }

    /// W.x + b with W of shape (m, n), x a vector of length n, b of length m.
    pub fn affine(&mut self, w: Value, x: Value, b: Value) -> Result<Value, TapeError> {
        let (sw, sx, sb) = (
            self.shapes[w.idx()],
            self.shapes[x.idx()],
            self.shapes[b.idx()],
        );
        if sx.cols != 1 || sw.cols != sx.rows {
            return Err(TapeError::ShapeMismatch {
                op: "affine",
                lhs: sw,
                rhs: sx,
            });
        }
        if sb.cols != 1 || sb.rows != sw.rows {
            return Err(TapeError::ShapeMismatch {
                op: "affine",
                lhs: sw,
                rhs: sb,
            });
        }
        let (m, n) = (sw.rows, sw.cols);
        let out = self.push_uninit(Op::Affine { w, x, b }, Shape::vector(m));
        let (ow, ox, ob, oo) = (
            self.offsets[w.idx()],
            self.offsets[x.idx()],
            self.offsets[b.idx()],
            self.offsets[out.idx()],
        );
        for r in 0..m {
            let mut acc = self.vals[ob + r];
            for c in 0..n {
                acc += self.vals[ow + r * n + c] * self.vals[ox + c];
            }
            self.vals[oo + r] = acc;
        }
        Ok(out)
    }

    fn reduce(
        &mut self,
        op_name: &'static str,
        op: Op,
        a: Value,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Value, TapeError> {
        if self.shapes[a.idx()].is_empty() {
            return Err(TapeError::EmptyOperand { op: op_name });
        }
        let off = self.offsets[a.idx()];
        let val = f(&self.vals[off..off + self.shapes[a.idx()].len()]);
        Ok(self.push(op, Shape::scalar(), &[val]))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value, TapeError> {
        self.reduce("sum", Op::Sum(a), a, |xs| xs.iter().sum())
    }

    pub fn mean(&mut self, a: Value) -> Result<Value, TapeError> {
        self.reduce("mean", Op::Mean(a), a, |xs| {
            xs.iter().sum::<f64>() / xs.len() as f64
        })
    }

    /// Squared Euclidean norm.
    pub fn sq_norm(&mut self, a: Value) -> Result<Value, TapeError> {
        self.reduce("sq_norm", Op::SqNorm(a), a, |xs| {
            xs.iter().map(|x| x * x).sum()
        })
    }

    /// Concatenates scalars/vectors into one vector.
    pub fn stack(&mut self, parts: &[Value]) -> Result<Value, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::EmptyOperand { op: "stack" });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shapes[p.idx()];
            if s.cols != 1 {
                return Err(TapeError::ShapeMismatch {
                    op: "stack",
                    lhs: s,
                    rhs: Shape::vector(s.rows),
                });
            }
            total += s.rows;
        }
        let out = self.push_uninit(Op::Stack(parts.to_vec().into_boxed_slice()), Shape::vector(total));
        let mut oo = self.offsets[out.idx()];
        for &p in parts {
            let len = self.shapes[p.idx()].len();
            let op = self.offsets[p.idx()];
            for i in 0..len {
                self.vals[oo + i] = self.vals[op + i];
            }
            oo += len;
        }
        Ok(out)
    }

    /// Extracts element `i` of a vector as a scalar node.
    pub fn index(&mut self, a: Value, i: usize) -> Result<Value, TapeError> {
        let len = self.shapes[a.idx()].len();
        if i >= len {
            return Err(TapeError::IndexOutOfBounds { index: i, len });
        }
        let val = self.vals[self.offsets[a.idx()] + i];
        Ok(self.push(Op::Index(a, i as u32), Shape::scalar(), &[val]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Parameter gradients accumulate;
    /// call [`Tape::zero_grad`] between optimization steps.
    pub fn backward(&mut self, loss: Value) -> Result<(), TapeError> {
        if !self.shapes[loss.idx()].is_scalar() {
            return Err(TapeError::NonScalarLoss {
                shape: self.shapes[loss.idx()],
            });
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.adj[self.offsets[loss.idx()]] = 1.0;

        for i in (self.n_params..=loss.idx()).rev() {
            let out_off = self.offsets[i];
            let out_len = self.shapes[i].len();
            if self.adj[out_off..out_off + out_len].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Copy the output adjoint so we can mutate input regions freely.
            self.scratch.clear();
            self.scratch
                .extend_from_slice(&self.adj[out_off..out_off + out_len]);
            let op = self.ops[i].clone();
            self.propagate(op, out_off);
        }

        for p in 0..self.params_len.min(self.adj.len()) {
            self.param_grads[p] += self.adj[p];
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Value, broadcast: bool, f: impl Fn(usize, f64) -> f64) {
        let off = self.offsets[v.idx()];
        if broadcast {
            let mut acc = 0.0;
            for i in 0..self.scratch.len() {
                acc += f(i, self.scratch[i]);
            }
            self.adj[off] += acc;
        } else {
            for i in 0..self.scratch.len() {
                let g = self.scratch[i];
                self.adj[off + i] += f(i, g);
            }
        }
    }

    fn propagate(&mut self, op: Op, out_off: usize) {
        match op {
            Op::Param | Op::Const => {}
            Op::Add(a, b) => {
                let (ba, bb) = self.broadcast_flags(a, b);
                self.accumulate(a, ba, |_, g| g);
                self.accumulate(b, bb, |_, g| g);
            }
            Op::Sub(a, b) => {
                let (ba, bb) = self.broadcast_flags(a, b);
                self.accumulate(a, ba, |_, g| g);
                self.accumulate(b, bb, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (ba, bb) = self.broadcast_flags(a, b);
                let oa = self.offsets[a.idx()];
                let ob = self.offsets[b.idx()];
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, ba, |i, g| g * vals[ob + if bb { 0 } else { i }]);
                self.accumulate(b, bb, |i, g| g * vals[oa + if ba { 0 } else { i }]);
                self.vals = vals;
            }
            Op::Div(a, b) => {
                let (ba, bb) = self.broadcast_flags(a, b);
                let oa = self.offsets[a.idx()];
                let ob = self.offsets[b.idx()];
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, ba, |i, g| g / vals[ob + if bb { 0 } else { i }]);
                self.accumulate(b, bb, |i, g| {
                    let d = vals[ob + if bb { 0 } else { i }];
                    -g * vals[oa + if ba { 0 } else { i }] / (d * d)
                });
                self.vals = vals;
            }
            Op::Neg(a) => self.accumulate(a, false, |_, g| -g),
            Op::Sqrt(a) => {
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, false, |i, g| g / (2.0 * vals[out_off + i]));
                self.vals = vals;
            }
            Op::SqrtClamped(a) => {
                let oa = self.offsets[a.idx()];
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, false, |i, g| {
                    if vals[oa + i] > 0.0 {
                        g / (2.0 * vals[out_off + i])
                    } else {
                        0.0
                    }
                });
                self.vals = vals;
            }
            Op::Sin(a) => {
                let oa = self.offsets[a.idx()];
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, false, |i, g| g * vals[oa + i].cos());
                self.vals = vals;
            }
            Op::Exp(a) => {
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, false, |i, g| g * vals[out_off + i]);
                self.vals = vals;
            }
            Op::Sigmoid(a) => {
                let vals = std::mem::take(&mut self.vals);
                self.accumulate(a, false, |i, g| {
                    let s = vals[out_off + i];
                    g * s * (1.0 - s)
                });
                self.vals = vals;
            }
            Op::Relu(a) => {
                let oa = self.offsets[a.idx()];
                let vals = std::mem::take(&mut self.vals);
                // Subgradient at exactly 0 is fixed to 0.
                self.accumulate(a, false, |i, g| if vals[oa + i] > 0.0 { g } else { 0.0 });
                self.vals = vals;
            }
            Op::Affine { w, x, b } => {
                let (m, n) = {
                    let s = self.shapes[w.idx()];
                    (s.rows, s.cols)
                };
                let ow = self.offsets[w.idx()];
                let ox = self.offsets[x.idx()];
                let oxa = self.offsets[x.idx()];
                let owa = self.offsets[w.idx()];
                let oba = self.offsets[b.idx()];
                for r in 0..m {
                    let g = self.scratch[r];
                    self.adj[oba + r] += g;
                    for c in 0..n {
                        self.adj[owa + r * n + c] += g * self.vals[ox + c];
                        self.adj[oxa + c] += g * self.vals[ow + r * n + c];
                    }
                }
            }
            Op::Sum(a) => {
                let g = self.scratch[0];
                let oa = self.offsets[a.idx()];
                for i in 0..self.shapes[a.idx()].len() {
                    self.adj[oa + i] += g;
                }
            }
            Op::Mean(a) => {
                let len = self.shapes[a.idx()].len();
                let g = self.scratch[0] / len as f64;
                let oa = self.offsets[a.idx()];
                for i in 0..len {
                    self.adj[oa + i] += g;
                }
            }
            Op::SqNorm(a) => {
                let g = self.scratch[0];
                let oa = self.offsets[a.idx()];
                for i in 0..self.shapes[a.idx()].len() {
                    self.adj[oa + i] += 2.0 * g * self.vals[oa + i];
                }
            }
            Op::Stack(parts) => {
                let mut pos = 0;
                for &p in parts.iter() {
                    let len = self.shapes[p.idx()].len();
                    let op = self.offsets[p.idx()];
                    for i in 0..len {
                        self.adj[op + i] += self.scratch[pos + i];
                    }
                    pos += len;
                }
            }
            Op::Index(a, i) => {
                let oa = self.offsets[a.idx()];
                self.adj[oa + i as usize] += self.scratch[0];
            }
        }
    }

    fn broadcast_flags(&self, a: Value, b: Value) -> (bool, bool) {
        let sa = self.shapes[a.idx()];
        let sb = self.shapes[b.idx()];
        if sa == sb {
            (false, false)
        } else if sa.is_scalar() {
            (true, false)
        } else {
            (false, true)
        }
    }
}

/// Numerically stable logistic function, clamped to the open interval (0, 1).
fn stable_sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0_f64.next_down())
}

// ---- gradient checking -----------------------------------------------------

/// Comparison of one parameter entry against its central-difference estimate.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    /// Flat index into the tape's parameter storage.
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub n_checked: usize,
    /// Worst entries, largest relative error first (at most 10).
    pub worst: Vec<GradCheckEntry>,
}

/// Compares analytic gradients with central finite differences for every
/// parameter entry on the tape.
///
/// `loss_fn` must rebuild the forward pass from the current parameter values
/// and return a scalar loss. Entries where both gradients are smaller than
/// `degenerate_tol` are compared with absolute rather than relative error.
pub fn gradient_check<F>(
    tape: &mut Tape,
    mut loss_fn: F,
    fd_step: f64,
    degenerate_tol: f64,
) -> Result<GradCheckReport, TapeError>
where
    F: FnMut(&mut Tape) -> Result<Value, TapeError>,
{
    if fd_step <= 0.0 {
        return Err(TapeError::BadFdStep(fd_step));
    }

    tape.reset();
    tape.zero_grad();
    let loss = loss_fn(tape)?;
    tape.backward(loss)?;
    let analytic = tape.flat_grads().to_vec();

    let mut eval = |tape: &mut Tape| -> Result<f64, TapeError> {
        tape.reset();
        let v = loss_fn(tape)?;
        Ok(tape.scalar_value(v))
    };

    let mut entries = Vec::with_capacity(analytic.len());
    let mut sum_err = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = tape.flat_param(i);
        tape.set_flat_param(i, orig + fd_step);
        let lp = eval(tape)?;
        tape.set_flat_param(i, orig - fd_step);
        let lm = eval(tape)?;
        tape.set_flat_param(i, orig);

        let numeric = (lp - lm) / (2.0 * fd_step);
        let denom = a.abs().max(numeric.abs());
        let rel_err = if denom < degenerate_tol {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        sum_err += rel_err;
        entries.push(GradCheckEntry {
            flat_index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    tape.reset();

    let n = entries.len();
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    entries.truncate(10);
    Ok(GradCheckReport {
        max_rel_err,
        mean_rel_err: if n == 0 { 0.0 } else { sum_err / n as f64 },
        n_checked: n,
        worst: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_tape() -> Tape {
        Tape::new()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = scalar_tape();
        let x = t.constant_scalar(0.0);
        let s = t.sigmoid(x).unwrap();
        assert_eq!(t.scalar_value(s), 0.5);
    }

    #[test]
    fn relu_definition() {
        let mut t = scalar_tape();
        let a = t.constant_scalar(-3.2);
        let b = t.constant_scalar(3.2);
        let ra = t.relu(a).unwrap();
        let rb = t.relu(b).unwrap();
        assert_eq!(t.scalar_value(ra), 0.0);
        assert_eq!(t.scalar_value(rb), 3.2);
    }

    #[test]
    fn product_rule_x_sin_x() {
        // d/dx [x sin x] at x = 1 is sin(1) + cos(1).
        let mut t = Tape::new();
        let x = t.param_scalar(1.0).unwrap();
        let s = t.sin(x).unwrap();
        let y = t.mul(x, s).unwrap();
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap()[0];
        assert_relative_eq!(g, 1.0_f64.sin() + 1.0_f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(g, 1.3817732906760363, epsilon = 1e-12);

        // Central finite difference oracle, step 1e-6.
        let f = |v: f64| v * v.sin();
        let fd = (f(1.0 + 1e-6) - f(1.0 - 1e-6)) / 2e-6;
        assert_relative_eq!(g, fd, max_relative = 1e-5);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let p = t.param_scalar(3.0).unwrap();
        let l = t.mul(p, p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap()[0], 6.0);
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param(2, 3, &[0.3, -0.1, 0.7, 0.2, 0.5, -0.4]).unwrap();
        let b = t.param_vector(&[0.1, -0.2]).unwrap();
        let x = t.constant_vector(&[1.0, 2.0, 3.0]);
        let y = t.affine(w, x, b).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        // Loss: MSE of a 2-state linear system over 10 Euler steps, gradient
        // w.r.t. the system matrix.
        let dt = 0.1;
        let targets: Vec<[f64; 2]> = (0..=10)
            .map(|k| {
                let s = 0.9_f64.powi(k);
                [s, 2.0 * s]
            })
            .collect();
        let mut tape = Tape::new();
        let w0 = [-0.8, 0.1, 0.05, -1.2];
        let w = tape.param(2, 2, &w0).unwrap();
        let build = |t: &mut Tape| -> Result<Value, TapeError> {
            let b = t.constant_vector(&[0.0, 0.0]);
            let mut x = t.constant_vector(&[1.0, 2.0]);
            let dt_c = t.constant_scalar(dt);
            let mut loss = t.constant_scalar(0.0);
            for tgt in targets.iter().skip(1) {
                let dx = t.affine(w, x, b)?;
                let sdx = t.mul(dt_c, dx)?;
                x = t.add(x, sdx)?;
                let tv = t.constant_vector(tgt);
                let d = t.sub(x, tv)?;
                let e = t.sq_norm(d)?;
                loss = t.add(loss, e)?;
            }
            Ok(loss)
        };
        let report = gradient_check(&mut tape, build, 1e-6, 1e-10).unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn gradient_check_quadratic_is_near_exact() {
        let mut tape = Tape::new();
        let p = tape.param_vector(&[0.7, -1.3, 2.1]).unwrap();
        let build = |t: &mut Tape| -> Result<Value, TapeError> {
            let tgt = t.constant_vector(&[1.0, 0.0, -1.0]);
            let d = t.sub(p, tgt)?;
            t.sq_norm(d)
        };
        let report = gradient_check(&mut tape, build, 1e-6, 1e-12).unwrap();
        assert!(
            report.max_rel_err <= 1e-8,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        // Analytic derivative vs central difference on 100 random in-domain
        // inputs for each unary op.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        type UnaryOp = (
            &'static str,
            fn(&mut Tape, Value) -> Result<Value, TapeError>,
            fn(f64) -> f64,
            std::ops::Range<f64>,
        );
        let cases: Vec<UnaryOp> = vec![
            ("neg", Tape::neg, |x| -x, -3.0..3.0),
            ("sqrt", Tape::sqrt, f64::sqrt, 0.1..9.0),
            ("sin", Tape::sin, f64::sin, -3.0..3.0),
            ("exp", Tape::exp, f64::exp, -3.0..3.0),
            ("sigmoid", Tape::sigmoid, stable_sigmoid, -6.0..6.0),
            ("relu", Tape::relu, |x| x.max(0.0), 0.05..3.0),
        ];
        for (name, op, f, range) in cases {
            for _ in 0..100 {
                let x0: f64 = rng.random_range(range.clone());
                let mut t = Tape::new();
                let x = t.param_scalar(x0).unwrap();
                let y = op(&mut t, x).unwrap();
                t.backward(y).unwrap();
                let g = t.grad(x).unwrap()[0];
                let h = 1e-6;
                let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
                let denom = g.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (g - fd).abs() / denom <= 1e-5,
                    "{name} at {x0}: analytic {g}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn chain_rule_on_random_three_op_chains() {
        // Composition gradient equals the product of local partials.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x0: f64 = rng.random_range(0.2..1.5);
            let ops: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let mut t = Tape::new();
            let x = t.param_scalar(x0).unwrap();
            let mut v = x;
            let mut manual = 1.0;
            let mut cur = x0;
            for &k in &ops {
                let (next, partial) = match k {
                    // Domains chosen so every op stays well-defined.
                    0 => (cur.sin(), cur.cos()),
                    1 => (cur.exp(), cur.exp()),
                    2 => (stable_sigmoid(cur), {
                        let s = stable_sigmoid(cur);
                        s * (1.0 - s)
                    }),
                    _ => (-cur, -1.0),
                };
                v = match k {
                    0 => t.sin(v).unwrap(),
                    1 => t.exp(v).unwrap(),
                    2 => t.sigmoid(v).unwrap(),
                    _ => t.neg(v).unwrap(),
                };
                manual *= partial;
                cur = next;
            }
            t.backward(v).unwrap();
            let g = t.grad(x).unwrap()[0];
            assert_relative_eq!(g, manual, max_relative = 1e-12);
        }
    }

    #[test]
    fn reductions_and_their_gradients() {
        let mut t = Tape::new();
        let p = t.param_vector(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.sum(p).unwrap();
        let m = t.mean(p).unwrap();
        let q = t.sq_norm(p).unwrap();
        assert_eq!(t.scalar_value(s), 10.0);
        assert_eq!(t.scalar_value(m), 2.5);
        assert_eq!(t.scalar_value(q), 30.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
        t.zero_grad();
        t.backward(q).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut t = Tape::new();
        let p = t.param_scalar(3.0).unwrap();
        let l = t.mul(p, p).unwrap();
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap()[0], 12.0);
        t.zero_grad();
        assert_eq!(t.grad(p).unwrap()[0], 0.0);
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap()[0], 6.0);
    }

    #[test]
    fn zero_grad_then_backward_is_idempotent() {
        let run = || {
            let mut t = Tape::new();
            let p = t.param_vector(&[0.4, -0.9]).unwrap();
            let s = t.sq_norm(p).unwrap();
            let e = t.exp(s).unwrap();
            t.zero_grad();
            t.backward(e).unwrap();
            t.grad(p).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let v = t.constant_vector(&[1.0, 2.0]);
        assert!(matches!(
            t.backward(v),
            Err(TapeError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn domain_violations_are_named() {
        let mut t = Tape::new();
        let neg = t.constant_scalar(-2.0);
        let err = t.sqrt(neg).unwrap_err();
        assert!(err.to_string().contains("sqrt"));
        assert!(err.to_string().contains("-2"));

        let a = t.constant_scalar(1.0);
        let zero = t.constant_scalar(0.0);
        let err = t.div(a, zero).unwrap_err();
        assert!(err.to_string().contains("div"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant_vector(&[1.0, 2.0]);
        let b = t.constant_vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            t.add(a, b),
            Err(TapeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let mut t = Tape::new();
        let s = t.param_scalar(2.0).unwrap();
        let v = t.constant_vector(&[1.0, 2.0, 3.0]);
        let p = t.mul(s, v).unwrap();
        assert_eq!(t.value(p), &[2.0, 4.0, 6.0]);
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).unwrap()[0], 6.0);
    }

    #[test]
    fn reset_keeps_params_and_handles() {
        let mut t = Tape::new();
        let p = t.param_scalar(1.5).unwrap();
        let c = t.constant_scalar(2.0);
        let _ = t.mul(p, c).unwrap();
        assert_eq!(t.len(), 3);
        t.reset();
        assert_eq!(t.len(), 1);
        assert_eq!(t.scalar_value(p), 1.5);
        let c2 = t.constant_scalar(4.0);
        let m = t.mul(p, c2).unwrap();
        assert_eq!(t.scalar_value(m), 6.0);
    }

    #[test]
    fn late_param_registration_rejected() {
        let mut t = Tape::new();
        let _ = t.constant_scalar(1.0);
        assert!(matches!(
            t.param_scalar(2.0),
            Err(TapeError::LateParameter)
        ));
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut t = Tape::new();
        for z in [-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let x = t.constant_scalar(z);
            let s = t.sigmoid(x).unwrap();
            let v = t.scalar_value(s);
            assert!(v > 0.0 && v < 1.0, "sigmoid({z}) = {v}");
        }
    }

    #[test]
    fn index_and_stack_roundtrip_gradients() {
        let mut t = Tape::new();
        let p = t.param_vector(&[1.0, 2.0, 3.0]).unwrap();
        let a = t.index(p, 0).unwrap();
        let b = t.index(p, 2).unwrap();
        let s = t.stack(&[b, a]).unwrap();
        assert_eq!(t.value(s), &[3.0, 1.0]);
        let w = t.constant_vector(&[2.0, 5.0]);
        let m = t.mul(s, w).unwrap();
        let l = t.sum(m).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[5.0, 0.0, 2.0]);
    }

}
