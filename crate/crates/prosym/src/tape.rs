//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass and replays them in reverse to produce exact gradients for all
//! reachable parameters. Parameters live outside the tape in a [`ParamSet`];
//! a tape borrows the set, so the usual flow is
//!
//! ```
//! use prosym::tape::{ParamSet, Tape};
//! use prosym::tensor::Tensor;
//!
//! let mut params = ParamSet::new();
//! let w = params.add("w", Tensor::scalar(3.0));
//! let grads = {
//!     let mut tape = Tape::new(&params);
//!     let wv = tape.param(w);
//!     let loss = tape.mul(wv, wv);
//!     tape.backward(loss)
//! };
//! params.accumulate(&grads);
//! assert_eq!(params.get(w).grad.as_ref().unwrap().item(), 6.0);
//! ```
//!
//! Tapes are cheap to build and single-threaded; Monte-Carlo samples each get
//! their own tape and the resulting gradients are reduced in sample-index
//! order so training is bit-reproducible.
//!
//! Shape mismatches and domain violations (log of a nonpositive value,
//! division by exact zero) panic with a message naming the op and shapes;
//! they indicate a bug in model assembly, not a recoverable condition.

use std::collections::HashMap;

use crate::tensor::{matmul_raw, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a parameter slot in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// A named trainable tensor with an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters; names are unique within a set.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `grads` into the stored gradients; repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.by_param.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.params[i].grad {
                    Some(acc) => {
                        assert_eq!(acc.shape(), g.shape(), "gradient shape drift");
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every stored gradient so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for p in &mut self.params {
                if let Some(g) = &mut p.grad {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
    }
}

/// Per-parameter gradients produced by one [`Tape::backward`] call.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Scale all gradients in place (e.g. by 1/N when averaging samples).
    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Neg(Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { axis: usize, parts: Vec<Var> },
    GatherRows { input: Var, indices: Vec<usize> },
    SoftmaxRows(Var),
    L2Normalize(Var),
    NormalizeAxis { input: Var, axis: usize, eps: f64 },
    /// Forward value is the supplied hard tensor; gradient flows to the
    /// relaxed input unchanged.
    StraightThrough(Var),
}

struct Node {
    value: Option<Tensor>, // None for Param leaves (read from the set)
    op: Op,
    needs_grad: bool,
}

/// Operation recorder; one forward pass per tape.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; `backward` returns empty gradients.
    pub fn no_grad(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::new(), grad_enabled: false }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Param(id) => self.params.value(*id),
            _ => node.value.as_ref().expect("non-param node holds a value"),
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Bind a parameter from the set as a differentiable leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.rows(),
            "matmul: incompatible shapes {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::new([m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::Matmul(a, b), ng)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var) -> (Tensor, bool) {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = broadcast_apply(op_name, ta, tb);
        (out, self.needs_grad(a) || self.needs_grad(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary("add", a, b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary("sub", a, b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (out, ng) = self.binary("mul", a, b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(b).data().iter().all(|&v| v != 0.0),
            "div: denominator contains exact zero"
        );
        let (out, ng) = self.binary("div", a, b);
        self.push(out, Op::Div(a, b), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(Var) -> Op) -> Var {
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        );
        let ng = self.needs_grad(x);
        self.push(out, op(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, Op::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        assert!(
            self.value(x).data().iter().all(|&v| v > 0.0),
            "log: nonpositive input"
        );
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        assert!(
            self.value(x).data().iter().all(|&v| v >= 0.0),
            "sqrt: negative input"
        );
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, |v| Op::Scale(v, c))
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v.max(c), |v| Op::ClampMin(v, c))
    }

    /// Full reduction to a scalar `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transposed();
        let ng = self.needs_grad(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let ng = self.needs_grad(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns). Rank-1 parts may be
    /// concatenated along axis 0 into a rank-1 result.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        assert!(axis <= 1, "concat: axis must be 0 or 1");
        let rank = self.value(parts[0]).rank();
        let out = if rank == 1 && axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                assert_eq!(self.value(p).rank(), 1, "concat: mixed ranks");
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::from_vec(data)
        } else {
            let first = self.value(parts[0]);
            assert_eq!(first.rank(), 2, "concat: parts must be matrices or vectors");
            if axis == 0 {
                let c = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    assert_eq!(t.cols(), c, "concat axis 0: column mismatch");
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new([rows, c], data)
            } else {
                let r = first.rows();
                let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = vec![0.0; r * total_c];
                let mut col_off = 0;
                for &p in parts {
                    let t = self.value(p);
                    assert_eq!(t.rows(), r, "concat axis 1: row mismatch");
                    let c = t.cols();
                    for i in 0..r {
                        data[i * total_c + col_off..i * total_c + col_off + c]
                            .copy_from_slice(t.row(i));
                    }
                    col_off += c;
                }
                Tensor::new([r, total_c], data)
            }
        };
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        self.push(out, Op::Concat { axis, parts: parts.to_vec() }, ng)
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Var {
        let t = self.value(input);
        assert_eq!(t.rank(), 2, "gather_rows: input must be a matrix");
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < t.rows(), "gather_rows: index {i} out of {} rows", t.rows());
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new([indices.len(), c], data);
        let ng = self.needs_grad(input);
        self.push(out, Op::GatherRows { input, indices: indices.to_vec() }, ng)
    }

    /// Row-wise softmax with per-row max shift.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2, "softmax_rows: input must be a matrix");
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                data[i * c + j] /= s;
            }
        }
        let ng = self.needs_grad(x);
        self.push(Tensor::new([r, c], data), Op::SoftmaxRows(x), ng)
    }

    /// Normalize the whole tensor to (near) unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let denom = t.frobenius_norm() + 1e-12;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v / denom).collect(),
        );
        let ng = self.needs_grad(x);
        self.push(out, Op::L2Normalize(x), ng)
    }

    /// Standardize to zero mean / unit variance along `axis` of a matrix
    /// (axis 0: statistics taken over rows, per column).
    pub fn normalize_axis(&mut self, x: Var, axis: usize, eps: f64) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2, "normalize_axis: input must be a matrix");
        assert!(axis <= 1, "normalize_axis: axis must be 0 or 1");
        let out = normalize_axis_value(t, axis, eps);
        let ng = self.needs_grad(x);
        self.push(out, Op::NormalizeAxis { input: x, axis, eps }, ng)
    }

    /// Forward takes the value of `hard`; backward routes the gradient to
    /// `relaxed` unchanged.
    pub fn straight_through(&mut self, relaxed: Var, hard: Tensor) -> Var {
        assert_eq!(
            self.value(relaxed).shape(),
            hard.shape(),
            "straight_through: shape mismatch"
        );
        let ng = self.needs_grad(relaxed);
        self.push(hard, Op::StraightThrough(relaxed), ng)
    }

    /// Reverse pass from a scalar loss; returns gradients keyed by parameter.
    ///
    /// Panics if `loss` is not scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(
            self.value(loss).is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.value(loss).shape()
        );
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut grads = Gradients { by_param: vec![None; self.params.len()] };
        if !self.nodes[loss.0].needs_grad {
            return grads;
        }
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(adj) = adjoints[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(pid) => {
                    accumulate_into(&mut grads.by_param[pid.0], &adj);
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs_grad(*a) {
                        let tbt = tb.transposed();
                        let da = Tensor::new(
                            ta.shape().to_vec(),
                            matmul_raw(adj.data(), tbt.data(), ta.rows(), tb.cols(), ta.cols()),
                        );
                        self.add_adjoint(&mut adjoints, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let tat = ta.transposed();
                        let db = Tensor::new(
                            tb.shape().to_vec(),
                            matmul_raw(tat.data(), adj.data(), tb.rows(), ta.rows(), tb.cols()),
                        );
                        self.add_adjoint(&mut adjoints, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.broadcast_back(&mut adjoints, *a, &adj, |_, _, d| d, id);
                    self.broadcast_back(&mut adjoints, *b, &adj, |_, _, d| d, id);
                }
                Op::Sub(a, b) => {
                    self.broadcast_back(&mut adjoints, *a, &adj, |_, _, d| d, id);
                    self.broadcast_back(&mut adjoints, *b, &adj, |_, _, d| -d, id);
                }
                Op::Mul(a, b) => {
                    let (tb, ta) = (self.value(*b).clone(), self.value(*a).clone());
                    self.broadcast_back_with(&mut adjoints, *a, &adj, &tb, |o, d| d * o, id);
                    self.broadcast_back_with(&mut adjoints, *b, &adj, &ta, |o, d| d * o, id);
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                    self.broadcast_back_with(&mut adjoints, *a, &adj, &tb, |bv, d| d / bv, id);
                    // d/db (a/b) = -a / b^2, evaluated elementwise on the
                    // broadcasted grid.
                    let out_shape = self.value(Var(id)).shape().to_vec();
                    let a_exp = expand_to(&ta, &out_shape);
                    let b_exp = expand_to(&tb, &out_shape);
                    let db_full: Vec<f64> = adj
                        .data()
                        .iter()
                        .zip(a_exp.iter().zip(&b_exp))
                        .map(|(&d, (&av, &bv))| -d * av / (bv * bv))
                        .collect();
                    let db = reduce_to_shape(
                        &Tensor::new(out_shape, db_full),
                        self.value(*b).shape(),
                    );
                    self.add_adjoint(&mut adjoints, *b, db);
                }
                Op::Relu(x) => {
                    let g = self.elementwise_grad(*x, &adj, |v, d| if v > 0.0 { d } else { 0.0 });
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Gelu(x) => {
                    let g = self.elementwise_grad(*x, &adj, |v, d| d * gelu_derivative(v));
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Exp(x) => {
                    let y = self.value(Var(id)).clone();
                    let g = Tensor::new(
                        y.shape().to_vec(),
                        y.data().iter().zip(adj.data()).map(|(&yv, &d)| yv * d).collect(),
                    );
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Log(x) => {
                    let g = self.elementwise_grad(*x, &adj, |v, d| d / v);
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Sqrt(x) => {
                    let y = self.value(Var(id)).clone();
                    let g = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(adj.data())
                            .map(|(&yv, &d)| d / (2.0 * yv))
                            .collect(),
                    );
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Abs(x) => {
                    let g = self.elementwise_grad(*x, &adj, |v, d| d * sign(v));
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Neg(x) => {
                    let g = self.elementwise_grad(*x, &adj, |_, d| -d);
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    let g = self.elementwise_grad(*x, &adj, |_, d| c * d);
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::ClampMin(x, c) => {
                    let c = *c;
                    let g = self.elementwise_grad(*x, &adj, |v, d| if v > c { d } else { 0.0 });
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Sum(x) => {
                    let d = adj.item();
                    let g = Tensor::full(self.value(*x).shape().to_vec(), d);
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel() as f64;
                    let g = Tensor::full(self.value(*x).shape().to_vec(), adj.item() / n);
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Transpose(x) => {
                    self.add_adjoint(&mut adjoints, *x, adj.transposed());
                }
                Op::Reshape(x) => {
                    let g = adj.clone().reshaped(self.value(*x).shape().to_vec());
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::Concat { axis, parts } => {
                    let axis = *axis;
                    let parts = parts.clone();
                    if adj.rank() == 1 {
                        let mut off = 0;
                        for p in parts {
                            let n = self.value(p).numel();
                            let g = Tensor::from_vec(adj.data()[off..off + n].to_vec());
                            off += n;
                            if self.needs_grad(p) {
                                self.add_adjoint(&mut adjoints, p, g);
                            }
                        }
                    } else if axis == 0 {
                        let mut row_off = 0;
                        for p in parts {
                            let t = self.value(p);
                            let (r, c) = (t.rows(), t.cols());
                            let g = Tensor::new(
                                [r, c],
                                adj.data()[row_off * c..(row_off + r) * c].to_vec(),
                            );
                            row_off += r;
                            if self.needs_grad(p) {
                                self.add_adjoint(&mut adjoints, p, g);
                            }
                        }
                    } else {
                        let total_c = adj.cols();
                        let mut col_off = 0;
                        for p in parts {
                            let t = self.value(p);
                            let (r, c) = (t.rows(), t.cols());
                            let mut data = Vec::with_capacity(r * c);
                            for i in 0..r {
                                data.extend_from_slice(
                                    &adj.data()[i * total_c + col_off..i * total_c + col_off + c],
                                );
                            }
                            col_off += c;
                            if self.needs_grad(p) {
                                self.add_adjoint(&mut adjoints, p, Tensor::new([r, c], data));
                            }
                        }
                    }
                }
                Op::GatherRows { input, indices } => {
                    let t = self.value(*input);
                    let (r, c) = (t.rows(), t.cols());
                    let mut g = Tensor::zeros([r, c]);
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            g.data_mut()[i * c + j] += adj.data()[k * c + j];
                        }
                    }
                    self.add_adjoint(&mut adjoints, *input, g);
                }
                Op::SoftmaxRows(x) => {
                    let y = self.value(Var(id));
                    let (r, c) = (y.rows(), y.cols());
                    let mut g = Tensor::zeros([r, c]);
                    for i in 0..r {
                        let yr = y.row(i);
                        let dr = &adj.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(dr).map(|(&yv, &d)| yv * d).sum();
                        for j in 0..c {
                            g.data_mut()[i * c + j] = yr[j] * (dr[j] - dot);
                        }
                    }
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::L2Normalize(x) => {
                    let t = self.value(*x);
                    let s = t.frobenius_norm();
                    let denom = s + 1e-12;
                    let dot: f64 = t.data().iter().zip(adj.data()).map(|(&v, &d)| v * d).sum();
                    let s_safe = s.max(1e-300);
                    let g = Tensor::new(
                        t.shape().to_vec(),
                        t.data()
                            .iter()
                            .zip(adj.data())
                            .map(|(&v, &d)| d / denom - dot * v / (s_safe * denom * denom))
                            .collect(),
                    );
                    self.add_adjoint(&mut adjoints, *x, g);
                }
                Op::NormalizeAxis { input, axis, eps } => {
                    let g = normalize_axis_backward(self.value(*input), &adj, *axis, *eps);
                    self.add_adjoint(&mut adjoints, *input, g);
                }
                Op::StraightThrough(relaxed) => {
                    self.add_adjoint(&mut adjoints, *relaxed, adj.clone());
                }
            }
        }
        grads
    }

    fn add_adjoint(&self, adjoints: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut adjoints[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise_grad(&self, x: Var, adj: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(adj.data()).map(|(&v, &d)| f(v, d)).collect(),
        )
    }

    /// Push adjoint through a broadcasting binary op: map each adjoint entry,
    /// then sum over the axes the input was broadcast along.
    fn broadcast_back(
        &self,
        adjoints: &mut [Option<Tensor>],
        input: Var,
        adj: &Tensor,
        f: impl Fn(usize, usize, f64) -> f64,
        _out_id: usize,
    ) {
        if !self.needs_grad(input) {
            return;
        }
        let mapped = Tensor::new(
            adj.shape().to_vec(),
            adj.data()
                .iter()
                .enumerate()
                .map(|(i, &d)| f(i, 0, d))
                .collect(),
        );
        let g = reduce_to_shape(&mapped, self.value(input).shape());
        self.add_adjoint(adjoints, input, g);
    }

    /// Like `broadcast_back` but the map also sees the *other* operand's value
    /// expanded to the output grid (needed by mul/div).
    fn broadcast_back_with(
        &self,
        adjoints: &mut [Option<Tensor>],
        input: Var,
        adj: &Tensor,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        _out_id: usize,
    ) {
        if !self.needs_grad(input) {
            return;
        }
        let other_exp = expand_to(other, adj.shape());
        let mapped = Tensor::new(
            adj.shape().to_vec(),
            adj.data()
                .iter()
                .zip(&other_exp)
                .map(|(&d, &o)| f(o, d))
                .collect(),
        );
        let g = reduce_to_shape(&mapped, self.value(input).shape());
        self.add_adjoint(adjoints, input, g);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// View a shape as (rows, cols); rank-1 `[n]` reads as a row vector `[1, n]`.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("elementwise ops support rank 1 or 2, got shape {shape:?}"),
    }
}

fn broadcast_out_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    if a == b {
        return a.to_vec();
    }
    if a == [1] {
        return b.to_vec();
    }
    if b == [1] {
        return a.to_vec();
    }
    let (ra, ca) = as_2d(a);
    let (rb, cb) = as_2d(b);
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    assert!(
        ok(ra, rb) && ok(ca, cb),
        "{op}: shapes {a:?} and {b:?} do not broadcast"
    );
    let (r, c) = (ra.max(rb), ca.max(cb));
    if a.len() == 1 && b.len() == 1 {
        vec![c]
    } else {
        vec![r, c]
    }
}

/// Materialize `t` on the (2-D-viewed) output grid.
fn expand_to(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let (r, c) = as_2d(out_shape);
    if t.numel() == 1 {
        return vec![t.data()[0]; r * c];
    }
    let (tr, tc) = as_2d(t.shape());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let ti = if tr == 1 { 0 } else { i };
            let tj = if tc == 1 { 0 } else { j };
            out.push(t.data()[ti * tc + tj]);
        }
    }
    out
}

/// Sum `t` back down to `shape` (inverse of broadcasting).
fn reduce_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let numel: usize = shape.iter().product();
    if numel == 1 {
        return Tensor::new(shape.to_vec(), vec![t.data().iter().sum()]);
    }
    let (r, c) = as_2d(t.shape());
    let (sr, sc) = as_2d(shape);
    let mut out = vec![0.0; sr * sc];
    for i in 0..r {
        for j in 0..c {
            let oi = if sr == 1 { 0 } else { i };
            let oj = if sc == 1 { 0 } else { j };
            out[oi * sc + oj] += t.data()[i * c + j];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn broadcast_apply(op: &'static str, a: &Tensor, b: &Tensor) -> Tensor {
    let out_shape = broadcast_out_shape(op, a.shape(), b.shape());
    let av = expand_to(a, &out_shape);
    let bv = expand_to(b, &out_shape);
    let data = av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| match op {
            "add" => x + y,
            "sub" => x - y,
            "mul" => x * y,
            "div" => x / y,
            _ => unreachable!(),
        })
        .collect();
    Tensor::new(out_shape, data)
}

fn normalize_axis_value(t: &Tensor, axis: usize, eps: f64) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Tensor::zeros([r, c]);
    let (groups, len) = if axis == 0 { (c, r) } else { (r, c) };
    for g in 0..groups {
        let idx = |k: usize| if axis == 0 { k * c + g } else { g * c + k };
        let mean = (0..len).map(|k| t.data()[idx(k)]).sum::<f64>() / len as f64;
        let var = (0..len)
            .map(|k| {
                let d = t.data()[idx(k)] - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let sd = (var + eps).sqrt();
        for k in 0..len {
            out.data_mut()[idx(k)] = (t.data()[idx(k)] - mean) / sd;
        }
    }
    out
}

fn normalize_axis_backward(t: &Tensor, adj: &Tensor, axis: usize, eps: f64) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut g = Tensor::zeros([r, c]);
    let (groups, len) = if axis == 0 { (c, r) } else { (r, c) };
    for gi in 0..groups {
        let idx = |k: usize| if axis == 0 { k * c + gi } else { gi * c + k };
        let n = len as f64;
        let mean = (0..len).map(|k| t.data()[idx(k)]).sum::<f64>() / n;
        let var = (0..len)
            .map(|k| {
                let d = t.data()[idx(k)] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = (var + eps).sqrt();
        let y: Vec<f64> = (0..len).map(|k| (t.data()[idx(k)] - mean) / sd).collect();
        let d_mean = (0..len).map(|k| adj.data()[idx(k)]).sum::<f64>() / n;
        let d_dot_y =
            (0..len).map(|k| adj.data()[idx(k)] * y[k]).sum::<f64>() / n;
        for k in 0..len {
            g.data_mut()[idx(k)] = (adj.data()[idx(k)] - d_mean - y[k] * d_dot_y) / sd;
        }
    }
    g
}

fn accumulate_into(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        // loss = w * x with x = 3 fixed.
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new(&params);
        let wv = tape.param(w);
        let x = tape.input(Tensor::scalar(3.0));
        let loss = tape.mul(wv, x);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap().item(), 3.0);
    }

    #[test]
    fn square_gradient() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new(&params);
        let wv = tape.param(w);
        let loss = tape.mul(wv, wv);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // sum(x * x) at [1,2,3] -> 14, grad [2,4,6].
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new(&params);
        let xv = tape.param(x);
        let sq = tape.mul(xv, xv);
        let loss = tape.sum(sq);
        assert_eq!(tape.value(loss).item(), 14.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_values() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(3.0));
        for _ in 0..2 {
            let grads = {
                let mut tape = Tape::new(&params);
                let wv = tape.param(w);
                let loss = tape.mul(wv, wv);
                tape.backward(loss)
            };
            params.accumulate(&grads);
        }
        assert_eq!(params.get(w).grad.as_ref().unwrap().item(), 12.0);
        params.zero_grads();
        assert!(params.get(w).grad.is_none());
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_panics() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new(&params);
        let wv = tape.param(w);
        let _ = tape.backward(wv);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_panics() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.input(Tensor::zeros([2, 3]));
        let b = tape.input(Tensor::zeros([2, 3]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "log: nonpositive input")]
    fn log_domain_panics() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![1.0, 0.0]));
        let _ = tape.log(x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-5.0, 0.0, 5.0],
        ]));
        let y = tape.softmax_rows(x);
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut params = ParamSet::new();
        let r = params.add("relaxed", Tensor::from_rows(&[vec![0.4, 0.6], vec![0.6, 0.4]]));
        let mut tape = Tape::new(&params);
        let rv = tape.param(r);
        let hard = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let st = tape.straight_through(rv, hard.clone());
        assert_eq!(tape.value(st), &hard);
        // Gradient flows as if output were the relaxed matrix.
        let w = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let prod = tape.mul(st, w);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(r).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn broadcast_row_and_col() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let m = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let row = tape.input(Tensor::from_vec(vec![10.0, 20.0]));
        let col = tape.input(Tensor::new([2, 1], vec![100.0, 200.0]));
        let a = tape.add(m, row);
        assert_eq!(tape.value(a).data(), &[11.0, 22.0, 13.0, 24.0]);
        let b = tape.add(m, col);
        assert_eq!(tape.value(b).data(), &[101.0, 102.0, 203.0, 204.0]);
        // Outer broadcast [2,1] x [1,2].
        let r2 = tape.input(Tensor::new([1, 2], vec![1.0, 2.0]));
        let outer = tape.mul(col, r2);
        assert_eq!(tape.value(outer).data(), &[100.0, 200.0, 200.0, 400.0]);
    }

    #[test]
    fn no_grad_tape_returns_empty() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::no_grad(&params);
        let wv = tape.param(w);
        let loss = tape.mul(wv, wv);
        let grads = tape.backward(loss);
        assert!(grads.get(w).is_none());
    }
}
