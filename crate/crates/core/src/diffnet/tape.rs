//! Reverse-mode gradient tape over dense f64 values.
//!
//! Every recorded value is a [`DMatrix<f64>`]; scalars are 1x1 and column
//! vectors are nx1. Nodes are appended in evaluation order, so the node index
//! order is already a topological order and a single reverse sweep computes
//! exact adjoints. A node only receives an adjoint buffer if some parameter
//! leaf is reachable through it, which keeps constant subexpressions cheap.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Backward rule for an operation the tape does not know how to
/// differentiate itself (e.g. plant dynamics with analytic Jacobians).
///
/// The forward value is computed by the caller at record time; only the
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    /// Adjoints of each input given the input values and the upstream adjoint.
    fn backward(&self, inputs: &[DMatrix<f64>], upstream: &DMatrix<f64>) -> Vec<DMatrix<f64>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    EMul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    Sum(usize),
    Dot(usize, usize),
    Sqrt(usize),
    ScaleByVar(usize, usize), // (scalar node, matrix node)
    Inverse(usize),
    ConcatRows(Vec<usize>),
    Column(usize, usize),
    HStackCols(Vec<usize>),
    Reshape(usize),
    Diag(usize),
    Custom(Vec<usize>, Arc<dyn CustomOp>),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Single-writer: one recording/backward pass
/// at a time.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Record a non-differentiable input.
    pub fn constant(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_vec(&self, v: &nalgebra::DVector<f64>) -> Var<'_> {
        self.constant(DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
    }

    pub fn scalar(&self, s: f64) -> Var<'_> {
        self.constant(DMatrix::from_element(1, 1, s))
    }

    /// Record a differentiable leaf (parameter).
    pub fn param(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Record a value whose backward rule is supplied by `op`.
    pub fn custom(&self, inputs: &[Var<'_>], value: DMatrix<f64>, op: Arc<dyn CustomOp>) -> Var<'_> {
        let needs = inputs.iter().any(|v| self.needs_grad(v.idx));
        let idxs = inputs.iter().map(|v| v.idx).collect();
        self.push(value, Op::Custom(idxs, op), needs)
    }

    fn needs_grad(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn value_clone(&self, idx: usize) -> DMatrix<f64> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape(&self, idx: usize) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        nodes[idx].value.shape()
    }

    /// Reverse sweep from a scalar seed. Visits each node exactly once.
    pub fn backward(&self, seed: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (r, c) = nodes[seed.idx].value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarSeed { rows: r, cols: c });
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; nodes.len()];
        grads[seed.idx] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=seed.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let add = |grads: &mut Vec<Option<DMatrix<f64>>>, i: usize, inc: DMatrix<f64>| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += inc,
                    slot @ None => *slot = Some(inc),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // keep the adjoint for extraction
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    add(&mut grads, *a, g.clone());
                    add(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    add(&mut grads, *a, g.clone());
                    add(&mut grads, *b, -g);
                }
                Op::Neg(a) => add(&mut grads, *a, -g),
                Op::Scale(a, s) => add(&mut grads, *a, g * *s),
                Op::AddScalar(a) => add(&mut grads, *a, g),
                Op::EMul(a, b) => {
                    add(&mut grads, *a, g.component_mul(&nodes[*b].value));
                    add(&mut grads, *b, g.component_mul(&nodes[*a].value));
                }
                Op::MatMul(a, b) => {
                    add(&mut grads, *a, &g * nodes[*b].value.transpose());
                    add(&mut grads, *b, nodes[*a].value.transpose() * &g);
                }
                Op::Transpose(a) => add(&mut grads, *a, g.transpose()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    add(&mut grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    add(&mut grads, *a, g.zip_map(x, |gi, xi| gi * sigmoid(xi)));
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    add(
                        &mut grads,
                        *a,
                        g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
                    );
                }
                Op::Sum(a) => {
                    let (ra, ca) = nodes[*a].value.shape();
                    add(&mut grads, *a, DMatrix::from_element(ra, ca, g[(0, 0)]));
                }
                Op::Dot(a, b) => {
                    let s = g[(0, 0)];
                    add(&mut grads, *a, &nodes[*b].value * s);
                    add(&mut grads, *b, &nodes[*a].value * s);
                }
                Op::Sqrt(a) => {
                    // subgradient 0 at the origin so Frobenius-norm terms
                    // stay finite when the argument vanishes
                    let y = &node.value;
                    add(
                        &mut grads,
                        *a,
                        g.zip_map(y, |gi, yi| if yi > 1e-150 { 0.5 * gi / yi } else { 0.0 }),
                    );
                }
                Op::ScaleByVar(s, a) => {
                    let sval = nodes[*s].value[(0, 0)];
                    add(
                        &mut grads,
                        *s,
                        DMatrix::from_element(1, 1, g.dot(&nodes[*a].value)),
                    );
                    add(&mut grads, *a, g * sval);
                }
                Op::Inverse(a) => {
                    // d(A^{-1}) = -A^{-1} dA A^{-1}
                    let w_t = node.value.transpose();
                    add(&mut grads, *a, -(&w_t * &g * &w_t));
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let rp = nodes[p].value.nrows();
                        add(&mut grads, p, g.rows(row, rp).into_owned());
                        row += rp;
                    }
                }
                Op::Column(a, j) => {
                    let (ra, ca) = nodes[*a].value.shape();
                    let mut ga = DMatrix::zeros(ra, ca);
                    ga.column_mut(*j).copy_from(&g.column(0));
                    add(&mut grads, *a, ga);
                }
                Op::HStackCols(cols) => {
                    for (j, &p) in cols.iter().enumerate() {
                        let col = DMatrix::from_column_slice(g.nrows(), 1, g.column(j).as_slice());
                        add(&mut grads, p, col);
                    }
                }
                Op::Reshape(a) => {
                    let (ra, ca) = nodes[*a].value.shape();
                    let ga = g.reshape_generic(nalgebra::Dyn(ra), nalgebra::Dyn(ca));
                    add(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let k = nodes[*a].value.nrows();
                    let mut ga = DMatrix::zeros(k, k);
                    for i in 0..k {
                        ga[(i, i)] = g[(i, 0)];
                    }
                    add(&mut grads, *a, ga);
                }
                Op::Custom(inputs, op) => {
                    let vals: Vec<DMatrix<f64>> =
                        inputs.iter().map(|&i| nodes[i].value.clone()).collect();
                    let incs = op.backward(&vals, &g);
                    debug_assert_eq!(incs.len(), inputs.len());
                    for (&i, inc) in inputs.iter().zip(incs) {
                        add(&mut grads, i, inc);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Adjoint of `var`; zero if the value never influenced the seed.
    pub fn wrt(&self, var: Var<'_>) -> DMatrix<f64> {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.tape.shape(var.idx);
                DMatrix::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    pub fn value(&self) -> DMatrix<f64> {
        self.tape.value_clone(self.idx)
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.tape.nodes.borrow();
        debug_assert_eq!(v[self.idx].value.shape(), (1, 1));
        v[self.idx].value[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape(self.idx)
    }

    fn unary(self, value: DMatrix<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs_grad(self.idx);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: DMatrix<f64>, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.idx].value;
        let b = &nodes[rhs.idx].value;
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let v = a * b;
        drop(nodes);
        self.binary(rhs, v, Op::MatMul(self.idx, rhs.idx))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.transpose();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn emul(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let v = nodes[self.idx].value.component_mul(&nodes[rhs.idx].value);
        drop(nodes);
        self.binary(rhs, v, Op::EMul(self.idx, rhs.idx))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(f64::tanh);
        self.unary(v, Op::Tanh(self.idx))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx]
            .value
            .map(|x| if x > 30.0 { x } else { x.exp().ln_1p() });
        self.unary(v, Op::Softplus(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.idx))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.idx].value.sum();
        self.unary(DMatrix::from_element(1, 1, s), Op::Sum(self.idx))
    }

    pub fn dot(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let s = nodes[self.idx].value.dot(&nodes[rhs.idx].value);
        drop(nodes);
        self.binary(rhs, DMatrix::from_element(1, 1, s), Op::Dot(self.idx, rhs.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.idx))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = &self.tape.nodes.borrow()[self.idx].value * s;
        self.unary(v, Op::Scale(self.idx, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.tape.nodes.borrow()[self.idx].value.add_scalar(s);
        self.unary(v, Op::AddScalar(self.idx))
    }

    /// Multiply a matrix value by a 1x1 tape scalar.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[s.idx].value.shape(), (1, 1));
        let v = &nodes[self.idx].value * nodes[s.idx].value[(0, 0)];
        drop(nodes);
        s.binary(self, v, Op::ScaleByVar(s.idx, self.idx))
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn spd_inverse(self) -> Var<'t> {
        let a = self.tape.nodes.borrow()[self.idx].value.clone();
        let inv = a
            .clone()
            .cholesky()
            .map(|ch| ch.inverse())
            .or_else(|| a.try_inverse())
            .expect("spd_inverse: matrix is singular");
        self.unary(inv, Op::Inverse(self.idx))
    }

    /// Column-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let a = self.tape.nodes.borrow()[self.idx].value.clone();
        assert_eq!(a.len(), rows * cols, "reshape size mismatch");
        let v = a.reshape_generic(nalgebra::Dyn(rows), nalgebra::Dyn(cols));
        self.unary(v, Op::Reshape(self.idx))
    }

    pub fn column(self, j: usize) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.idx].value;
        let v = DMatrix::from_column_slice(a.nrows(), 1, a.column(j).as_slice());
        drop(nodes);
        self.unary(v, Op::Column(self.idx, j))
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.idx].value;
        assert_eq!(a.nrows(), a.ncols(), "diag needs a square matrix");
        let v = DMatrix::from_fn(a.nrows(), 1, |i, _| a[(i, i)]);
        drop(nodes);
        self.unary(v, Op::Diag(self.idx))
    }

    /// `X + X^T`.
    pub fn sym(self) -> Var<'t> {
        self + self.t()
    }
}

/// Stack column vectors vertically.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let nodes = tape.nodes.borrow();
    let total: usize = parts.iter().map(|p| nodes[p.idx].value.nrows()).sum();
    let mut v = DMatrix::zeros(total, 1);
    let mut row = 0;
    for p in parts {
        let val = &nodes[p.idx].value;
        debug_assert_eq!(val.ncols(), 1);
        v.rows_mut(row, val.nrows()).copy_from(val);
        row += val.nrows();
    }
    let needs = parts.iter().any(|p| nodes[p.idx].needs_grad);
    drop(nodes);
    tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()), needs)
}

/// Assemble a matrix from column vectors.
pub fn hstack_cols<'t>(tape: &'t Tape, cols: &[Var<'t>]) -> Var<'t> {
    assert!(!cols.is_empty());
    let nodes = tape.nodes.borrow();
    let rows = nodes[cols[0].idx].value.nrows();
    let mut v = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        let val = &nodes[c.idx].value;
        debug_assert_eq!(val.shape(), (rows, 1));
        v.column_mut(j).copy_from(&val.column(0));
    }
    let needs = cols.iter().any(|c| nodes[c.idx].needs_grad);
    drop(nodes);
    tape.push(v, Op::HStackCols(cols.iter().map(|c| c.idx).collect()), needs)
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value + &nodes[rhs.idx].value;
        drop(nodes);
        self.binary(rhs, v, Op::Add(self.idx, rhs.idx))
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value - &nodes[rhs.idx].value;
        drop(nodes);
        self.binary(rhs, v, Op::Sub(self.idx, rhs.idx))
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -&self.tape.nodes.borrow()[self.idx].value;
        self.unary(v, Op::Neg(self.idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_element(1, 1, 3.0));
        let y = x.emul(x);
        let grads = tape.backward(y).unwrap();
        assert_relative_eq!(grads.wrt(x)[(0, 0)], 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_element(1, 1, 0.0));
        let y = x.tanh();
        let grads = tape.backward(y).unwrap();
        assert_relative_eq!(grads.wrt(x)[(0, 0)], 1.0);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::zeros(2, 2));
        let y = x.tanh();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarSeed { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn matmul_gradients() {
        // d/dA tr-ish: loss = sum(A*B)
        let tape = Tape::new();
        let a = tape.param(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let loss = a.matmul(b).sum();
        let grads = tape.backward(loss).unwrap();
        // grad_A = ones * B^T
        let expected = DMatrix::from_element(2, 2, 1.0) * b.value().transpose();
        assert_relative_eq!(grads.wrt(a), expected, epsilon = 1e-12);
    }

    #[test]
    fn unused_parameter_has_zero_adjoint() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_element(1, 1, 2.0));
        let unused = tape.param(DMatrix::from_element(3, 1, 1.0));
        let y = x.emul(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), DMatrix::zeros(3, 1));
    }

    #[test]
    fn inverse_gradient_matches_identity() {
        // loss = sum(A^{-1}); compare against central finite differences
        let tape = Tape::new();
        let a0 = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let a = tape.param(a0.clone());
        let loss = a.spd_inverse().sum();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(a);

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut ap = a0.clone();
                let mut am = a0.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                let fd = (ap.try_inverse().unwrap().sum() - am.try_inverse().unwrap().sum())
                    / (2.0 * h);
                assert_relative_eq!(g[(i, j)], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn reshape_round_trips_column_major() {
        let tape = Tape::new();
        let v = tape.param(DMatrix::from_column_slice(6, 1, &[1., 2., 3., 4., 5., 6.]));
        let m = v.reshape(2, 3);
        // column-major fill: first column is [1, 2]
        assert_eq!(m.value()[(0, 0)], 1.0);
        assert_eq!(m.value()[(1, 0)], 2.0);
        assert_eq!(m.value()[(0, 1)], 3.0);
        let loss = m.emul(m).sum();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(v);
        for k in 0..6 {
            assert_relative_eq!(g[(k, 0)], 2.0 * (k as f64 + 1.0));
        }
    }
}
