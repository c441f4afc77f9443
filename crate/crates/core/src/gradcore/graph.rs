//! Eager reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only arena. Every op evaluates immediately and
//! records its parents, so node indices are already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaves created with
//! [`Graph::param`] receive gradients; [`Graph::constant`] leaves and
//! everything computed only from constants are skipped during the sweep.

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    Cos(Var),
    Elu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Domain {
            op,
            detail: "result is not finite".into(),
        })
    }
}

fn dims(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn add_node(&mut self, op: Op) -> Result<Var> {
        let value = self.evaluate(&op)?;
        let requires_grad = self
            .parents(&op)
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::MulRow(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Square(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::MeanRows(a)
            | Op::MeanCols(a)
            | Op::Sum(a)
            | Op::Cos(a)
            | Op::Elu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::SelectRows(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn evaluate(&self, op: &Op) -> Result<Matrix> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not re-evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Add(a, b) => v(a).zip_map(v(b), "add", |x, y| x + y)?,
            Op::Sub(a, b) => v(a).zip_map(v(b), "sub", |x, y| x - y)?,
            Op::Mul(a, b) => v(a).zip_map(v(b), "mul", |x, y| x * y)?,
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::Offset(a, c) => v(a).map(|x| x + c),
            Op::MeanRows(a) => v(a).mean_rows(),
            Op::MeanCols(a) => v(a).mean_cols(),
            Op::Sum(a) => Matrix::scalar(v(a).sum()),
            Op::Cos(a) => v(a).map(f64::cos),
            Op::Elu(a) => v(a).map(elu),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Exp(a) => check_finite("exp", v(a).map(f64::exp))?,
            Op::Log(a) => {
                let x = v(a);
                if let Some(bad) = x.data().iter().find(|&&e| e <= 0.0 || e.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Op::Powf(a, p) => {
                let x = v(a);
                let integral = p.fract() == 0.0;
                if let Some(bad) = x
                    .data()
                    .iter()
                    .find(|&&e| (e < 0.0 && !integral) || (e == 0.0 && *p < 0.0))
                {
                    return Err(Error::Domain {
                        op: "powf",
                        detail: format!("{bad} raised to {p}"),
                    });
                }
                check_finite("powf", x.map(|e| e.powf(*p)))?
            }
            Op::ConcatCols(parts) => {
                let mats: Vec<&Matrix> = parts.iter().map(v).collect();
                Matrix::concat_cols(&mats)?
            }
            Op::SelectRows(a, idx) => v(a).select_rows(idx)?,
            Op::Transpose(a) => v(a).transpose(),
            Op::MulCol(a, c) => {
                let (x, col) = (v(a), v(c));
                if col.cols() != 1 || col.rows() != x.rows() {
                    return Err(dims("mul_col", x, col));
                }
                let mut out = x.clone();
                let cols = x.cols();
                for (row, &s) in out.data_mut().chunks_exact_mut(cols.max(1)).zip(col.data()) {
                    row.iter_mut().for_each(|e| *e *= s);
                }
                out
            }
            Op::MulRow(a, r) | Op::AddRow(a, r) => {
                let (x, row) = (v(a), v(r));
                if row.rows() != 1 || row.cols() != x.cols() {
                    return Err(dims("row_broadcast", x, row));
                }
                let mut out = x.clone();
                let cols = x.cols();
                let add = matches!(op, Op::AddRow(..));
                for chunk in out.data_mut().chunks_exact_mut(cols.max(1)) {
                    for (e, &s) in chunk.iter_mut().zip(row.data()) {
                        if add {
                            *e += s;
                        } else {
                            *e *= s;
                        }
                    }
                }
                out
            }
            Op::MulScalar(a, s) => {
                let (x, s) = (v(a), v(s));
                if !s.is_scalar() {
                    return Err(dims("mul_scalar", x, s));
                }
                let s = s.data()[0];
                x.map(|e| e * s)
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_node(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_node(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_node(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_node(Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.infallible(Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.infallible(Op::Scale(a, factor))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.infallible(Op::Offset(a, c))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.infallible(Op::MeanRows(a))
    }

    /// Mean over columns: `r x c -> r x 1`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        self.infallible(Op::MeanCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.infallible(Op::Sum(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.infallible(Op::Cos(a))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        self.infallible(Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.infallible(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.infallible(Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.add_node(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.add_node(Op::Log(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.add_node(Op::Powf(a, p))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.add_node(Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.add_node(Op::SelectRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.infallible(Op::Transpose(a))
    }

    /// `a (n x m)` scaled row-wise by `col (n x 1)`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.add_node(Op::MulCol(a, col))
    }

    /// `a (n x m)` scaled column-wise by `row (1 x m)`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.add_node(Op::MulRow(a, row))
    }

    /// `a (n x m)` plus `row (1 x m)` on every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.add_node(Op::AddRow(a, row))
    }

    /// `a` times the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.add_node(Op::MulScalar(a, s))
    }

    fn infallible(&mut self, op: Op) -> Var {
        self.add_node(op)
            .expect("op cannot fail on a well-formed operand")
    }

    /// Replaces the value of a leaf. Call [`Graph::recompute`] afterwards.
    pub fn set_value(&mut self, leaf: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("only leaves can be overwritten".into()));
        }
        node.value.same_shape(&value, "set_value")?;
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.evaluate(&op)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Populates `grad` on every node reachable from the scalar `output`.
    ///
    /// Existing gradients are discarded first, so repeated calls agree.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 output, got {out_shape:?}"
            )));
        }
        self.zero_grad();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.nodes[output.0].grad = Some(Matrix::scalar(1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &upstream)?;
            self.nodes[i].grad = Some(upstream);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: &Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, up: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let val = |x: &Var| &self.nodes[x.0].value;
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    out.push((*a, up.matmul_nt(val(b))?));
                }
                if self.needs(b) {
                    out.push((*b, val(a).matmul_tn(up)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, up.clone()));
                out.push((*b, up.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, up.clone()));
                if self.needs(b) {
                    out.push((*b, up.scaled(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    out.push((*a, up.zip_map(val(b), "mul", |g, x| g * x)?));
                }
                if self.needs(b) {
                    out.push((*b, up.zip_map(val(a), "mul", |g, x| g * x)?));
                }
            }
            Op::Square(a) => out.push((*a, up.zip_map(val(a), "square", |g, x| 2.0 * x * g)?)),
            Op::Scale(a, c) => out.push((*a, up.scaled(*c))),
            Op::Offset(a, _) => out.push((*a, up.clone())),
            Op::MeanRows(a) => {
                let x = val(a);
                let n = x.rows() as f64;
                out.push((
                    *a,
                    Matrix::from_fn(x.rows(), x.cols(), |_, c| up.get(0, c) / n),
                ));
            }
            Op::MeanCols(a) => {
                let x = val(a);
                let n = x.cols() as f64;
                out.push((
                    *a,
                    Matrix::from_fn(x.rows(), x.cols(), |r, _| up.get(r, 0) / n),
                ));
            }
            Op::Sum(a) => {
                let x = val(a);
                out.push((*a, Matrix::filled(x.rows(), x.cols(), up.get(0, 0))));
            }
            Op::Cos(a) => out.push((*a, up.zip_map(val(a), "cos", |g, x| -x.sin() * g)?)),
            Op::Elu(a) => out.push((
                *a,
                up.zip_map(val(a), "elu", |g, x| if x >= 0.0 { g } else { g * x.exp() })?,
            )),
            Op::Sigmoid(a) => out.push((*a, up.zip_map(y, "sigmoid", |g, s| g * s * (1.0 - s))?)),
            Op::Softplus(a) => {
                out.push((*a, up.zip_map(val(a), "softplus", |g, x| g * sigmoid(x))?))
            }
            Op::Exp(a) => out.push((*a, up.zip_map(y, "exp", |g, e| g * e)?)),
            Op::Log(a) => out.push((*a, up.zip_map(val(a), "log", |g, x| g / x)?)),
            Op::Powf(a, p) => {
                let p = *p;
                out.push((
                    *a,
                    up.zip_map(val(a), "powf", |g, x| g * p * x.powf(p - 1.0))?,
                ));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for part in parts {
                    let w = val(part).cols();
                    if self.needs(part) {
                        let idx: Vec<usize> = (start..start + w).collect();
                        out.push((*part, up.select_cols(&idx)?));
                    }
                    start += w;
                }
            }
            Op::SelectRows(a, idx) => {
                let x = val(a);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for (k, &r) in idx.iter().enumerate() {
                    let src = up.row_slice(k);
                    let dst = &mut g.data_mut()[r * cols..(r + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                out.push((*a, g));
            }
            Op::Transpose(a) => out.push((*a, up.transpose())),
            Op::MulCol(a, c) => {
                let (x, col) = (val(a), val(c));
                let cols = x.cols();
                if self.needs(a) {
                    let mut g = up.clone();
                    for (row, &s) in g.data_mut().chunks_exact_mut(cols.max(1)).zip(col.data()) {
                        row.iter_mut().for_each(|e| *e *= s);
                    }
                    out.push((*a, g));
                }
                if self.needs(c) {
                    let g: Vec<f64> = (0..x.rows())
                        .map(|r| {
                            up.row_slice(r)
                                .iter()
                                .zip(x.row_slice(r))
                                .fold(0.0, |acc, (u, v)| acc + u * v)
                        })
                        .collect();
                    out.push((*c, Matrix::column(g)));
                }
            }
            Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                if self.needs(a) {
                    let mut g = up.clone();
                    for chunk in g.data_mut().chunks_exact_mut(x.cols().max(1)) {
                        for (e, &s) in chunk.iter_mut().zip(row.data()) {
                            *e *= s;
                        }
                    }
                    out.push((*a, g));
                }
                if self.needs(r) {
                    let prod = up.zip_map(x, "mul_row", |g, v| g * v)?;
                    out.push((*r, prod.mean_rows().scaled(x.rows() as f64)));
                }
            }
            Op::AddRow(a, r) => {
                out.push((*a, up.clone()));
                if self.needs(r) {
                    let rows = up.rows() as f64;
                    out.push((*r, up.mean_rows().scaled(rows)));
                }
            }
            Op::MulScalar(a, s) => {
                let (x, sv) = (val(a), val(s));
                if self.needs(a) {
                    out.push((*a, up.scaled(sv.data()[0])));
                }
                if self.needs(s) {
                    let dot = up
                        .data()
                        .iter()
                        .zip(x.data())
                        .fold(0.0, |acc, (g, v)| acc + g * v);
                    out.push((*s, Matrix::scalar(dot)));
                }
            }
        }
        Ok(out)
    }
}
