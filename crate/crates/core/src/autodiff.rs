//! Define-by-run reverse-mode differentiation over a fixed set of matrix ops.
//!
//! Values are computed eagerly as nodes are appended. `Graph::forward` replays
//! the recorded ops against new leaf bindings, which is what the
//! finite-difference checker relies on.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Inputs to `sqrt` below this are clamped when differentiating.
const SQRT_GRAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Div,
    Scale,
    Offset,
    Transpose,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Hinge,
    SumAll,
    MeanColumns,
    MeanRows,
    RowL2Normalize,
    SoftmaxRows,
    SoftmaxCrossEntropy,
    SelectOffDiagonal,
    Detach,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Hinge(Var, f64),
    SumAll(Var),
    MeanColumns(Var),
    MeanRows(Var),
    RowL2Normalize(Var, f64),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy(Var, Matrix),
    SelectOffDiagonal(Var),
    Detach(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Hinge(..) => OpKind::Hinge,
            Op::SumAll(_) => OpKind::SumAll,
            Op::MeanColumns(_) => OpKind::MeanColumns,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::RowL2Normalize(..) => OpKind::RowL2Normalize,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::SoftmaxCrossEntropy(..) => OpKind::SoftmaxCrossEntropy,
            Op::SelectOffDiagonal(_) => OpKind::SelectOffDiagonal,
            Op::Detach(_) => OpKind::Detach,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::Div(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Hinge(a, _)
            | Op::SumAll(a)
            | Op::MeanColumns(a)
            | Op::MeanRows(a)
            | Op::RowL2Normalize(a, _)
            | Op::SoftmaxRows(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::SelectOffDiagonal(a)
            | Op::Detach(a) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// How the right operand of an elementwise binary op is stretched to the
/// left operand's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_of(a: (usize, usize), b: (usize, usize)) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if b == (1, 1) {
        Some(Broadcast::Scalar)
    } else if b == (1, a.1) {
        Some(Broadcast::Row)
    } else if b == (a.0, 1) {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn bget(b: &Matrix, mode: Broadcast, r: usize, c: usize) -> f64 {
    match mode {
        Broadcast::Same => b.get(r, c),
        Broadcast::Row => b.get(0, c),
        Broadcast::Col => b.get(r, 0),
        Broadcast::Scalar => b.get(0, 0),
    }
}

fn binary(a: &Matrix, b: &Matrix, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut data = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let ar = a.row(r);
        match mode {
            Broadcast::Same => data.extend(ar.iter().zip(b.row(r)).map(|(&x, &y)| f(x, y))),
            Broadcast::Row => data.extend(ar.iter().zip(b.data()).map(|(&x, &y)| f(x, y))),
            Broadcast::Col | Broadcast::Scalar => {
                let y = bget(b, mode, r, 0);
                data.extend(ar.iter().map(|&x| f(x, y)));
            }
        }
    }
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape as the left operand")
}

/// Sums a full-shape adjoint down to the broadcast operand's shape.
fn reduce_to(g: &Matrix, mode: Broadcast) -> Matrix {
    match mode {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Matrix::scalar(g.sum()),
        Broadcast::Row => {
            let mut out = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Broadcast::Col => {
            let mut out = Matrix::zeros(g.rows(), 1);
            for r in 0..g.rows() {
                out.set(r, 0, g.row(r).iter().sum());
            }
            out
        }
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn is_one_hot(y: &Matrix) -> bool {
    (0..y.rows()).all(|r| {
        let row = y.row(r);
        row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0
    })
}

/// Scalar form of the fused softmax cross-entropy, averaged over rows.
fn softmax_ce_value(logits: &Matrix, labels: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (j, &y) in labels.row(r).iter().enumerate() {
            if y != 0.0 {
                total -= y * (row[j] - lse);
            }
        }
    }
    total / logits.rows() as f64
}

/// Adjoints of the requires-grad leaves reached by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<Var, Matrix>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.remove(&v)
    }
}

/// Append-only tape of matrix operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op, self.nodes.len())?;
        let requires_grad = match op {
            Op::Detach(_) | Op::Leaf => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op, at: usize) -> Result<Matrix> {
        let val = |v: Var| &self.nodes[v.0].value;
        let kind = op.kind();
        let shape_err = |detail: String| {
Error::shape(format!("node #{at} ({kind})"), detail)
        };
        let bin_mode = |a: Var, b: Var| {
            broadcast_of(val(a).shape(), val(b).shape()).ok_or_else(|| {
                shape_err(format!(
                    "cannot broadcast {:?} onto {:?}",
                    val(b).shape(),
                    val(a).shape()
                ))
            })
        };
        Ok(match *op {
            Op::Leaf => unreachable!("leaves are bound, not evaluated"),
            Op::MatMul(a, b) => {
                let (x, y) = (val(a), val(b));
                if x.cols() != y.rows() {
                    return Err(shape_err(format!(
                        "left operand is {}x{}, right operand is {}x{}",
                        x.rows(),
                        x.cols(),
                        y.rows(),
                        y.cols()
                    )));
                }
                x.matmul(y)?
            }
            Op::Add(a, b) => binary(val(a), val(b), bin_mode(a, b)?, |x, y| x + y),
            Op::Sub(a, b) => binary(val(a), val(b), bin_mode(a, b)?, |x, y| x - y),
            Op::Hadamard(a, b) => binary(val(a), val(b), bin_mode(a, b)?, |x, y| x * y),
            Op::Div(a, b) => binary(val(a), val(b), bin_mode(a, b)?, |x, y| x / y),
            Op::Scale(a, s) => val(a).scale(s),
            Op::Offset(a, s) => val(a).map(|x| x + s),
            Op::Transpose(a) => val(a).transpose(),
            Op::Relu(a) => val(a).map(|x| x.max(0.0)),
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Sqrt(a) => val(a).map(f64::sqrt),
            Op::Square(a) => val(a).map(|x| x * x),
            Op::Hinge(a, gamma) => val(a).map(|x| (gamma - x).max(0.0)),
            Op::SumAll(a) => Matrix::scalar(val(a).sum()),
            Op::MeanColumns(a) => {
                if val(a).rows() == 0 {
                    return Err(shape_err("mean over zero rows".into()));
                }
                val(a).column_means()
            }
            Op::MeanRows(a) => {
                let x = val(a);
                if x.cols() == 0 {
                    return Err(shape_err("mean over zero columns".into()));
                }
                let mut out = Matrix::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    out.set(r, 0, x.row(r).iter().sum::<f64>() / x.cols() as f64);
                }
                out
            }
            Op::RowL2Normalize(a, eps) => val(a).row_l2_normalize(eps),
            Op::SoftmaxRows(a) => softmax_rows(val(a)),
            Op::SoftmaxCrossEntropy(a, ref labels) => {
                if val(a).shape() != labels.shape() {
                    return Err(shape_err(format!(
                        "logits {:?} vs labels {:?}",
                        val(a).shape(),
                        labels.shape()
                    )));
                }
                if val(a).rows() == 0 {
                    return Err(shape_err("empty batch".into()));
                }
                Matrix::scalar(softmax_ce_value(val(a), labels))
            }
            Op::SelectOffDiagonal(a) => {
                let x = val(a);
                if x.rows() != x.cols() {
                    return Err(shape_err(format!("needs a square input, got {:?}", x.shape())));
                }
                let mut out = x.clone();
                for i in 0..x.rows() {
                    out.set(i, i, 0.0);
                }
                out
            }
            Op::Detach(a) => val(a).clone(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// `a - b` with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Hadamard(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Offset(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    /// Elementwise `max(0, gamma - x)`.
    pub fn hinge(&mut self, a: Var, gamma: f64) -> Result<Var> {
        self.push(Op::Hinge(a, gamma))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    /// 1xC row of column means.
    pub fn mean_columns(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanColumns(a))
    }

    /// Nx1 column of row means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::RowL2Normalize(a, eps))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Mean cross-entropy of row-softmax(logits) against one-hot `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Matrix) -> Result<Var> {
        if !is_one_hot(labels) {
            return Err(Error::domain("softmax_cross_entropy", "labels are not one-hot"));
        }
        self.push(Op::SoftmaxCrossEntropy(logits, labels.clone()))
    }

    /// Zeroes the diagonal of a square matrix.
    pub fn select_off_diagonal(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SelectOffDiagonal(a))
    }

    /// Same value, no gradient linkage to `a`.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a))
    }

    /// Rebinds the given leaves and recomputes every downstream node in
    /// insertion order.
    pub fn forward(&mut self, bindings: &[(Var, Matrix)]) -> Result<()> {
        for (v, m) in bindings {
            let node = &mut self.nodes[v.0];
            if node.op.kind() != OpKind::Leaf {
                return Err(Error::domain(
                    "forward",
                    format!("node #{} is a {}, not a leaf", v.0, node.op.kind()),
                ));
            }
            if node.value.shape() != m.shape() {
                return Err(Error::shape(
                    format!("leaf #{}", v.0),
                    format!("bound {:?}, expected {:?}", m.shape(), node.value.shape()),
                ));
            }
            node.value = m.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op, i)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        let rv = &self.nodes[root.0].value;
        if rv.shape() != (1, 1) {
            return Err(Error::domain(
                "backward",
                format!("root must be 1x1, got {}x{}", rv.rows(), rv.cols()),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                grads.insert(Var(i), g);
            }
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(d.data())
                    .for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let mode = |a: Var, b: Var| broadcast_of(val(a).shape(), val(b).shape()).unwrap();

        match node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(a, g.matmul_nt(val(b)).unwrap());
                }
                if needs(b) {
                    acc(b, val(a).matmul_tn(g).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                if needs(b) {
                    acc(b, reduce_to(g, mode(a, b)));
                }
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                if needs(b) {
                    acc(b, reduce_to(g, mode(a, b)).scale(-1.0));
                }
            }
            Op::Hadamard(a, b) => {
                let m = mode(a, b);
                if needs(a) {
                    acc(a, binary(g, val(b), m, |g, y| g * y));
                }
                if needs(b) {
                    acc(b, reduce_to(&g.zip_map(val(a), |g, x| g * x), m));
                }
            }
            Op::Div(a, b) => {
                let m = mode(a, b);
                if needs(a) {
                    acc(a, binary(g, val(b), m, |g, y| g / y));
                }
                if needs(b) {
                    let ga = binary(&g.zip_map(val(a), |g, x| g * x), val(b), m, |gx, y| {
                        -gx / (y * y)
                    });
                    acc(b, reduce_to(&ga, m));
                }
            }
            Op::Scale(a, s) => acc(a, g.scale(s)),
            Op::Offset(a, _) => acc(a, g.clone()),
            Op::Transpose(a) => acc(a, g.transpose()),
            Op::Relu(a) => acc(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Tanh(a) => acc(a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
            Op::Exp(a) => acc(a, g.zip_map(&node.value, |g, y| g * y)),
            Op::Log(a) => acc(a, g.zip_map(val(a), |g, x| g / x)),
            Op::Sqrt(a) => acc(
                a,
                g.zip_map(val(a), |g, x| g * 0.5 / x.max(SQRT_GRAD_FLOOR).sqrt()),
            ),
            Op::Square(a) => acc(a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
            Op::Hinge(a, gamma) => {
                acc(a, g.zip_map(val(a), |g, x| if x < gamma { -g } else { 0.0 }))
            }
            Op::SumAll(a) => {
                let x = val(a);
                acc(a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::MeanColumns(a) => {
                let x = val(a);
                let n = x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv / n;
                    }
                }
                acc(a, d);
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let c = x.cols() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g.get(r, 0) / c;
                    d.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                acc(a, d);
            }
            Op::RowL2Normalize(a, eps) => {
                let x = val(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let den = n + eps;
                    if den == 0.0 {
                        continue;
                    }
                    let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                    let k = if n > 0.0 { dot / (n * den * den) } else { 0.0 };
                    for ((o, &xv), &gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = gv / den - xv * k;
                    }
                }
                acc(a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(a, d);
            }
            Op::SoftmaxCrossEntropy(a, ref labels) => {
                let p = softmax_rows(val(a));
                let k = g.item() / p.rows() as f64;
                acc(a, p.zip_map(labels, |p, y| (p - y) * k));
            }
            Op::SelectOffDiagonal(a) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    d.set(i, i, 0.0);
                }
                acc(a, d);
            }
        }
    }
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over the entries of
/// `leaf`, using central differences with step `h`.
pub fn fd_check(graph: &Graph, root: Var, leaf: Var, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::domain("fd_check", "step must be positive"));
    }
    let grads = graph.backward(root)?;
    let base = graph.value(leaf).clone();
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));

    let mut probe = graph.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        probe.forward(&[(leaf, plus)])?;
        let fp = probe.value(root).item();

        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        probe.forward(&[(leaf, minus)])?;
        let fm = probe.value(root).item();

        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    #[test]
    fn single_leaf_and_relu() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[[-1.0, 2.0]]));
        assert_eq!(g.value(x), &Matrix::from_rows(&[[-1.0, 2.0]]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &Matrix::from_rows(&[[0.0, 2.0]]));
    }

    #[test]
    fn nested_expression_matches_direct_evaluation() {
        let mut rng = RngState::new(1);
        let (a, b, c) = (
            rng.normal(3, 3, 0.0, 1.0),
            rng.normal(3, 3, 0.0, 1.0),
            rng.normal(3, 3, 0.0, 1.0),
        );
        let mut g = Graph::new();
        let (va, vb, vc) = (g.param(a.clone()), g.param(b.clone()), g.param(c.clone()));
        let ab = g.matmul(va, vb).unwrap();
        let out = g.add(ab, vc).unwrap();
        let direct = a.matmul(&b).unwrap().zip_map(&c, |x, y| x + y);
        assert_eq!(g.value(out), &direct);
    }

    #[test]
    fn simple_adjoints() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let s = g.sum_all(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &Matrix::ones(2, 2));

        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(3.0));
        let sq = g.hadamard(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &Matrix::scalar(6.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn unused_leaf_gets_zero_and_constants_are_absent() {
        let mut g = Graph::new();
        let x = g.param(Matrix::ones(2, 3));
        let unused = g.param(Matrix::ones(4, 1));
        let c = g.constant(Matrix::ones(2, 3));
        let y = g.hadamard(x, c).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Matrix::zeros(4, 1));
        assert!(!grads.contains(c));
    }

    #[test]
    fn detach_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[[1.5, -2.0]]));
        let t = g.tanh(x).unwrap();
        let d = g.detach(t).unwrap();
        let sq = g.square(d).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_fd_is_exact() {
        let mut g = Graph::new();
        let x = g.param(RngState::new(2).normal(3, 2, 0.0, 1.0));
        let s3 = g.scale(x, 3.0).unwrap();
        let root = g.sum_all(s3).unwrap();
        assert!(fd_check(&g, root, x, 1e-4).unwrap() <= 1e-10);
    }

    #[test]
    fn tanh_chain_fd() {
        let mut rng = RngState::new(4);
        let mut g = Graph::new();
        let x = g.param(rng.normal(4, 3, 0.0, 1.0));
        let w = g.param(rng.normal(3, 3, 0.0, 1.0));
        let h = g.matmul(x, w).unwrap();
        let t1 = g.tanh(h).unwrap();
        let t2 = g.tanh(t1).unwrap();
        let root = g.sum_all(t2).unwrap();
        assert!(fd_check(&g, root, x, 1e-4).unwrap() < 1e-4);
        assert!(fd_check(&g, root, w, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn forward_reports_offending_node() {
        let mut g = Graph::new();
        let a = g.param(Matrix::zeros(2, 3));
        let b = g.param(Matrix::zeros(3, 2));
        let _ = g.matmul(a, b).unwrap();
        let err = g.forward(&[(b, Matrix::zeros(4, 2))]).unwrap_err();
        assert!(err.to_string().contains("leaf"), "{err}");

        let bad = g.matmul(a, a).unwrap_err().to_string();
        assert!(bad.contains("MatMul") && bad.contains("2x3"), "{bad}");
    }

    #[test]
    fn ce_rejects_non_one_hot() {
        let mut g = Graph::new();
        let z = g.param(Matrix::zeros(2, 2));
        let y = Matrix::from_rows(&[[0.5, 0.5], [1.0, 0.0]]);
        assert!(g.softmax_cross_entropy(z, &y).is_err());
    }
}
