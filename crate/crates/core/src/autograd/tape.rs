use crate::error::{Error, Result};
use crate::model::{layer_norm_rows, layer_norm_stats, Activation, LayerNormParams};
use crate::numerics::{checked, exp, mat_mul, row_normalize, softmax_in_place, softmax_rows, Matrix};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Adds a `1 x cols` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    SoftmaxRows(Var),
    Exp(Var),
    RowNormalize(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Activation(Var, Activation),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// `-sum_i p_i log softmax(z)_i` of a `1 x n` logit row.
    CrossEntropy(Var, Vec<f64>),
    /// `0.5 ||x - target||^2` of a `1 x n` row.
    HalfSquaredDistance(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Reverse-mode record of one evaluation.
///
/// Nodes are appended in forward order and hold their computed values;
/// [`GradTape::backward`] walks them in exact reverse order. Only nodes that
/// depend on a leaf marked as requiring a gradient receive one.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on a
/// differentiated leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
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

    /// Records an input. `requires_grad` decides whether gradients flow to it.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.evaluate(&op)?;
        Ok(self.push(op, value))
    }

    pub fn mat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Hadamard(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.record(Op::RowNormalize(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.record(Op::Activation(a, act))
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.record(Op::SelectRows(a, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.record(Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.record(Op::ConcatCols(parts))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        self.record(Op::CrossEntropy(logits, target))
    }

    pub fn half_squared_distance(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        self.record(Op::HalfSquaredDistance(x, target))
    }

    fn evaluate(&self, op: &Op) -> Result<Matrix> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => Err(Error::Domain("leaves carry their own value".into())),
            Op::MatMul(a, b) => mat_mul(val(a), val(b)),
            Op::Transpose(a) => Ok(val(a).transpose()),
            Op::Add(a, b) => val(a).add(val(b)),
            Op::AddRow(a, b) => val(a).add_row(val(b)),
            Op::Scale(a, s) => val(a).scale(*s),
            Op::Hadamard(a, b) => val(a).hadamard(val(b)),
            Op::SoftmaxRows(a) => softmax_rows(val(a)),
            Op::Exp(a) => exp(val(a)),
            Op::RowNormalize(a) => row_normalize(val(a)),
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let ln = LayerNormParams {
                    gamma: val(gamma).clone(),
                    beta: val(beta).clone(),
                };
                layer_norm_rows(val(x), &ln, *eps)
            }
            Op::Activation(a, act) => checked("activation", val(a).map(|v| act.apply(v))),
            Op::SelectRows(a, idx) => val(a).select_rows(idx),
            Op::ConcatRows(parts) => {
                let refs: Vec<&Matrix> = parts.iter().map(val).collect();
                Matrix::concat_rows(&refs)
            }
            Op::ConcatCols(parts) => {
                let refs: Vec<&Matrix> = parts.iter().map(val).collect();
                Matrix::concat_cols(&refs)
            }
            Op::CrossEntropy(z, p) => {
                let z = val(z);
                if z.rows() != 1 || z.cols() != p.len() {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("logits {:?} for {} targets", z.shape(), p.len()),
                    ));
                }
                let lse = log_sum_exp(z.data());
                let loss = -z
                    .data()
                    .iter()
                    .zip(p)
                    .map(|(zi, pi)| pi * (zi - lse))
                    .sum::<f64>();
                Matrix::new(1, 1, vec![loss])
            }
            Op::HalfSquaredDistance(x, t) => {
                let x = val(x);
                if x.rows() != 1 || x.cols() != t.len() {
                    return Err(Error::shape(
                        "half_squared_distance",
                        format!("{:?} against target of length {}", x.shape(), t.len()),
                    ));
                }
                let v = 0.5
                    * x.data()
                        .iter()
                        .zip(t)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                Matrix::new(1, 1, vec![v])
            }
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => Ok(n.value.clone()),
                ref op => self.evaluate(op),
            })
            .collect()
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Matrix| accumulate(grads, v, d);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(*a, mat_mul(g, &val(b).transpose())?)?;
                }
                if wants(b) {
                    acc(*b, mat_mul(&val(a).transpose(), g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                if wants(a) {
                    acc(*a, g.clone())?;
                }
                if wants(b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    acc(*a, g.clone())?;
                }
                if wants(b) {
                    let mut col = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, v) in col.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    acc(*b, Matrix::row_vector(col)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)?)?,
            Op::Hadamard(a, b) => {
                if wants(a) {
                    acc(*a, g.hadamard(val(b))?)?;
                }
                if wants(b) {
                    acc(*b, g.hadamard(val(a))?)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let y = out.row(r);
                    let s: f64 = g.row(r).iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for (di, yi) in d.row_mut(r).iter_mut().zip(y) {
                        *di = yi * (*di - s);
                    }
                }
                acc(*a, d)?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(out)?)?,
            Op::RowNormalize(a) => {
                let x = val(a);
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let sum: f64 = x.row(r).iter().sum();
                    let y = out.row(r);
                    let s: f64 = g.row(r).iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for di in d.row_mut(r) {
                        *di = (*di - s) / sum;
                    }
                }
                acc(*a, d)?;
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = val(x);
                let gam = val(gamma).data();
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; xv.cols()];
                let mut dbeta = vec![0.0; xv.cols()];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mu, inv) = layer_norm_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let gr = g.row(r);
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                        dgamma[k] += gr[k] * xhat[k];
                        dbeta[k] += gr[k];
                    }
                }
                if wants(x) {
                    acc(*x, checked("layer_norm_backward", dx)?)?;
                }
                if wants(gamma) {
                    acc(*gamma, Matrix::row_vector(dgamma)?)?;
                }
                if wants(beta) {
                    acc(*beta, Matrix::row_vector(dbeta)?)?;
                }
            }
            Op::Activation(a, act) => {
                let x = val(a);
                let d = x.map(|v| act.derivative(v));
                acc(*a, g.hadamard(&d)?)?;
            }
            Op::SelectRows(a, idx) => {
                let src = val(a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        let idx: Vec<usize> = (start..start + rows).collect();
                        acc(*p, g.select_rows(&idx)?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        acc(*p, g.slice_cols(start, cols)?)?;
                    }
                    start += cols;
                }
            }
            Op::CrossEntropy(z, p) => {
                let mut probs = val(z).data().to_vec();
                softmax_in_place(&mut probs);
                let mass: f64 = p.iter().sum();
                let up = g.get(0, 0);
                let d = probs.iter().zip(p).map(|(q, pi)| up * (mass * q - pi)).collect();
                acc(*z, Matrix::row_vector(d)?)?;
            }
            Op::HalfSquaredDistance(x, t) => {
                let up = g.get(0, 0);
                let d = val(x).data().iter().zip(t).map(|(a, b)| up * (a - b)).collect();
                acc(*x, Matrix::row_vector(d)?)?;
            }
        }
        Ok(())
    }
}

/// `max + ln sum exp(z - max)`.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(g) => {
            if g.shape() != d.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("{:?} += {:?}", g.shape(), d.shape()),
                ));
            }
            for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
    Ok(())
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::SoftmaxRows(a)
        | Op::Exp(a)
        | Op::RowNormalize(a)
        | Op::Activation(a, _)
        | Op::SelectRows(a, _)
        | Op::CrossEntropy(a, _)
        | Op::HalfSquaredDistance(a, _) => vec![*a],
        Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
    }
}
