//! Reverse-mode gradient tape over dense matrices.
//!
//! Every primitive appends one node holding its forward value. Node ids are
//! assigned in creation order, so walking the node list backwards is a valid
//! reverse topological order.

use super::{Matrix, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by [`Tape::apply`].
///
/// | primitive | inputs | output |
/// |---|---|---|
/// | `MatMul` | `a: m×k`, `b: k×n` | `m×n` |
/// | `Add` | `a: m×n`, `b: m×n` or `1×n` (row bias) | `m×n` |
/// | `Hadamard` | `a: m×n`, `b: m×n` | `m×n` |
/// | `Scale(s)` | `a` | `s·a` |
/// | `ScaleBy` | `a`, `s: 1×1` | `s·a` |
/// | `ConcatCols` | `a_i: m×n_i` | `m×Σn_i` |
/// | `SliceCols` | `a: m×n` | `m×len` |
/// | `RowSoftmax` | `a: m×n` | `m×n` |
/// | `Tanh`, `Relu` | `a` | same shape |
/// | `MeanRows` | `a: m×n` | `1×n` |
/// | `SumAll` | `a` | `1×1` |
/// | `Transpose` | `a: m×n` | `n×m` |
/// | `MaskedFill` | `a: m×n` | `m×n` |
/// | `CrossEntropyLogits` | `logits: m×c` | `1×1` |
/// | `AttentionWeights` | `q: n×h`, `k: n×h`, `a: n×n` | `n×n` |
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Hadamard,
    Scale(f64),
    ScaleBy,
    ConcatCols,
    SliceCols { start: usize, len: usize },
    RowSoftmax,
    Tanh,
    Relu,
    MeanRows,
    SumAll,
    Transpose,
    /// Entries where `mask` is true are replaced by `value`; row-major mask.
    MaskedFill { mask: Vec<bool>, value: f64 },
    /// Mean negative log-likelihood over `(row, class)` pairs.
    CrossEntropyLogits { targets: Vec<(usize, usize)> },
    /// Row softmax of `scale · (q kᵀ) ⊙ a`, or of `scale · q kᵀ` with masked
    /// entries set to `-inf` when `mask` is given (`a` is then ignored).
    /// Computed one row at a time.
    AttentionWeights { scale: f64, mask: Option<Vec<bool>> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSoftmax(Var),
    Tanh(Var),
    Relu(Var),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    MaskedFill(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Matrix,
    },
    AttentionWeights {
        q: Var,
        k: Var,
        a: Var,
        scale: f64,
        mask: Option<Vec<bool>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
    /// Rows of a softmax output whose inputs were entirely `-inf`.
    masked_rows: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of all-masked rows a softmax node zeroed out.
    pub fn masked_rows(&self, v: Var) -> usize {
        self.nodes[v.0].masked_rows
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op, masked_rows: usize) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            masked_rows,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_arity(op: &'static str, inputs: &[Var], n: usize) -> Result<(), TensorError> {
        if inputs.len() != n {
            return Err(TensorError::Arity {
                op,
                expected: n,
                got: inputs.len(),
            });
        }
        Ok(())
    }

    /// Applies `prim` to `inputs`, recording it for backward when any input requires grad.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let requires_grad = self.any_grad(inputs);
        let mut masked_rows = 0;
        let (value, op, allow_neg_inf) = match prim {
            Primitive::MatMul => {
                Self::check_arity("matmul", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.cols() != b.rows() {
                    return Err(shape_err("matmul", a, b));
                }
                (a.matmul(b), Op::MatMul(inputs[0], inputs[1]), false)
            }
            Primitive::Add => {
                Self::check_arity("add", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() == b.shape() {
                    (a.zip_map(b, |x, y| x + y), Op::Add(inputs[0], inputs[1]), false)
                } else if b.rows() == 1 && b.cols() == a.cols() {
                    let mut out = a.clone();
                    for i in 0..out.rows() {
                        for (o, bias) in out.row_mut(i).iter_mut().zip(b.data()) {
                            *o += bias;
                        }
                    }
                    (out, Op::AddRow(inputs[0], inputs[1]), false)
                } else {
                    return Err(shape_err("add", a, b));
                }
            }
            Primitive::Hadamard => {
                Self::check_arity("hadamard", inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(shape_err("hadamard", a, b));
                }
                (a.zip_map(b, |x, y| x * y), Op::Hadamard(inputs[0], inputs[1]), false)
            }
            Primitive::Scale(s) => {
                Self::check_arity("scale", inputs, 1)?;
                (self.value(inputs[0]).scale(s), Op::Scale(inputs[0], s), false)
            }
            Primitive::ScaleBy => {
                Self::check_arity("scale_by", inputs, 2)?;
                let (a, s) = (self.value(inputs[0]), self.value(inputs[1]));
                if s.shape() != (1, 1) {
                    return Err(shape_err("scale_by", a, s));
                }
                (a.scale(s.get(0, 0)), Op::ScaleBy(inputs[0], inputs[1]), false)
            }
            Primitive::ConcatCols => {
                if inputs.is_empty() {
                    return Err(TensorError::Arity {
                        op: "concat_cols",
                        expected: 1,
                        got: 0,
                    });
                }
                let rows = self.value(inputs[0]).rows();
                if let Some(bad) = inputs.iter().find(|v| self.value(**v).rows() != rows) {
                    return Err(shape_err("concat_cols", self.value(inputs[0]), self.value(*bad)));
                }
                let cols: usize = inputs.iter().map(|v| self.value(*v).cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let mut offset = 0;
                    for v in inputs {
                        let part = self.value(*v);
                        out.row_mut(i)[offset..offset + part.cols()].copy_from_slice(part.row(i));
                        offset += part.cols();
                    }
                }
                (out, Op::ConcatCols(inputs.to_vec()), false)
            }
            Primitive::SliceCols { start, len } => {
                Self::check_arity("slice_cols", inputs, 1)?;
                let a = self.value(inputs[0]);
                if start + len > a.cols() {
                    return Err(TensorError::ShapeMismatch {
                        op: "slice_cols",
                        detail: format!("columns {start}..{} of {}x{}", start + len, a.rows(), a.cols()),
                    });
                }
                (a.cols_slice(start, len), Op::SliceCols(inputs[0], start), false)
            }
            Primitive::RowSoftmax => {
                Self::check_arity("row_softmax", inputs, 1)?;
                let a = self.value(inputs[0]);
                let (out, masked) = row_softmax(a);
                masked_rows = masked;
                (out, Op::RowSoftmax(inputs[0]), false)
            }
            Primitive::Tanh => {
                Self::check_arity("tanh", inputs, 1)?;
                (self.value(inputs[0]).map(f64::tanh), Op::Tanh(inputs[0]), false)
            }
            Primitive::Relu => {
                Self::check_arity("relu", inputs, 1)?;
                (self.value(inputs[0]).map(|v| v.max(0.0)), Op::Relu(inputs[0]), false)
            }
            Primitive::MeanRows => {
                Self::check_arity("mean_rows", inputs, 1)?;
                let a = self.value(inputs[0]);
                if a.rows() == 0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "mean_rows",
                        detail: "zero rows".into(),
                    });
                }
                let mut out = Matrix::zeros(1, a.cols());
                for i in 0..a.rows() {
                    for (o, x) in out.data_mut().iter_mut().zip(a.row(i)) {
                        *o += x;
                    }
                }
                let n = a.rows() as f64;
                (out.map(|v| v / n), Op::MeanRows(inputs[0]), false)
            }
            Primitive::SumAll => {
                Self::check_arity("sum_all", inputs, 1)?;
                let s = self.value(inputs[0]).sum();
                (Matrix::filled(1, 1, s), Op::SumAll(inputs[0]), false)
            }
            Primitive::Transpose => {
                Self::check_arity("transpose", inputs, 1)?;
                (self.value(inputs[0]).transpose(), Op::Transpose(inputs[0]), false)
            }
            Primitive::MaskedFill { mask, value } => {
                Self::check_arity("masked_fill", inputs, 1)?;
                let a = self.value(inputs[0]);
                if mask.len() != a.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "masked_fill",
                        detail: format!("mask of {} for {}x{}", mask.len(), a.rows(), a.cols()),
                    });
                }
                let mut out = a.clone();
                for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
                    if m {
                        *o = value;
                    }
                }
                (out, Op::MaskedFill(inputs[0], mask), value == f64::NEG_INFINITY)
            }
            Primitive::CrossEntropyLogits { targets } => {
                Self::check_arity("cross_entropy_logits", inputs, 1)?;
                let logits = self.value(inputs[0]);
                if targets.is_empty() {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy_logits",
                        detail: "no targets".into(),
                    });
                }
                if let Some(&(r, c)) = targets
                    .iter()
                    .find(|(r, c)| *r >= logits.rows() || *c >= logits.cols())
                {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy_logits",
                        detail: format!(
                            "target ({r}, {c}) outside {}x{} logits",
                            logits.rows(),
                            logits.cols()
                        ),
                    });
                }
                let (probs, _) = row_softmax(logits);
                let mut loss = 0.0;
                for &(r, c) in &targets {
                    let row = logits.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    loss += lse - row[c];
                }
                loss /= targets.len() as f64;
                (
                    Matrix::filled(1, 1, loss),
                    Op::CrossEntropy {
                        logits: inputs[0],
                        targets,
                        probs,
                    },
                    false,
                )
            }
            Primitive::AttentionWeights { scale, mask } => {
                Self::check_arity("attention_weights", inputs, 3)?;
                let (q, k, a) = (self.value(inputs[0]), self.value(inputs[1]), self.value(inputs[2]));
                let n = q.rows();
                if k.shape() != q.shape() {
                    return Err(shape_err("attention_weights", q, k));
                }
                if a.shape() != (n, n) {
                    return Err(shape_err("attention_weights", q, a));
                }
                if mask.as_ref().is_some_and(|m| m.len() != n * n) {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention_weights",
                        detail: format!("mask of {} for {n}x{n}", mask.as_ref().map_or(0, Vec::len)),
                    });
                }
                let mut out = Matrix::zeros(n, n);
                for i in 0..n {
                    let qi = q.row(i);
                    let row = out.row_mut(i);
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = match &mask {
                            Some(m) if m[i * n + j] => f64::NEG_INFINITY,
                            Some(_) => dot(qi, k.row(j)) * scale,
                            None => dot(qi, k.row(j)) * scale * a.get(i, j),
                        };
                    }
                    if softmax_in_place(row) {
                        masked_rows += 1;
                    }
                }
                let op = Op::AttentionWeights {
                    q: inputs[0],
                    k: inputs[1],
                    a: inputs[2],
                    scale,
                    mask,
                };
                (out, op, false)
            }
        };
        let ok = value
            .data()
            .iter()
            .all(|v| v.is_finite() || (allow_neg_inf && *v == f64::NEG_INFINITY));
        if !ok {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, requires_grad, op, masked_rows))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Hadamard, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::ScaleBy, &[a, s])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.apply(Primitive::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::SliceCols { start, len }, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::RowSoftmax, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MeanRows, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SumAll, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::MaskedFill { mask, value }, &[a])
    }

    /// See [`Primitive::AttentionWeights`].
    pub fn attention_weights(
        &mut self,
        q: Var,
        k: Var,
        a: Var,
        scale: f64,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        self.apply(Primitive::AttentionWeights { scale, mask }, &[q, k, a])
    }

    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: Vec<(usize, usize)>,
    ) -> Result<Var, TensorError> {
        self.apply(Primitive::CrossEntropyLogits { targets }, &[logits])
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf, then drops the
    /// recorded operations. Values stay readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.matmul_t(bv));
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, av.t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.zip_map(bv, |x, y| x * y);
                    let gb = g.zip_map(av, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::ScaleBy(a, s) => {
                    let av = self.value(*a);
                    let sv = self.value(*s).get(0, 0);
                    let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *s, Matrix::filled(1, 1, gs));
                    accumulate(&mut grads, *a, g.scale(sv));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.cols_slice(offset, w));
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |q, y| q * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |q, x| if x > 0.0 { q } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = rows as f64;
                    let ga = Matrix::from_fn(rows, cols, |_, j| g.get(0, j) / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::MaskedFill(a, mask) => {
                    let mut ga = g;
                    for (o, &m) in ga.data_mut().iter_mut().zip(mask) {
                        if m {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.get(0, 0) / targets.len() as f64;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for &(r, c) in targets {
                        for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += scale * p;
                        }
                        let v = gl.get(r, c) - scale;
                        gl.set(r, c, v);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::AttentionWeights { q, k, a, scale, mask } => {
                    let p = &node.value;
                    let (qv, kv, av) = (self.value(*q), self.value(*k), self.value(*a));
                    let (n, h) = qv.shape();
                    let want_a = mask.is_none() && self.requires_grad(*a);
                    let mut gq = Matrix::zeros(n, h);
                    let mut gk = Matrix::zeros(n, h);
                    let mut ga = if want_a { Some(Matrix::zeros(n, n)) } else { None };
                    let mut d_alpha = vec![0.0; n];
                    for i in 0..n {
                        let (pr, gr) = (p.row(i), g.row(i));
                        let inner: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let qi = qv.row(i);
                        for j in 0..n {
                            let ds = pr[j] * (gr[j] - inner);
                            d_alpha[j] = match mask {
                                Some(_) => ds * scale,
                                None => ds * scale * av.get(i, j),
                            };
                            if let Some(ga) = ga.as_mut() {
                                ga.set(i, j, ds * scale * dot(qi, kv.row(j)));
                            }
                        }
                        let gqi = gq.row_mut(i);
                        for (j, &da) in d_alpha.iter().enumerate() {
                            if da == 0.0 {
                                continue;
                            }
                            for (o, kj) in gqi.iter_mut().zip(kv.row(j)) {
                                *o += da * kj;
                            }
                            for (o, qc) in gk.row_mut(j).iter_mut().zip(qi) {
                                *o += da * qc;
                            }
                        }
                    }
                    if self.requires_grad(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.requires_grad(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if let Some(ga) = ga {
                        accumulate(&mut grads, *a, ga);
                    }
                }
            }
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
                node.requires_grad = false;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) | Op::AddRow(..) => "add",
        Op::Hadamard(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::ScaleBy(..) => "scale_by",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::RowSoftmax(..) => "row_softmax",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::MeanRows(..) => "mean_rows",
        Op::SumAll(..) => "sum_all",
        Op::Transpose(..) => "transpose",
        Op::MaskedFill(..) => "masked_fill",
        Op::CrossEntropy { .. } => "cross_entropy_logits",
        Op::AttentionWeights { .. } => "attention_weights",
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of one row in place; an all-`-inf` row becomes zeros and returns true.
fn softmax_in_place(row: &mut [f64]) -> bool {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return true;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
    false
}

/// Numerically stable row softmax. Rows that are entirely `-inf` come back as
/// zeros; the second value counts them.
pub fn row_softmax(a: &Matrix) -> (Matrix, usize) {
    let mut out = a.clone();
    let mut masked = 0;
    for i in 0..out.rows() {
        if softmax_in_place(out.row_mut(i)) {
            masked += 1;
        }
    }
    (out, masked)
}
