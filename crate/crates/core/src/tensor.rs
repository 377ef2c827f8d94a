//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Values are 2-D
//! (`rows × cols`, row-major); scalars are `1 × 1` and vectors are single
//! rows. [`Tape::backward`] walks the tape once in reverse and returns the
//! adjoint of every leaf created with [`Tape::leaf`]. Intermediate adjoints
//! are consumed on the way; constants never receive gradients.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiffTensor(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    ColSums(usize),
    RowSums(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    Reshape(usize, usize, usize),
}

impl Op {
    fn any_input(&self, mut pred: impl FnMut(usize) -> bool) -> bool {
        match self {
            Op::Leaf | Op::Constant => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleBy(a, b) => pred(*a) || pred(*b),
            Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Recip(x)
            | Op::Clamp(x, _, _)
            | Op::SoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ColSums(x)
            | Op::RowSums(x)
            | Op::Transpose(x)
            | Op::Reshape(x, _, _) => pred(*x),
            Op::ConcatCols(ids) | Op::ConcatRows(ids) => ids.iter().any(|&i| pred(i)),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `t` is not a leaf, is a constant, or does not influence
    /// the loss.
    pub fn get(&self, t: DiffTensor) -> Option<&Matrix> {
        self.grads.get(t.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros of `shape` for unreached nodes.
    pub fn get_or_zeros(&self, t: DiffTensor, shape: (usize, usize)) -> Matrix {
        self.get(t).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

fn shape_of(m: &Matrix) -> (usize, usize) {
    m.dim()
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

    /// Drops all nodes while keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Matrix) -> DiffTensor {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> DiffTensor {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, t: DiffTensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: DiffTensor) -> (usize, usize) {
        shape_of(self.value(t))
    }

    /// Value of a `1 × 1` tensor.
    pub fn scalar(&self, t: DiffTensor) -> Result<f64> {
        let v = self.value(t);
        if v.dim() != (1, 1) {
            return Err(Error::Shape {
                op: "scalar",
                left: v.dim(),
                right: (1, 1),
            });
        }
        Ok(v[[0, 0]])
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> DiffTensor {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        DiffTensor(self.nodes.len() - 1)
    }

    /// Evaluates `op` on current input values and appends the result.
    fn record(&mut self, op: Op) -> DiffTensor {
        let value = self.eval(&op);
        let needs = op.any_input(|i| self.nodes[i].needs_grad);
        self.push(value, op, needs)
    }

    /// Forward value of `op` from the values of its inputs. Shapes were
    /// checked when the op was recorded.
    fn eval(&self, op: &Op) -> Matrix {
        let v = |i: usize| &self.nodes[i].value;
        match *op {
            Op::Leaf | Op::Constant => unreachable!("leaves carry their own values"),
            Op::MatMul(a, b) => v(a).dot(v(b)),
            Op::Add(a, b) | Op::AddRow(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) | Op::ScaleRows(a, b) => v(a) * v(b),
            Op::ScaleBy(x, s) => v(x) * v(s)[[0, 0]],
            Op::Scale(x, c) => v(x) * c,
            Op::Offset(x, c) => v(x) + c,
            Op::Relu(x) => v(x).mapv(|a| a.max(0.0)),
            Op::Sigmoid(x) => v(x).mapv(sigmoid),
            Op::Exp(x) => v(x).mapv(f64::exp),
            Op::Ln(x) => v(x).mapv(f64::ln),
            Op::Sqrt(x) => v(x).mapv(f64::sqrt),
            Op::Recip(x) => v(x).mapv(f64::recip),
            Op::Clamp(x, lo, hi) => v(x).mapv(|a| a.clamp(lo, hi)),
            Op::SoftmaxRows(x) => {
                let mut out = v(x).clone();
                for mut row in out.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|a| (a - max).exp());
                    let total = row.sum();
                    row /= total;
                }
                out
            }
            Op::Sum(x) => Matrix::from_elem((1, 1), v(x).sum()),
            Op::Mean(x) => Matrix::from_elem((1, 1), v(x).sum() / v(x).len().max(1) as f64),
            Op::ColSums(x) => v(x).sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::RowSums(x) => v(x).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::ConcatCols(ref ids) | Op::ConcatRows(ref ids) => {
                let axis = if matches!(op, Op::ConcatRows(_)) { Axis(0) } else { Axis(1) };
                let views: Vec<_> = ids.iter().map(|&i| v(i).view()).collect();
                ndarray::concatenate(axis, &views).expect("shapes checked")
            }
            Op::Transpose(x) => v(x).t().to_owned(),
            Op::Reshape(x, rows, cols) => {
                let flat: Vec<f64> = v(x).iter().copied().collect();
                Matrix::from_shape_vec((rows, cols), flat).expect("size checked")
            }
        }
    }

    /// Adds `delta` to one entry of leaf `t`, recomputes every node that
    /// depends on it, runs `f`, then restores all touched values.
    pub fn with_perturbed<R>(
        &mut self,
        t: DiffTensor,
        idx: (usize, usize),
        delta: f64,
        f: impl FnOnce(&Tape) -> R,
    ) -> R {
        let n = self.nodes.len();
        let mut dirty = vec![false; n];
        dirty[t.0] = true;
        let original = self.nodes[t.0].value[idx];
        self.nodes[t.0].value[idx] = original + delta;
        let mut saved: Vec<(usize, Matrix)> = Vec::new();
        for i in (t.0 + 1)..n {
            if self.nodes[i].op.any_input(|j| dirty[j]) {
                dirty[i] = true;
                let fresh = match self.nodes[i].op {
                    // One changed factor entry moves one row or column.
                    Op::MatMul(a, b) if b == t.0 && !dirty[a] => {
                        let mut out = self.nodes[i].value.clone();
                        out.column_mut(idx.1)
                            .scaled_add(delta, &self.nodes[a].value.column(idx.0));
                        out
                    }
                    Op::MatMul(a, b) if a == t.0 && !dirty[b] => {
                        let mut out = self.nodes[i].value.clone();
                        out.row_mut(idx.0).scaled_add(delta, &self.nodes[b].value.row(idx.1));
                        out
                    }
                    ref op => self.eval(op),
                };
                saved.push((i, std::mem::replace(&mut self.nodes[i].value, fresh)));
            }
        }
        let result = f(self);
        for (i, old) in saved {
            self.nodes[i].value = old;
        }
        self.nodes[t.0].value[idx] = original;
        result
    }

    fn same_shape(&self, op: &'static str, a: DiffTensor, b: DiffTensor) -> Result<()> {
        let (l, r) = (self.shape(a), self.shape(b));
        if l != r {
            return Err(Error::Shape { op, left: l, right: r });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (l, r) = (self.shape(a), self.shape(b));
        if l.1 != r.0 {
            return Err(Error::Shape {
                op: "matmul",
                left: l,
                right: r,
            });
        }
        Ok(self.record(Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("add", a, b)?;
        Ok(self.record(Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("sub", a, b)?;
        Ok(self.record(Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul(a.0, b.0)))
    }

    /// `x + row`, adding the `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: DiffTensor, row: DiffTensor) -> Result<DiffTensor> {
        let (l, r) = (self.shape(x), self.shape(row));
        if r != (1, l.1) {
            return Err(Error::Shape {
                op: "add_row",
                left: l,
                right: r,
            });
        }
        Ok(self.record(Op::AddRow(x.0, row.0)))
    }

    /// Multiplies row `i` of `x` by `s[i, 0]`.
    pub fn scale_rows(&mut self, x: DiffTensor, s: DiffTensor) -> Result<DiffTensor> {
        let (l, r) = (self.shape(x), self.shape(s));
        if r != (l.0, 1) {
            return Err(Error::Shape {
                op: "scale_rows",
                left: l,
                right: r,
            });
        }
        Ok(self.record(Op::ScaleRows(x.0, s.0)))
    }

    /// `x · s` for a `1 × 1` tensor `s`.
    pub fn scale_by(&mut self, x: DiffTensor, s: DiffTensor) -> Result<DiffTensor> {
        self.scalar(s)?;
        Ok(self.record(Op::ScaleBy(x.0, s.0)))
    }

    pub fn scale(&mut self, x: DiffTensor, c: f64) -> DiffTensor {
        self.record(Op::Scale(x.0, c))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: DiffTensor, c: f64) -> DiffTensor {
        self.record(Op::Offset(x.0, c))
    }

    pub fn relu(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Ln(x.0))
    }

    pub fn sqrt(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Sqrt(x.0))
    }

    pub fn recip(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Recip(x.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever clamping bites.
    pub fn clamp(&mut self, x: DiffTensor, lo: f64, hi: f64) -> DiffTensor {
        self.record(Op::Clamp(x.0, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::SoftmaxRows(x.0))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Mean(x.0))
    }

    /// Per-column sums, `r × c → 1 × c`.
    pub fn col_sums(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::ColSums(x.0))
    }

    /// Per-row sums, `r × c → r × 1`.
    pub fn row_sums(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::RowSums(x.0))
    }

    /// Side-by-side concatenation; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        self.concat(parts, Axis(1))
    }

    /// Stacks parts vertically; all parts need the same column count.
    pub fn concat_rows(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        self.concat(parts, Axis(0))
    }

    fn concat(&mut self, parts: &[DiffTensor], axis: Axis) -> Result<DiffTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let other = 1 - axis.index();
        let want = self.shape(*first);
        for p in parts {
            let s = self.shape(*p);
            let (a, b) = if other == 0 { (s.0, want.0) } else { (s.1, want.1) };
            if a != b {
                return Err(Error::Shape {
                    op: "concat",
                    left: want,
                    right: s,
                });
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.record(if axis.index() == 0 {
            Op::ConcatRows(ids)
        } else {
            Op::ConcatCols(ids)
        }))
    }

    pub fn transpose(&mut self, x: DiffTensor) -> DiffTensor {
        self.record(Op::Transpose(x.0))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: DiffTensor, rows: usize, cols: usize) -> Result<DiffTensor> {
        let s = self.shape(x);
        if s.0 * s.1 != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                left: s,
                right: (rows, cols),
            });
        }
        Ok(self.record(Op::Reshape(x.0, rows, cols)))
    }

    /// Adjoints of a `1 × 1` loss with respect to every node.
    pub fn backward(&self, loss: DiffTensor) -> Result<Gradients> {
        self.scalar(loss)?;
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            let val = |i: usize| &self.nodes[i].value;
            let mut send = |i: usize, delta: Matrix| {
                if !self.nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&val(*b).t()));
                    send(*b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, -&g);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, &g * val(*b));
                    send(*b, &g * val(*a));
                }
                Op::AddRow(x, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*x, g);
                }
                Op::ScaleRows(x, s) => {
                    send(*s, (&g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    send(*x, &g * val(*s));
                }
                Op::ScaleBy(x, s) => {
                    let factor = val(*s)[[0, 0]];
                    send(*s, Matrix::from_elem((1, 1), (&g * val(*x)).sum()));
                    send(*x, g * factor);
                }
                Op::Scale(x, c) => send(*x, g * *c),
                Op::Offset(x, _) => send(*x, g),
                Op::Relu(x) => {
                    let mut d = g;
                    d.zip_mut_with(val(*x), |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    d.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
                    send(*x, d);
                }
                Op::Exp(x) => send(*x, g * y),
                Op::Ln(x) => send(*x, g / val(*x)),
                Op::Sqrt(x) => {
                    let mut d = g;
                    d.zip_mut_with(y, |d, &r| *d /= 2.0 * r);
                    send(*x, d);
                }
                Op::Recip(x) => {
                    let mut d = g;
                    d.zip_mut_with(y, |d, &r| *d *= -r * r);
                    send(*x, d);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut d = g;
                    d.zip_mut_with(val(*x), |d, &a| {
                        if a <= *lo || a >= *hi {
                            *d = 0.0;
                        }
                    });
                    send(*x, d);
                }
                Op::SoftmaxRows(x) => {
                    let mut d = g;
                    for (mut gr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gr.dot(&yr);
                        gr.zip_mut_with(&yr, |gi, &yi| *gi = yi * (*gi - dot));
                    }
                    send(*x, d);
                }
                Op::Sum(x) => send(*x, Matrix::from_elem(val(*x).dim(), g[[0, 0]])),
                Op::Mean(x) => {
                    let count = val(*x).len().max(1) as f64;
                    send(*x, Matrix::from_elem(val(*x).dim(), g[[0, 0]] / count));
                }
                Op::ColSums(x) => {
                    let d = g.broadcast(val(*x).dim()).expect("row broadcast").to_owned();
                    send(*x, d);
                }
                Op::RowSums(x) => {
                    let d = g.broadcast(val(*x).dim()).expect("column broadcast").to_owned();
                    send(*x, d);
                }
                Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                    let axis = if matches!(node.op, Op::ConcatRows(_)) {
                        Axis(0)
                    } else {
                        Axis(1)
                    };
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).len_of(axis);
                        let piece = g
                            .slice_axis(axis, ndarray::Slice::from(start..start + len))
                            .to_owned();
                        send(p, piece);
                        start += len;
                    }
                }
                Op::Transpose(x) => send(*x, g.t().to_owned()),
                Op::Reshape(x, _, _) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    send(*x, Matrix::from_shape_vec(val(*x).dim(), flat).expect("same size"));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Checks tape gradients of `f` at `x` against central differences.
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, DiffTensor) -> Result<DiffTensor>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
///
/// `f` runs once; each perturbed value is then obtained by replaying the
/// recorded operations downstream of the perturbed entry, which matches a
/// fresh call of `f` whenever its sequence of operations does not depend
/// on input values.
pub fn grad_check_many<F>(f: F, xs: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[DiffTensor]) -> Result<DiffTensor>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut tape = Tape::new();
    let leaves: Vec<DiffTensor> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let v = tape.scalar(out)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (&leaf, x) in leaves.iter().zip(xs) {
        let analytic = grads.get_or_zeros(leaf, x.dim());
        for (idx, &a) in analytic.indexed_iter() {
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {a}")));
            }
            let read = |t: &Tape| t.value(out)[[0, 0]];
            let plus = tape.with_perturbed(leaf, idx, eps, read);
            let minus = tape.with_perturbed(leaf, idx, -eps, read);
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!("perturbed value at {idx:?}")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
