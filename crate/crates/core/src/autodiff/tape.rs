//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. A
//! [`Var`] is a cheap handle to one recorded value. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse, produces a
//! [`Gradients`] map and clears the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::rng::SeededRng;
use super::tensor::Tensor;
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    /// Element-wise; the right operand may be a single row broadcast over rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    RowGather {
        input: usize,
        index: Rc<[usize]>,
    },
    ScatterRows {
        input: usize,
        index: Rc<[usize]>,
    },
    SegmentMean {
        input: usize,
        segments: Rc<[usize]>,
        counts: Rc<[usize]>,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Dropout {
        input: usize,
        mask: Rc<[f64]>,
    },
    Sum(usize),
    Mean(usize),
    MseLoss {
        input: usize,
        target: Rc<Tensor>,
    },
    BceWithLogits {
        input: usize,
        target: Rc<Tensor>,
    },
    SoftmaxCrossEntropy {
        input: usize,
        classes: Rc<[usize]>,
        probs: Rc<Tensor>,
    },
    MovingAverage {
        input: usize,
        kernel: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to a differentiable leaf.
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input, not tied to any parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter's current value onto the tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiates a scalar `loss` with respect to every differentiable
    /// value on the tape, then clears the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::new(root.value.shape(), vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            if matches!(node.op, Op::Param(_) | Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (id, (node, g)) in nodes.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Param(pid) => out.params.accumulate(pid, &g, 1.0),
                Op::Leaf => {
                    out.by_node.insert(id, g);
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a `rows × cols` gradient down to the single broadcast row when needed.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if g.len() == target.len() {
        return Tensor::new(target.shape(), g.data().to_vec()).expect("same length");
    }
    let cols = target.cols();
    let mut out = vec![0.0; cols];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::new(target.shape(), out).expect("broadcast row")
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.matmul(&val(*b).transpose()).expect("matmul grad");
                let ga = Tensor::new(val(*a).shape(), ga.into_data()).expect("shape");
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = val(*a).transpose().matmul(g).expect("matmul grad");
                let gb = Tensor::new(val(*b).shape(), gb.into_data()).expect("shape");
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a)));
            accumulate(grads, nodes, *b, reduce_to(g, val(*b)));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, val(*a)));
            accumulate(grads, nodes, *b, reduce_to(&g.map(|x| -x), val(*b)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let cols = out.cols();
            let bcast = |t: &Tensor, i: usize| -> f64 {
                if t.len() == out.len() {
                    t.data()[i]
                } else {
                    t.data()[i % cols]
                }
            };
            if nodes[*a].requires_grad {
                let full: Vec<f64> = (0..out.len()).map(|i| g.data()[i] * bcast(vb, i)).collect();
                let full = Tensor::new(out.shape(), full).expect("shape");
                accumulate(grads, nodes, *a, reduce_to(&full, va));
            }
            if nodes[*b].requires_grad {
                let full: Vec<f64> = (0..out.len()).map(|i| g.data()[i] * bcast(va, i)).collect();
                let full = Tensor::new(out.shape(), full).expect("shape");
                accumulate(grads, nodes, *b, reduce_to(&full, vb));
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.map(|x| x * k)),
        Op::Transpose(a) => {
            let t = g.transpose();
            let t = Tensor::new(val(*a).shape(), t.into_data()).expect("shape");
            accumulate(grads, nodes, *a, t);
        }
        Op::Reshape(a) => {
            let t = Tensor::new(val(*a).shape(), g.data().to_vec()).expect("shape");
            accumulate(grads, nodes, *a, t);
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            for &i in inputs {
                let v = val(i);
                let piece = if *axis == 0 {
                    let c = g.cols();
                    let start = offset * c;
                    offset += v.rows();
                    g.data()[start..start + v.len()].to_vec()
                } else {
                    let w = v.cols();
                    let mut d = Vec::with_capacity(v.len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    d
                };
                accumulate(grads, nodes, i, Tensor::new(v.shape(), piece).expect("shape"));
            }
        }
        Op::RowGather { input, index } => {
            if !nodes[*input].requires_grad {
                return;
            }
            // Scatter-add straight into the input's gradient buffer.
            let v = val(*input);
            let d = grads[*input].get_or_insert_with(|| Tensor::zeros_like(v));
            let cols = v.cols();
            for (r, &src) in index.iter().enumerate() {
                let dst = &mut d.data_mut()[src * cols..(src + 1) * cols];
                for (o, x) in dst.iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
        }
        Op::ScatterRows { input, index } => {
            let v = val(*input);
            let mut d = Vec::with_capacity(v.len());
            for &dst in index.iter() {
                d.extend_from_slice(g.row(dst));
            }
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d).expect("shape"));
        }
        Op::SegmentMean {
            input,
            segments,
            counts,
        } => {
            let v = val(*input);
            let mut d = Vec::with_capacity(v.len());
            for &s in segments.iter() {
                let n = counts[s] as f64;
                d.extend(g.row(s).iter().map(|x| x / n));
            }
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d).expect("shape"));
        }
        Op::SliceCols { input, start } => {
            let v = val(*input);
            let w = g.cols();
            let mut d = Tensor::zeros(v.rows(), v.cols());
            for r in 0..v.rows() {
                d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d.into_data()).expect("shape"));
        }
        Op::Sigmoid(a) => {
            let d: Vec<f64> = g.data().iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
            accumulate(grads, nodes, *a, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::Tanh(a) => {
            let d: Vec<f64> = g.data().iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
            accumulate(grads, nodes, *a, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::Relu(a) => {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::Dropout { input, mask } => {
            let d: Vec<f64> = g.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
            accumulate(grads, nodes, *input, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::Sum(a) => {
            let v = val(*a);
            accumulate(grads, nodes, *a, Tensor::new(v.shape(), vec![g.data()[0]; v.len()]).expect("shape"));
        }
        Op::Mean(a) => {
            let v = val(*a);
            let s = g.data()[0] / v.len() as f64;
            accumulate(grads, nodes, *a, Tensor::new(v.shape(), vec![s; v.len()]).expect("shape"));
        }
        Op::MseLoss { input, target } => {
            let v = val(*input);
            let k = 2.0 * g.data()[0] / v.len() as f64;
            let d: Vec<f64> = v.data().iter().zip(target.data()).map(|(p, t)| k * (p - t)).collect();
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d).expect("shape"));
        }
        Op::BceWithLogits { input, target } => {
            let v = val(*input);
            let k = g.data()[0] / v.len() as f64;
            let d: Vec<f64> = v
                .data()
                .iter()
                .zip(target.data())
                .map(|(x, t)| k * (sigmoid(*x) - t))
                .collect();
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d).expect("shape"));
        }
        Op::SoftmaxCrossEntropy {
            input,
            classes,
            probs,
        } => {
            let v = val(*input);
            let k = g.data()[0] / v.rows() as f64;
            let mut d = probs.as_ref().clone();
            for (r, &c) in classes.iter().enumerate() {
                d.row_mut(r)[c] -= 1.0;
            }
            let d = Tensor::new(v.shape(), d.into_data().into_iter().map(|x| k * x).collect()).expect("shape");
            accumulate(grads, nodes, *input, d);
        }
        Op::MovingAverage { input, kernel } => {
            let v = val(*input);
            let (len, cols) = (v.rows(), v.cols());
            let half = (kernel / 2) as isize;
            let inv = 1.0 / *kernel as f64;
            let mut d = Tensor::zeros(len, cols);
            for t in 0..len {
                for j in -half..=half {
                    let src = (t as isize + j).clamp(0, len as isize - 1) as usize;
                    for c in 0..cols {
                        let add = g.at(t, c) * inv;
                        d.data_mut()[src * cols + c] += add;
                    }
                }
            }
            accumulate(grads, nodes, *input, Tensor::new(v.shape(), d.into_data()).expect("shape"));
        }
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

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, v, Op::MatMul(self.id, rhs.id)))
    }

    fn elementwise(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), rhs.value());
        if a.len() == b.len() && a.shape() == b.shape() {
            let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            return Tensor::new(a.shape(), d);
        }
        // Row broadcast: rhs is a single row matching the column count.
        if b.rows() == 1 && b.cols() == a.cols() {
            let c = a.cols();
            let d = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, b.data()[i % c]))
                .collect();
            return Tensor::new(a.shape(), d);
        }
        Err(mismatch(name, &a, &b))
    }

    /// Element-wise sum; `rhs` may be a single row broadcast over all rows.
    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "add", |x, y| x + y)?;
        Ok(self.binary(rhs, v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "sub", |x, y| x - y)?;
        Ok(self.binary(rhs, v, Op::Sub(self.id, rhs.id)))
    }

    /// Element-wise product; `rhs` may be a single broadcast row.
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "mul", |x, y| x * y)?;
        Ok(self.binary(rhs, v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Same values, new shape (row-major order is preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Concatenates matrix views along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let data = match axis {
            0 => {
                let cols = values[0].cols();
                let mut rows = 0;
                let mut d = Vec::new();
                for v in &values {
                    if v.cols() != cols {
                        return Err(mismatch("concat", &values[0], v));
                    }
                    rows += v.rows();
                    d.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, cols, d)
            }
            1 => {
                let rows = values[0].rows();
                let mut cols = 0;
                for v in &values {
                    if v.rows() != rows {
                        return Err(mismatch("concat", &values[0], v));
                    }
                    cols += v.cols();
                }
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &values {
                        d.extend_from_slice(v.row(r));
                    }
                }
                Tensor::matrix(rows, cols, d)
            }
            _ => return Err(TensorError::InvalidArgument("concat axis must be 0 or 1")),
        };
        let rg = parts.iter().any(Var::requires_grad);
        Ok(tape.push(
            data,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Selects rows by index; indices may repeat.
    pub fn row_gather(&self, index: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let cols = v.cols();
        let mut d = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= v.rows() {
                return Err(TensorError::IndexOutOfBounds {
                    index: i,
                    bound: v.rows(),
                });
            }
            d.extend_from_slice(v.row(i));
        }
        Ok(self.unary(
            Tensor::matrix(index.len(), cols, d),
            Op::RowGather {
                input: self.id,
                index: index.into(),
            },
        ))
    }

    /// Places row `i` of `self` at row `index[i]` of an `n_rows`-row zero
    /// matrix. Indices must be distinct.
    pub fn scatter_rows(&self, index: &[usize], n_rows: usize) -> Result<Var<'t>> {
        let v = self.value();
        if index.len() != v.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                left: v.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let mut out = Tensor::zeros(n_rows, v.cols());
        let mut seen = vec![false; n_rows];
        for (r, &dst) in index.iter().enumerate() {
            if dst >= n_rows {
                return Err(TensorError::IndexOutOfBounds {
                    index: dst,
                    bound: n_rows,
                });
            }
            if std::mem::replace(&mut seen[dst], true) {
                return Err(TensorError::InvalidArgument("scatter_rows indices must be distinct"));
            }
            out.row_mut(dst).copy_from_slice(v.row(r));
        }
        Ok(self.unary(
            out,
            Op::ScatterRows {
                input: self.id,
                index: index.into(),
            },
        ))
    }

    /// Mean of the rows sharing a segment id. Empty segments yield zero rows.
    pub fn segment_mean(&self, segment_ids: &[usize], n_segments: usize) -> Result<Var<'t>> {
        let v = self.value();
        if segment_ids.len() != v.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_mean",
                left: v.shape().to_vec(),
                right: vec![segment_ids.len()],
            });
        }
        let cols = v.cols();
        let mut counts = vec![0usize; n_segments];
        let mut out = Tensor::zeros(n_segments, cols);
        for (r, &s) in segment_ids.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::IndexOutOfBounds {
                    index: s,
                    bound: n_segments,
                });
            }
            counts[s] += 1;
            for (o, x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 1 {
                let inv = 1.0 / n as f64;
                out.row_mut(s).iter_mut().for_each(|x| *x *= inv);
            }
        }
        Ok(self.unary(
            out,
            Op::SegmentMean {
                input: self.id,
                segments: segment_ids.into(),
                counts: counts.into(),
            },
        ))
    }

    /// Columns `start..end` of the matrix view.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start > end || end > v.cols() {
            return Err(TensorError::IndexOutOfBounds {
                index: end,
                bound: v.cols(),
            });
        }
        let w = end - start;
        let mut d = Vec::with_capacity(v.rows() * w);
        for r in 0..v.rows() {
            d.extend_from_slice(&v.row(r)[start..end]);
        }
        Ok(self.unary(Tensor::matrix(v.rows(), w, d), Op::SliceCols { input: self.id, start }))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Inverted dropout. `p = 0` returns `self` without recording anything.
    pub fn dropout(&self, p: f64, rng: &mut SeededRng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument("dropout probability must lie in [0, 1)"));
        }
        if p == 0.0 {
            return Ok(*self);
        }
        let v = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let d = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.unary(
            Tensor::new(v.shape(), d)?,
            Op::Dropout {
                input: self.id,
                mask: mask.into(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.len() != target.len() || v.cols() != target.cols() {
            return Err(mismatch("mse_loss", &v, target));
        }
        if v.is_empty() {
            return Err(TensorError::Empty("mse_loss"));
        }
        let s: f64 = v.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        Ok(self.unary(
            Tensor::scalar(s / v.len() as f64),
            Op::MseLoss {
                input: self.id,
                target: Rc::new(target.clone()),
            },
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 (or soft) targets.
    pub fn bce_with_logits(&self, target: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.len() != target.len() {
            return Err(mismatch("bce_with_logits", &v, target));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.unary(
            Tensor::scalar(s / v.len() as f64),
            Op::BceWithLogits {
                input: self.id,
                target: Rc::new(target.clone()),
            },
        ))
    }

    /// Mean over rows of `-log softmax(row)[class]`.
    pub fn softmax_cross_entropy(&self, classes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if classes.len() != v.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: v.shape().to_vec(),
                right: vec![classes.len()],
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= v.cols()) {
            return Err(TensorError::ClassOutOfRange {
                class: c,
                n_classes: v.cols(),
            });
        }
        let probs = v.softmax_rows();
        let mut loss = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            let row = v.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        Ok(self.unary(
            Tensor::scalar(loss / v.rows() as f64),
            Op::SoftmaxCrossEntropy {
                input: self.id,
                classes: classes.into(),
                probs: Rc::new(probs),
            },
        ))
    }

    /// Centred moving average along the row (time) axis with an odd
    /// kernel; the sequence is padded by replicating its first and last rows.
    pub fn moving_average(&self, kernel: usize) -> Result<Var<'t>> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument("moving-average kernel must be odd"));
        }
        let v = self.value();
        let (len, cols) = (v.rows(), v.cols());
        if len == 0 {
            return Err(TensorError::Empty("moving_average"));
        }
        let half = (kernel / 2) as isize;
        let inv = 1.0 / kernel as f64;
        let mut out = Tensor::zeros(len, cols);
        for t in 0..len {
            for j in -half..=half {
                let src = (t as isize + j).clamp(0, len as isize - 1) as usize;
                for c in 0..cols {
                    out.data_mut()[t * cols + c] += v.at(src, c) * inv;
                }
            }
        }
        Ok(self.unary(
            Tensor::new(v.shape(), out.into_data())?,
            Op::MovingAverage {
                input: self.id,
                kernel,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[6.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn segment_mean_hand_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 1, vec![2.0, 4.0, 6.0]));
        let m = x.segment_mean(&[0, 0, 1], 2).unwrap();
        assert_eq!(m.value().data(), &[3.0, 6.0]);
    }

    #[test]
    fn segment_mean_rejects_out_of_range_ids() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            x.segment_mean(&[0, 2], 2),
            Err(TensorError::IndexOutOfBounds { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let av = tape.constant(a.clone());
        let i = tape.constant(Tensor::identity(3));
        assert_eq!(*av.matmul(&i).unwrap().value(), a);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(7, 2, 1.25));
        let m = x.moving_average(5).unwrap();
        assert!(m.value().data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn mse_gradient_vanishes_at_target() {
        let tape = Tape::new();
        let t = Tensor::matrix(2, 2, vec![0.1, -0.3, 2.0, 0.0]);
        let p = tape.leaf(t.clone());
        let loss = p.mse_loss(&t).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(&p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        assert!(matches!(
            x.softmax_cross_entropy(&[3]),
            Err(TensorError::ClassOutOfRange { class: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, -4.0]);
        let x = tape.leaf(a.clone());
        let held = x.value();
        let y = x.relu().mul(&x).unwrap().sum();
        let _ = tape.backward(y).unwrap();
        assert_eq!(*held, a);
    }
}
