use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, axpy, dot};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleRows(usize, usize),
    Scale(usize, f64),
    AddN(Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    RowDot(usize, usize),
    SqDist(usize, usize),
    Pick { src: usize, cols: Vec<usize> },
    StopGradient(usize),
    StraightThrough { query: usize, code: usize },
}

/// Kind of the operation that produced a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Multiply,
    ScaleRows,
    Scale,
    AddN,
    Concat,
    Slice,
    EmbeddingLookup,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Sum,
    Mean,
    RowDot,
    SquaredL2Distance,
    Pick,
    StopGradient,
    StraightThrough,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) | Op::AddBias(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Multiply,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Scale(..) => OpKind::Scale,
            Op::AddN(..) => OpKind::AddN,
            Op::ConcatCols(..) | Op::ConcatRows(..) => OpKind::Concat,
            Op::SliceCols { .. } | Op::SliceRows { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::EmbeddingLookup,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowDot(..) => OpKind::RowDot,
            Op::SqDist(..) => OpKind::SquaredL2Distance,
            Op::Pick { .. } => OpKind::Pick,
            Op::StopGradient(..) => OpKind::StopGradient,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleRows(a, b)
            | Op::RowDot(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::AddN(xs) | Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::StopGradient(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::SliceRows { src, .. } | Op::Pick { src, .. } => {
                vec![*src]
            }
            Op::Gather { table, .. } => vec![*table],
            Op::StraightThrough { query, code } => vec![*query, *code],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// The tape: operation records in execution order plus, after
/// [`Graph::backward`], the accumulated gradients.
///
/// A graph is confined to the thread that builds it.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// Values recorded from another graph, consumed in creation order by
    /// the gradient-blocking ops. See [`Graph::frozen_values`].
    frozen: Option<std::vec::IntoIter<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            frozen: None,
        }
    }

    /// What each gradient-blocking node treats as constant, in creation
    /// order: the value of a stop-gradient node and `code - query` of a
    /// straight-through node.
    pub(super) fn frozen_values(&self) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::StopGradient(_) => Some(n.value.clone()),
                Op::StraightThrough { query, code } => {
                    let (q, c) = (&self.nodes[query].value, &self.nodes[code].value);
                    let d = c
                        .data()
                        .iter()
                        .zip(q.data())
                        .map(|(c, q)| *c - *q)
                        .collect();
                    Some(Tensor::from_parts(q.rows(), q.cols(), d))
                }
                _ => None,
            })
            .collect()
    }

    /// Replays `frozen_values` of another graph: later stop-gradient nodes
    /// emit the recorded value and straight-through nodes emit
    /// `query + offset`. The result is the function whose true derivative
    /// the blocking rules report.
    pub(super) fn freeze(&mut self, values: Vec<Tensor<T>>) {
        self.frozen = Some(values.into_iter());
    }

    fn next_frozen(
        &mut self,
        op: &'static str,
        shape: (usize, usize),
    ) -> Result<Option<Tensor<T>>> {
        let Some(it) = self.frozen.as_mut() else {
            return Ok(None);
        };
        let t = it
            .next()
            .ok_or_else(|| Error::Invalid(format!("{op}: no frozen value left to replay")))?;
        if t.shape() != shape {
            return Err(Error::Shape {
                op,
                lhs: shape,
                rhs: t.shape(),
            });
        }
        Ok(Some(t))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::StopGradient(_) => false,
            Op::StraightThrough { query, .. } => self.nodes[*query].requires_grad,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.index]
            .op
            .inputs()
            .into_iter()
            .map(|index| Var {
                tape: self.id,
                index,
            })
            .collect()
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    /// `None` for tensors that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.idx(v).ok()?;
        let g = self.grads.get(i)?.as_ref()?;
        let (r, c) = self.nodes[i].value.shape();
        Some(Tensor::from_parts(r, c, g.clone()))
    }

    fn vals(&self, v: Var) -> Result<(usize, &Tensor<T>)> {
        let i = self.idx(v)?;
        Ok((i, &self.nodes[i].value))
    }

    // ---- forward operations ------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        let ((m, k), (k2, n)) = (ta.shape(), tb.shape());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(ia, ib)))
    }

    /// Elementwise sum. `b` may also be a `1 x cols` bias added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        if ta.shape() == tb.shape() {
            let out: Vec<T> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| *x + *y)
                .collect();
            let (r, c) = ta.shape();
            Ok(self.push(Tensor::from_parts(r, c, out), Op::Add(ia, ib)))
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut out = ta.data().to_vec();
            for row in out.chunks_exact_mut(ta.cols()) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += *bv;
                }
            }
            let (r, c) = ta.shape();
            Ok(self.push(Tensor::from_parts(r, c, out), Op::AddBias(ia, ib)))
        } else {
            Err(shape_err("add", ta, tb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let (r, c) = ta.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Sub(ia, ib)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("multiply", ta, tb));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let (r, c) = ta.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Mul(ia, ib)))
    }

    /// Multiplies row `i` of `x` by the scalar `w[i]`; `w` is `rows x 1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let (iw, tw) = self.vals(w)?;
        if tw.shape() != (tx.rows(), 1) {
            return Err(shape_err("scale_rows", tx, tw));
        }
        let mut out = tx.data().to_vec();
        for (row, &s) in out.chunks_exact_mut(tx.cols()).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let (r, c) = tx.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::ScaleRows(ix, iw)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let f = T::lit(factor);
        let out = tx.data().iter().map(|v| *v * f).collect();
        let (r, c) = tx.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::Scale(ix, factor)))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("add_n"))?;
        let (_, t0) = self.vals(first)?;
        let shape = t0.shape();
        let mut out = vec![T::zero(); t0.len()];
        let mut ids = Vec::with_capacity(xs.len());
        for &x in xs {
            let (i, t) = self.vals(x)?;
            if t.shape() != shape {
                return Err(shape_err("add_n", self.value(first), t));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += *v;
            }
            ids.push(i);
        }
        Ok(self.push(Tensor::from_parts(shape.0, shape.1, out), Op::AddN(ids)))
    }

    /// Concatenates along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat"))?;
        let rows = self.value(first).rows();
        let mut ids = Vec::with_capacity(xs.len());
        let mut cols = 0;
        for &x in xs {
            let (i, t) = self.vals(x)?;
            if t.rows() != rows {
                return Err(shape_err("concat", self.value(first), t));
            }
            cols += t.cols();
            ids.push(i);
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &ids {
                out.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_parts(rows, cols, out), Op::ConcatCols(ids)))
    }

    /// Stacks inputs vertically; all inputs share the column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat"))?;
        let cols = self.value(first).cols();
        let mut ids = Vec::with_capacity(xs.len());
        let mut out = Vec::new();
        for &x in xs {
            let (i, t) = self.vals(x)?;
            if t.cols() != cols {
                return Err(shape_err("concat", self.value(first), t));
            }
            out.extend_from_slice(t.data());
            ids.push(i);
        }
        let rows = out.len() / cols;
        Ok(self.push(Tensor::from_parts(rows, cols, out), Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        if len == 0 || start + len > tx.cols() {
            return Err(Error::Shape {
                op: "slice",
                lhs: tx.shape(),
                rhs: (start, len),
            });
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row_slice(r)[start..start + len]);
        }
        let rows = tx.rows();
        Ok(self.push(
            Tensor::from_parts(rows, len, out),
            Op::SliceCols { src: ix, start },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        if len == 0 || start + len > tx.rows() {
            return Err(Error::Shape {
                op: "slice",
                lhs: tx.shape(),
                rhs: (start, len),
            });
        }
        let c = tx.cols();
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(len, c, out),
            Op::SliceRows { src: ix, start },
        ))
    }

    /// Gathers rows of `table`, one per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (it, tt) = self.vals(table)?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding_lookup ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * tt.cols());
        for &id in ids {
            if id >= tt.rows() {
                return Err(Error::OutOfRange {
                    what: "embedding id",
                    value: id,
                    limit: tt.rows(),
                });
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let cols = tt.cols();
        Ok(self.push(
            Tensor::from_parts(ids.len(), cols, out),
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let out = tx.data().iter().map(|v| f(*v)).collect();
        let (r, c) = tx.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), op(ix)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    /// Natural log; errors on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let (_, tx) = self.vals(x)?;
        if let Some(bad) = tx.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, |v| v.ln(), Op::Log)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(tx.cols()) {
            kernels::softmax_in_place(row);
        }
        let (r, c) = tx.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::SoftmaxRows(ix)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(tx.cols()) {
            kernels::log_softmax_in_place(row);
        }
        let (r, c) = tx.shape();
        Ok(self.push(Tensor::from_parts(r, c, out), Op::LogSoftmaxRows(ix)))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let s = tx.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let s: T = tx.data().iter().copied().sum();
        let n = T::lit(tx.len() as f64);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean(ix)))
    }

    /// Per-row inner products, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let out = (0..ta.rows())
            .map(|r| dot(ta.row_slice(r), tb.row_slice(r)))
            .collect();
        let rows = ta.rows();
        Ok(self.push(Tensor::from_parts(rows, 1, out), Op::RowDot(ia, ib)))
    }

    /// Per-row squared Euclidean distances, `rows x 1`.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.vals(a)?;
        let (ib, tb) = self.vals(b)?;
        if ta.shape() != tb.shape() {
            return Err(shape_err("squared_l2_distance", ta, tb));
        }
        let out = (0..ta.rows())
            .map(|r| {
                ta.row_slice(r)
                    .iter()
                    .zip(tb.row_slice(r))
                    .map(|(x, y)| (*x - *y) * (*x - *y))
                    .sum()
            })
            .collect();
        let rows = ta.rows();
        Ok(self.push(Tensor::from_parts(rows, 1, out), Op::SqDist(ia, ib)))
    }

    /// Selects `x[r, cols[r]]` for every row, giving `rows x 1`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        if cols.len() != tx.rows() {
            return Err(Error::Shape {
                op: "pick",
                lhs: tx.shape(),
                rhs: (cols.len(), 1),
            });
        }
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= tx.cols() {
                return Err(Error::OutOfRange {
                    what: "pick column",
                    value: c,
                    limit: tx.cols(),
                });
            }
            out.push(tx.get(r, c));
        }
        let rows = tx.rows();
        Ok(self.push(
            Tensor::from_parts(rows, 1, out),
            Op::Pick {
                src: ix,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let (ix, tx) = self.vals(x)?;
        let shape = tx.shape();
        let v = match self.next_frozen("stop_gradient", shape)? {
            Some(v) => v,
            None => self.nodes[ix].value.clone(),
        };
        Ok(self.push(v, Op::StopGradient(ix)))
    }

    /// Emits the values of `code` while routing the incoming gradient
    /// verbatim to `query`. `code` receives nothing through this edge.
    pub fn straight_through(&mut self, query: Var, code: Var) -> Result<Var> {
        let (iq, tq) = self.vals(query)?;
        let (ic, tc) = self.vals(code)?;
        if tq.shape() != tc.shape() {
            return Err(shape_err("straight_through", tq, tc));
        }
        let shape = tq.shape();
        let v = match self.next_frozen("straight_through", shape)? {
            None => self.nodes[ic].value.clone(),
            Some(off) => {
                let q = self.nodes[iq].value.data();
                let d = q.iter().zip(off.data()).map(|(q, o)| *q + *o).collect();
                Tensor::from_parts(shape.0, shape.1, d)
            }
        };
        Ok(self.push(
            v,
            Op::StraightThrough {
                query: iq,
                code: ic,
            },
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Populates gradients of `loss` with respect to every tensor on the
    /// tape that requires them. Gradients from previous calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Accumulates into input `j` if it takes gradients.
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = ta.shape();
                let n = tb.cols();
                acc(*a, &mut |ga| kernels::gemm_nt(g, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| kernels::gemm_tn(ta.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(T::one(), g, ga));
                acc(*b, &mut |gb| axpy(T::one(), g, gb));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |ga| axpy(T::one(), g, ga));
                let c = out.cols();
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(T::one(), g, ga));
                acc(*b, &mut |gb| axpy(-T::one(), g, gb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += *gv * *bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += *gv * *av;
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
                let c = tx.cols();
                acc(*x, &mut |gx| {
                    for ((dst, src), &s) in
                        gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(tw.data())
                    {
                        axpy(s, src, dst);
                    }
                });
                acc(*w, &mut |gw| {
                    for (r, o) in gw.iter_mut().enumerate() {
                        *o += dot(&g[r * c..(r + 1) * c], tx.row_slice(r));
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = T::lit(*f);
                acc(*x, &mut |gx| axpy(f, g, gx));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    acc(x, &mut |gx| axpy(T::one(), g, gx));
                }
            }
            Op::ConcatCols(xs) => {
                let c = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = nodes[x].value.cols();
                    acc(x, &mut |gx| {
                        for (r, dst) in gx.chunks_exact_mut(w).enumerate() {
                            axpy(T::one(), &g[r * c + offset..r * c + offset + w], dst);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x].value.len();
                    acc(x, &mut |gx| axpy(T::one(), &g[offset..offset + n], gx));
                    offset += n;
                }
            }
            Op::SliceCols { src, start } => {
                let sc = nodes[*src].value.cols();
                let w = out.cols();
                acc(*src, &mut |gs| {
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        axpy(T::one(), row, &mut gs[r * sc + start..r * sc + start + w]);
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let c = out.cols();
                acc(*src, &mut |gs| {
                    axpy(T::one(), g, &mut gs[start * c..start * c + g.len()])
                });
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            T::one(),
                            &g[r * c..(r + 1) * c],
                            &mut gt[id * c..(id + 1) * c],
                        );
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += *gv * (T::one() - *y * *y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o += *gv * *y * (T::one() - *y);
                }
            }),
            Op::Log(x) => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *o += *gv / *v;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for ((dst, gr), yr) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let inner = dot(gr, yr);
                        for ((o, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += *y * (*gv - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for ((dst, gr), yr) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let total: T = gr.iter().copied().sum();
                        for ((o, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += *gv - y.exp() * total;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = T::lit(nodes[*x].value.len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let c = ta.cols();
                acc(*a, &mut |ga| {
                    for (r, dst) in ga.chunks_exact_mut(c).enumerate() {
                        axpy(g[r], tb.row_slice(r), dst);
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, dst) in gb.chunks_exact_mut(c).enumerate() {
                        axpy(g[r], ta.row_slice(r), dst);
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let c = ta.cols();
                let two = T::lit(2.0);
                acc(*a, &mut |ga| {
                    for (r, dst) in ga.chunks_exact_mut(c).enumerate() {
                        for ((o, x), y) in dst.iter_mut().zip(ta.row_slice(r)).zip(tb.row_slice(r))
                        {
                            *o += two * g[r] * (*x - *y);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, dst) in gb.chunks_exact_mut(c).enumerate() {
                        for ((o, x), y) in dst.iter_mut().zip(ta.row_slice(r)).zip(tb.row_slice(r))
                        {
                            *o -= two * g[r] * (*x - *y);
                        }
                    }
                });
            }
            Op::Pick { src, cols } => {
                let c = nodes[*src].value.cols();
                acc(*src, &mut |gs| {
                    for (r, &col) in cols.iter().enumerate() {
                        gs[r * c + col] += g[r];
                    }
                });
            }
            Op::StraightThrough { query, .. } => {
                acc(*query, &mut |gq| axpy(T::one(), g, gq));
            }
        }
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}
