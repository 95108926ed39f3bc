use rand::Rng;

use super::{Real, Result, Tensor, TensorError, NORM_EPS};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Unary(UnaryOp, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize { x: Var, radius: T },
    Gather { x: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { mask: Vec<bool>, on_true: Var, on_false: Var },
    Stack(Vec<Var>),
    BatchScores { q: Var, keys: Var },
    WeightedSum { w: Var, values: Var },
    Sum(Var),
    Nll { logp: Var, targets: Vec<usize>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Binary(_, a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Normalize { x, .. }
            | Op::Gather { x, .. }
            | Op::Dropout { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum(x)
            | Op::Nll { logp: x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::Stack(xs) => xs.clone(),
            Op::SelectRows {
                on_true, on_false, ..
            } => vec![*on_true, *on_false],
            Op::BatchScores { q, keys } => vec![*q, *keys],
            Op::WeightedSum { w, values } => vec![*w, *values],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward pass. Nodes are appended in execution
/// order, which is a topological order of the computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Every op result is checked for NaN/Inf and `log` rejects
    /// non-positive inputs.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape when `v` was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(mismatch(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == T::zero() {
                    continue;
                }
                for (o, &bb) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += s * bb;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(mismatch(
                "matmul_bt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(super::dot(arow, &bv[j * k..(j + 1) * k]));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMulBt(a, b), value, "matmul_bt")
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Binary(op, a, b), value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b, "mul")
    }

    /// Adds a bias vector `b[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(bias).numel() != n {
            return Err(mismatch(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for (o, &bb) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::AddBias(x, bias), value, "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value, "scale")
    }

    fn unary(&mut self, op: UnaryOp, x: Var, name: &'static str) -> Result<Var> {
        if let UnaryOp::Log = op {
            if self.check_finite && self.value(x).data().iter().any(|&v| v <= T::zero()) {
                return Err(TensorError::NonFinite { op: name });
            }
        }
        let value = self.value(x).map(|v| match op {
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
        });
        self.push(Op::Unary(op, x), value, name)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x, "log")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax restricted to positions where `mask` is true. Masked
    /// positions get exactly zero weight. A row with no unmasked position is
    /// a contract error.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(mismatch("masked_softmax", xv.shape(), &[mask.len()]));
            }
        }
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::Contract(format!(
                    "softmax row {i} has no unmasked position"
                )));
            }
            let out = &mut data[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Softmax(x), value, "softmax")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = xv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::LogSoftmax(x), value, "log_softmax")
    }

    /// Rescales every row (last dimension) to Euclidean norm `radius`:
    /// `radius · v / sqrt(‖v‖² + ε²)`.
    pub fn normalize_rows(&mut self, x: Var, radius: T) -> Result<Var> {
        if radius <= T::zero() {
            return Err(TensorError::Contract(format!(
                "normalize_rows: radius must be positive, got {radius}"
            )));
        }
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let scale = radius / super::guarded_norm(row);
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Normalize { x, radius }, value, "normalize_rows")
    }

    /// Gathers rows (leading-dimension slices) of `x` by index.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl(x, ids, "gather_rows")
    }

    /// Embedding lookup: rows of `table[V×d]`.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl(table, ids, "lookup")
    }

    fn gather_impl(&mut self, x: Var, ids: &[usize], name: &'static str) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: name,
                    index: id,
                    len: r,
                });
            }
            data.extend_from_slice(xv.row(id));
        }
        let mut shape = vec![ids.len()];
        if xv.shape().len() == 1 {
            shape.push(c);
        } else {
            shape.extend_from_slice(&xv.shape()[1..]);
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            value,
            name,
        )
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Dropout { x, mask }, value, "dropout")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x);
            if r != m {
                return Err(mismatch(
                    "concat_cols",
                    self.value(xs[0]).shape(),
                    self.value(x).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        self.push(Op::ConcatCols(xs.to_vec()), value, "concat_cols")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > n || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        self.push(Op::SliceCols { x, start }, value, "slice_cols")
    }

    /// Row `i` comes from `on_true` when `mask[i]`, else from `on_false`.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (tv, fv) = (self.value(on_true), self.value(on_false));
        if tv.shape() != fv.shape() || mask.len() != tv.rows() {
            return Err(mismatch("select_rows", tv.shape(), fv.shape()));
        }
        let mut data = Vec::with_capacity(tv.numel());
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { tv.row(i) } else { fv.row(i) });
        }
        let value = Tensor::new(tv.shape().to_vec(), data)?;
        self.push(
            Op::SelectRows {
                mask: mask.to_vec(),
                on_true,
                on_false,
            },
            value,
            "select_rows",
        )
    }

    /// Stacks `S` matrices of shape `[B×d]` into `[B×S×d]`.
    pub fn stack_steps(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let (b, d) = (first[0], self.value(xs[0]).cols());
        for &x in xs {
            if self.dims2(x) != (b, d) {
                return Err(mismatch("stack_steps", &first, self.value(x).shape()));
            }
        }
        let s = xs.len();
        let mut data = Vec::with_capacity(b * s * d);
        for i in 0..b {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::new(vec![b, s, d], data)?;
        self.push(Op::Stack(xs.to_vec()), value, "stack_steps")
    }

    /// `out[b, s] = q[b] · keys[b, s]` for `q[B×d]`, `keys[B×S×d]`.
    pub fn batch_scores(&mut self, q: Var, keys: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(keys));
        let ks = kv.shape();
        if ks.len() != 3 || ks[0] != qv.rows() || ks[2] != qv.cols() {
            return Err(mismatch("batch_scores", qv.shape(), ks));
        }
        let (b, s, d) = (ks[0], ks[1], ks[2]);
        let mut data = Vec::with_capacity(b * s);
        for i in 0..b {
            let qi = qv.row(i);
            for j in 0..s {
                let off = (i * s + j) * d;
                data.push(super::dot(qi, &kv.data()[off..off + d]));
            }
        }
        let value = Tensor::new(vec![b, s], data)?;
        self.push(Op::BatchScores { q, keys }, value, "batch_scores")
    }

    /// `out[b] = Σ_s w[b, s] · values[b, s]` for `w[B×S]`, `values[B×S×d]`.
    pub fn batch_weighted_sum(&mut self, w: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(values));
        let vs = vv.shape();
        if vs.len() != 3 || vs[0] != wv.rows() || vs[1] != wv.cols() {
            return Err(mismatch("batch_weighted_sum", wv.shape(), vs));
        }
        let (b, s, d) = (vs[0], vs[1], vs[2]);
        let mut data = vec![T::zero(); b * d];
        for i in 0..b {
            let out = &mut data[i * d..(i + 1) * d];
            for j in 0..s {
                let a = wv.data()[i * s + j];
                if a == T::zero() {
                    continue;
                }
                let off = (i * s + j) * d;
                for (o, &v) in out.iter_mut().zip(&vv.data()[off..off + d]) {
                    *o += a * v;
                }
            }
        }
        let value = Tensor::new(vec![b, d], data)?;
        self.push(Op::WeightedSum { w, values }, value, "batch_weighted_sum")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, "sum")
    }

    /// `-Σ_i weights[i] · logp[i, targets[i]]` as a scalar.
    pub fn nll_rows(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logp);
        let (m, n) = (lv.rows(), lv.cols());
        if targets.len() != m || weights.len() != m {
            return Err(mismatch("nll_rows", lv.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_rows",
                    index: t,
                    len: n,
                });
            }
            if w != T::zero() {
                total -= w * lv.data()[i * n + t];
            }
        }
        let value = Tensor::scalar(total);
        self.push(
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            value,
            "nll_rows",
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients from previous calls are
    /// discarded; nodes used several times accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            propagate(before, &rest[0], dy.data());
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Runs `f` with mutable access to the gradient buffer of `v` (allocated on
/// first use) and shared access to all node values.
fn with_grad<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut g = nodes[v.0]
        .grad
        .take()
        .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(nodes, g.data_mut());
    nodes[v.0].grad = Some(g);
}

fn propagate<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, dy: &[T]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.cols();
            with_grad(nodes, *a, |ns, ga| {
                let bv = ns[b.0].value.data();
                for i in 0..m {
                    let drow = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += super::dot(drow, &bv[p * n..(p + 1) * n]);
                    }
                }
            });
            with_grad(nodes, *b, |ns, gb| {
                let av = ns[a.0].value.data();
                for i in 0..m {
                    let drow = &dy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s == T::zero() {
                            continue;
                        }
                        for (g, &d) in gb[p * n..(p + 1) * n].iter_mut().zip(drow) {
                            *g += s * d;
                        }
                    }
                }
            });
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.rows();
            with_grad(nodes, *a, |ns, ga| {
                let bv = ns[b.0].value.data();
                for i in 0..m {
                    let grow = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let s = dy[i * n + j];
                        if s == T::zero() {
                            continue;
                        }
                        for (g, &bb) in grow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                            *g += s * bb;
                        }
                    }
                }
            });
            with_grad(nodes, *b, |ns, gb| {
                let av = ns[a.0].value.data();
                for i in 0..m {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let s = dy[i * n + j];
                        if s == T::zero() {
                            continue;
                        }
                        for (g, &aa) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *g += s * aa;
                        }
                    }
                }
            });
        }
        Op::Binary(op, a, b) => match op {
            BinaryOp::Add | BinaryOp::Sub => {
                with_grad(nodes, *a, |_, ga| {
                    for (g, &d) in ga.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                let sign = if matches!(op, BinaryOp::Add) {
                    T::one()
                } else {
                    -T::one()
                };
                with_grad(nodes, *b, |_, gb| {
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g += sign * d;
                    }
                });
            }
            BinaryOp::Mul => {
                with_grad(nodes, *a, |ns, ga| {
                    for ((g, &d), &bb) in ga.iter_mut().zip(dy).zip(ns[b.0].value.data()) {
                        *g += d * bb;
                    }
                });
                with_grad(nodes, *b, |ns, gb| {
                    for ((g, &d), &aa) in gb.iter_mut().zip(dy).zip(ns[a.0].value.data()) {
                        *g += d * aa;
                    }
                });
            }
        },
        Op::AddBias(x, bias) => {
            with_grad(nodes, *x, |_, gx| {
                for (g, &d) in gx.iter_mut().zip(dy) {
                    *g += d;
                }
            });
            with_grad(nodes, *bias, |_, gb| {
                let n = gb.len();
                for row in dy.chunks(n) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            });
        }
        Op::Scale(x, c) => with_grad(nodes, *x, |_, gx| {
            for (g, &d) in gx.iter_mut().zip(dy) {
                *g += *c * d;
            }
        }),
        Op::Unary(op, x) => with_grad(nodes, *x, |ns, gx| {
            let xv = ns[x.0].value.data();
            for i in 0..gx.len() {
                let local = match op {
                    UnaryOp::Tanh => T::one() - y[i] * y[i],
                    UnaryOp::Sigmoid => y[i] * (T::one() - y[i]),
                    UnaryOp::Exp => y[i],
                    UnaryOp::Log => T::one() / xv[i],
                };
                gx[i] += dy[i] * local;
            }
        }),
        Op::Softmax(x) => {
            let n = node.value.cols();
            with_grad(nodes, *x, |_, gx| {
                for ((g, yr), dr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                    let inner = super::dot(yr, dr);
                    for j in 0..n {
                        g[j] += yr[j] * (dr[j] - inner);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let n = node.value.cols();
            with_grad(nodes, *x, |_, gx| {
                for ((g, yr), dr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                    let total: T = dr.iter().copied().sum();
                    for j in 0..n {
                        g[j] += dr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::Normalize { x, radius } => {
            let d = *node.value.shape().last().unwrap();
            let eps2 = T::lit(NORM_EPS) * T::lit(NORM_EPS);
            with_grad(nodes, *x, |ns, gx| {
                let xv = ns[x.0].value.data();
                for ((g, v), dr) in gx.chunks_mut(d).zip(xv.chunks(d)).zip(dy.chunks(d)) {
                    let sq = v.iter().map(|&a| a * a).sum::<T>() + eps2;
                    let n = sq.sqrt();
                    let proj = super::dot(v, dr) / sq;
                    let s = *radius / n;
                    for j in 0..d {
                        g[j] += s * (dr[j] - v[j] * proj);
                    }
                }
            });
        }
        Op::Gather { x, ids } => {
            let c = node.value.cols();
            with_grad(nodes, *x, |_, gx| {
                for (r, &id) in ids.iter().enumerate() {
                    for (g, &d) in gx[id * c..(id + 1) * c].iter_mut().zip(&dy[r * c..(r + 1) * c]) {
                        *g += d;
                    }
                }
            });
        }
        Op::Dropout { x, mask } => with_grad(nodes, *x, |_, gx| {
            for ((g, &d), &m) in gx.iter_mut().zip(dy).zip(mask) {
                *g += d * m;
            }
        }),
        Op::ConcatCols(xs) => {
            let total = node.value.cols();
            let m = node.value.rows();
            let mut offset = 0;
            for &x in xs {
                let c = nodes[x.0].value.cols();
                with_grad(nodes, x, |_, gx| {
                    for i in 0..m {
                        let src = &dy[i * total + offset..i * total + offset + c];
                        for (g, &d) in gx[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::SliceCols { x, start } => {
            let len = node.value.cols();
            let m = node.value.rows();
            let n = nodes[x.0].value.cols();
            with_grad(nodes, *x, |_, gx| {
                for i in 0..m {
                    let dst = &mut gx[i * n + start..i * n + start + len];
                    for (g, &d) in dst.iter_mut().zip(&dy[i * len..(i + 1) * len]) {
                        *g += d;
                    }
                }
            });
        }
        Op::SelectRows {
            mask,
            on_true,
            on_false,
        } => {
            let c = node.value.cols();
            for (var, want) in [(*on_true, true), (*on_false, false)] {
                with_grad(nodes, var, |_, gx| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m == want {
                            for (g, &d) in gx[i * c..(i + 1) * c].iter_mut().zip(&dy[i * c..(i + 1) * c]) {
                                *g += d;
                            }
                        }
                    }
                });
            }
        }
        Op::Stack(xs) => {
            let shape = node.value.shape();
            let (b, s, d) = (shape[0], shape[1], shape[2]);
            for (j, &x) in xs.iter().enumerate() {
                with_grad(nodes, x, |_, gx| {
                    for i in 0..b {
                        let off = (i * s + j) * d;
                        for (g, &dd) in gx[i * d..(i + 1) * d].iter_mut().zip(&dy[off..off + d]) {
                            *g += dd;
                        }
                    }
                });
            }
        }
        Op::BatchScores { q, keys } => {
            let ks = nodes[keys.0].value.shape().to_vec();
            let (b, s, d) = (ks[0], ks[1], ks[2]);
            with_grad(nodes, *q, |ns, gq| {
                let kv = ns[keys.0].value.data();
                for i in 0..b {
                    for j in 0..s {
                        let w = dy[i * s + j];
                        if w == T::zero() {
                            continue;
                        }
                        let off = (i * s + j) * d;
                        for (g, &k) in gq[i * d..(i + 1) * d].iter_mut().zip(&kv[off..off + d]) {
                            *g += w * k;
                        }
                    }
                }
            });
            with_grad(nodes, *keys, |ns, gk| {
                let qv = ns[q.0].value.data();
                for i in 0..b {
                    for j in 0..s {
                        let w = dy[i * s + j];
                        if w == T::zero() {
                            continue;
                        }
                        let off = (i * s + j) * d;
                        for (g, &qq) in gk[off..off + d].iter_mut().zip(&qv[i * d..(i + 1) * d]) {
                            *g += w * qq;
                        }
                    }
                }
            });
        }
        Op::WeightedSum { w, values } => {
            let vs = nodes[values.0].value.shape().to_vec();
            let (b, s, d) = (vs[0], vs[1], vs[2]);
            with_grad(nodes, *w, |ns, gw| {
                let vv = ns[values.0].value.data();
                for i in 0..b {
                    let drow = &dy[i * d..(i + 1) * d];
                    for j in 0..s {
                        let off = (i * s + j) * d;
                        gw[i * s + j] += super::dot(drow, &vv[off..off + d]);
                    }
                }
            });
            with_grad(nodes, *values, |ns, gv| {
                let wv = ns[w.0].value.data();
                for i in 0..b {
                    let drow = &dy[i * d..(i + 1) * d];
                    for j in 0..s {
                        let a = wv[i * s + j];
                        if a == T::zero() {
                            continue;
                        }
                        let off = (i * s + j) * d;
                        for (g, &dd) in gv[off..off + d].iter_mut().zip(drow) {
                            *g += a * dd;
                        }
                    }
                }
            });
        }
        Op::Sum(x) => with_grad(nodes, *x, |_, gx| {
            for g in gx.iter_mut() {
                *g += dy[0];
            }
        }),
        Op::Nll {
            logp,
            targets,
            weights,
        } => {
            let n = nodes[logp.0].value.cols();
            with_grad(nodes, *logp, |_, gl| {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    gl[i * n + t] -= w * dy[0];
                }
            });
        }
    }
}
