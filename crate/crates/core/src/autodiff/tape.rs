use std::rc::Rc;

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GatherRows(Var, Rc<[usize]>),
    ScatterWeightedSum {
        x: Var,
        segment: Rc<[usize]>,
        weight: Rc<[f64]>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    SumRows(Var),
    SelectEntries(Var, Rc<[(usize, usize)]>),
    StopGradient,
    StraightThrough { surrogate: Var },
    Sin(Var),
    Cos(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for one reverse pass.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and `backward` is a single reverse sweep. Parameters are read
/// from a [`ParamStore`] when they enter the tape and gradients are
/// accumulated back into that store. The first node holding a non-finite
/// value is remembered; see [`Tape::first_non_finite`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Broadcast rule for binary elementwise ops: the right operand may have
/// size 1 along either axis.
#[derive(Copy, Clone, Debug)]
struct Bcast {
    rows: usize,
    cols: usize,
    rhs_rows: usize,
    rhs_cols: usize,
}

impl Bcast {
    fn new(op: &'static str, a: &Matrix, b: &Matrix) -> Result<Self> {
        let (r, c) = a.shape();
        let (br, bc) = b.shape();
        if (br == r || br == 1) && (bc == c || bc == 1) {
            Ok(Self {
                rows: r,
                cols: c,
                rhs_rows: br,
                rhs_cols: bc,
            })
        } else {
            Err(Error::shape(
                op,
                format!("lhs {r}x{c}, rhs {br}x{bc} (rhs may broadcast along size-1 axes)"),
            ))
        }
    }

    #[inline]
    fn rhs_index(&self, r: usize, c: usize) -> usize {
        let rr = if self.rhs_rows == 1 { 0 } else { r };
        let cc = if self.rhs_cols == 1 { 0 } else { c };
        rr * self.rhs_cols + cc
    }

    fn apply(&self, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let (av, bv) = (a.as_slice(), b.as_slice());
        let o = out.as_mut_slice();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                o[i] = f(av[i], bv[self.rhs_index(r, c)]);
            }
        }
        out
    }

    /// Sum a full-size gradient down to the rhs shape.
    fn reduce(&self, g: &Matrix) -> Matrix {
        if self.rhs_rows == self.rows && self.rhs_cols == self.cols {
            return g.clone();
        }
        let mut out = Matrix::zeros(self.rhs_rows, self.rhs_cols);
        let gv = g.as_slice();
        let o = out.as_mut_slice();
        for r in 0..self.rows {
            for c in 0..self.cols {
                o[self.rhs_index(r, c)] += gv[r * self.cols + c];
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first node whose value holds NaN or ±∞, with a short name of
    /// the operation that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, String)> {
        self.first_non_finite.map(|i| {
            let name = format!("{:?}", self.nodes[i].op);
            let short = name.split(['(', ' ', '{']).next().unwrap_or("").to_string();
            (Var(i), short)
        })
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let bc = Bcast::new(op, self.value(a), self.value(b))?;
        let out = bc.apply(self.value(a), self.value(b), f);
        Ok(self.push(out, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Error::shape("matmul", format!("{m}x{k} * {kb}x{n}")));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, kb) = self.shape(b);
        if k != kb {
            return Err(Error::shape("matmul_t", format!("{m}x{k} * ({n}x{kb})^T")));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, self.value(a), false, self.value(b), true, 0.0, &mut out);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Elementwise absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::cos);
        self.push(out, Op::Cos(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_row(out.row_mut(r), None);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax restricted to entries where `allowed` is true.
    /// Disallowed entries get probability exactly 0. Every row must allow at
    /// least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if allowed.len() != x.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask has {} entries, input {}x{}", allowed.len(), x.rows(), x.cols()),
            ));
        }
        let cols = x.cols();
        let mut out = x.clone();
        for r in 0..out.rows() {
            let m = &allowed[r * cols..(r + 1) * cols];
            if !m.iter().any(|&b| b) {
                return Err(Error::Argument(format!(
                    "masked_softmax: row {r} has no allowed entry"
                )));
            }
            softmax_row(out.row_mut(r), Some(m));
        }
        // Backward of softmax only needs the output, so a masked softmax
        // shares the plain softmax rule.
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine
    /// part; compose with `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {} rows", x.rows()),
            ));
        }
        let out = x.select_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.into())))
    }

    /// `out[segment[i]] += weight[i] * x[i]` over `out_rows` output rows.
    pub fn scatter_weighted_sum(
        &mut self,
        a: Var,
        segment: &[usize],
        weight: &[f64],
        out_rows: usize,
    ) -> Result<Var> {
        let x = self.value(a);
        if segment.len() != x.rows() || weight.len() != x.rows() {
            return Err(Error::shape(
                "scatter_weighted_sum",
                format!(
                    "{} rows, {} segment ids, {} weights",
                    x.rows(),
                    segment.len(),
                    weight.len()
                ),
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= out_rows) {
            return Err(Error::shape(
                "scatter_weighted_sum",
                format!("segment {bad} out of range for {out_rows} output rows"),
            ));
        }
        let mut out = Matrix::zeros(out_rows, x.cols());
        for (i, (&s, &w)) in segment.iter().zip(weight).enumerate() {
            for (o, v) in out.row_mut(s).iter_mut().zip(x.row(i)) {
                *o += w * v;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterWeightedSum {
                x: a,
                segment: segment.into(),
                weight: weight.into(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows of nothing".into()));
        }
        let cols = self.shape(parts[0]).1;
        if let Some(p) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column count {} vs {cols}", self.shape(*p).1),
            ));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of nothing".into()));
        }
        let rows = self.shape(parts[0]).0;
        if let Some(p) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {rows}", self.shape(*p).0),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let orow = out.row_mut(r);
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                orow[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, x.cols()),
            ));
        }
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x: a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) of {} rows", start + len, x.rows()),
            ));
        }
        let cols = x.cols();
        let out = Matrix::from_vec(
            len,
            cols,
            x.as_slice()[start * cols..(start + len) * cols].to_vec(),
        );
        Ok(self.push(out, Op::SliceRows { x: a, start }))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(Error::shape(
                "reshape",
                format!("{}x{} into {rows}x{cols}", x.rows(), x.cols()),
            ));
        }
        let out = Matrix::from_vec(rows, cols, x.as_slice().to_vec());
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums as an `n×1` node.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.as_mut_slice()[r] = x.row(r).iter().sum();
        }
        self.push(out, Op::SumRows(a))
    }

    /// Picks `x[r, c]` for each `(r, c)` into a `k×1` node.
    pub fn select_entries(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let mut out = Matrix::zeros(entries.len(), 1);
        for (k, &(r, c)) in entries.iter().enumerate() {
            if r >= x.rows() || c >= x.cols() {
                return Err(Error::shape(
                    "select_entries",
                    format!("({r}, {c}) outside {}x{}", x.rows(), x.cols()),
                ));
            }
            out.as_mut_slice()[k] = x.get(r, c);
        }
        Ok(self.push(out, Op::SelectEntries(a, entries.into())))
    }

    /// Identity on values; blocks the gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient)
    }

    /// Value of `value`, gradient of `surrogate`.
    ///
    /// This is `stop_gradient(value − surrogate) + surrogate` with the
    /// forward result taken from `value` bitwise instead of recomputed by
    /// the subtraction and addition, which would round.
    pub fn straight_through(&mut self, value: Var, surrogate: Var) -> Result<Var> {
        if self.shape(value) != self.shape(surrogate) {
            let (a, b) = (self.shape(value), self.shape(surrogate));
            return Err(Error::shape(
                "straight_through",
                format!("value {}x{}, surrogate {}x{}", a.0, a.1, b.0, b.1),
            ));
        }
        let out = self.value(value).clone();
        Ok(self.push(out, Op::StraightThrough { surrogate }))
    }

    /// Reverse sweep from the scalar `loss`, adding each parameter's total
    /// derivative into its accumulator in `store`. Gradients are never
    /// overwritten; call [`ParamStore::zero_grad`] between steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.axpy(1.0, &g);
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `loss` with respect to every node on the tape.
    /// `None` means the node does not influence the loss.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) | Op::StopGradient => {}
            Op::StraightThrough { surrogate } => accumulate(grads, *surrogate, g.clone()),
            Op::Add(a, b) => {
                let bc = Bcast::new("add", val(*a), val(*b)).expect("checked in forward");
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, bc.reduce(g));
            }
            Op::Sub(a, b) => {
                let bc = Bcast::new("sub", val(*a), val(*b)).expect("checked in forward");
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, bc.reduce(&g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bc = Bcast::new("mul", av, bv).expect("checked in forward");
                let ga = bc.apply(g, bv, |gi, y| gi * y);
                let gb_full = {
                    let mut m = g.clone();
                    for (o, x) in m.as_mut_slice().iter_mut().zip(av.as_slice()) {
                        *o *= x;
                    }
                    m
                };
                accumulate(grads, *a, ga);
                accumulate(grads, *b, bc.reduce(&gb_full));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bc = Bcast::new("div", av, bv).expect("checked in forward");
                let ga = bc.apply(g, bv, |gi, y| gi / y);
                // d(x/y)/dy = -x/y² = -out/y
                let out = &node.value;
                let mut gb_full = bc.apply(out, bv, |o, y| -o / y);
                for (o, gi) in gb_full.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *o *= gi;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, bc.reduce(&gb_full));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                gemm(1.0, g, false, bv, true, 0.0, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                gemm(1.0, av, true, g, false, 0.0, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                gemm(1.0, g, false, bv, false, 0.0, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                gemm(1.0, g, true, av, false, 0.0, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (o, &xi) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    *o *= y * (1.0 - y);
                }
                accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *o *= sigmoid(x);
                }
                accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *o *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *o *= 2.0 * x;
                }
                accumulate(grads, *a, ga);
            }
            Op::Sin(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *o *= x.cos();
                }
                accumulate(grads, *a, ga);
            }
            Op::Cos(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *o *= -x.sin();
                }
                accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    *o *= 0.5 / y;
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gi - yi.exp() * gsum;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                accumulate(grads, *x, ga);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterWeightedSum { x, segment, weight } => {
                let xv = val(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                for (i, (&s, &w)) in segment.iter().zip(weight.iter()).enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(s)) {
                        *o = w * v;
                    }
                }
                accumulate(grads, *x, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let slice = g.as_slice()[off * cols..(off + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_vec(rows, cols, slice));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut gp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    accumulate(grads, p, gp);
                    off += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                let len = g.cols();
                for r in 0..xv.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, ga);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                ga.as_mut_slice()[start * cols..start * cols + g.len()]
                    .copy_from_slice(g.as_slice());
                accumulate(grads, *x, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::from_vec(r, c, g.as_slice().to_vec()));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g.as_slice()[i]);
                }
                accumulate(grads, *a, ga);
            }
            Op::SelectEntries(a, entries) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &(i, j)) in entries.iter().enumerate() {
                    ga.as_mut_slice()[i * c + j] += g.as_slice()[k];
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_row(row: &mut [f64], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| ok(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
