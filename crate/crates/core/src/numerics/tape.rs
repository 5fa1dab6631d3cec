//! Reverse-mode automatic differentiation over rank-2 real tensors.
//!
//! A [`Tape`] is an append-only list of nodes. Every primitive call evaluates
//! its forward value immediately and appends exactly one node that remembers
//! the operation and its input ids, so inputs always precede consumers and a
//! single reverse sweep visits each node once.
//!
//! Binary elementwise operations broadcast rank-2 operands whose dimensions
//! are equal or 1 (`[B, N] op [1, N]`, `[B, N] op [B, 1]`, `[B, N] op [1, 1]`).

use super::tensor::{gemm, RealTensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    LeakyRelu(Var, f64),
    Softmax(Var),
    Log(Var),
    LogClamped(Var, f64),
    Log1p(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var, Axis),
    SumAll(Var),
    MaxOf(Vec<Var>),
    Scale(Var, f64),
    AddScalar(Var),
    BatchVecMat(Var, Var),
    NormalizeRows(Var, f64),
    UnitModulus(Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, usize),
    SegmentMax(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: RealTensor,
    requires_grad: bool,
}

/// Small-magnitude threshold below which a (re, im) pair is treated as a dead
/// unit by [`Tape::unit_modulus`].
pub const UNIT_MODULUS_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_phases: usize,
    clamped_logs: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealTensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> RealTensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => RealTensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> RealTensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => RealTensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn broadcast_shape(
    op: &'static str,
    a: &RealTensor,
    b: &RealTensor,
) -> Result<(usize, usize), NumericsError> {
    let (ar, ac) = a.require_rank2(op)?;
    let (br, bc) = b.require_rank2(op)?;
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(t: &RealTensor, i: usize, j: usize) -> usize {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn zip_broadcast(
    a: &RealTensor,
    b: &RealTensor,
    rows: usize,
    cols: usize,
    f: impl Fn(f64, f64) -> f64,
) -> RealTensor {
    let mut out = Vec::with_capacity(rows * cols);
    if a.shape() == b.shape() {
        out.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(a.data()[bidx(a, i, j)], b.data()[bidx(b, i, j)]));
            }
        }
    }
    RealTensor::new(vec![rows, cols], out).expect("broadcast shape")
}

/// Sum a full-size `[rows, cols]` adjoint down to the (possibly broadcast)
/// shape of an operand.
fn reduce_to(shape: &[usize], full: RealTensor) -> RealTensor {
    if full.shape() == shape {
        return full;
    }
    let (rows, cols) = (full.shape()[0], full.shape()[1]);
    let mut out = RealTensor::zeros(shape);
    for i in 0..rows {
        for j in 0..cols {
            let k = bidx(&out, i, j);
            out.data_mut()[k] += full.data()[i * cols + j];
        }
    }
    out
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

    /// Phase pairs that fell below [`UNIT_MODULUS_EPS`] and were replaced by 1.
    pub fn degenerate_phases(&self) -> usize {
        self.degenerate_phases
    }

    /// Inputs that hit the floor of [`Tape::log_clamped`].
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: RealTensor, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_finite(op: &'static str, t: &RealTensor) -> Result<(), NumericsError> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// A differentiable input (model parameter).
    pub fn leaf(&mut self, value: RealTensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input (data).
    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(name, va, vb)?;
        let out = zip_broadcast(va, vb, r, c, f);
        Self::check_finite(name, &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.value(a).require_rank2("transpose")?;
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    /// Concatenate along the column axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).require_rank2("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).require_rank2("concat_cols")?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = RealTensor::new(vec![rows, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Concatenate along the row axis; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).require_rank2("concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).require_rank2("concat_rows")?;
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = RealTensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).require_rank2("slice_cols")?;
        if start > end || end > cols {
            return Err(NumericsError::SliceBounds {
                op: "slice_cols",
                start,
                end,
                len: cols,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            out.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = RealTensor::new(vec![rows, end - start], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), value, rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).require_rank2("slice_rows")?;
        if start > end || end > rows {
            return Err(NumericsError::SliceBounds {
                op: "slice_rows",
                start,
                end,
                len: rows,
            });
        }
        let out = self.value(a).data()[start * cols..end * cols].to_vec();
        let value = RealTensor::new(vec![end - start, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start), value, rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(Op::LeakyRelu(a, slope), out, rg)
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).require_rank2("softmax")?;
        if cols == 0 {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = src.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let value = RealTensor::new(vec![rows, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), value, rg))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(NumericsError::Domain { op: "log" });
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a), out, rg))
    }

    /// `ln(max(x, floor))`; clamped entries pass no gradient and are counted.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let clamped = self.value(a).data().iter().filter(|&&x| x < floor).count();
        self.clamped_logs += clamped;
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(Op::LogClamped(a, floor), out, rg)
    }

    /// `ln(1 + x)`, accurate for small `x`.
    pub fn log1p(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|&x| x <= -1.0) {
            return Err(NumericsError::Domain { op: "log1p" });
        }
        let out = self.value(a).map(f64::ln_1p);
        let rg = self.rg(a);
        Ok(self.push(Op::Log1p(a), out, rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), out, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(NumericsError::Domain { op: "sqrt" });
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(Op::Sqrt(a), out, rg))
    }

    /// Sum over an axis, keeping it as a singleton dimension.
    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        let value = reduce_axis(self.value(a), axis, "sum")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), value, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        let mut value = reduce_axis(self.value(a), axis, "mean")?;
        let n = match axis {
            Axis::Rows => self.value(a).rows(),
            Axis::Cols => self.value(a).cols(),
        };
        if n == 0 {
            return Err(NumericsError::Empty { op: "mean" });
        }
        value.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a, axis), value, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), RealTensor::scalar(s), rg)
    }

    /// Elementwise maximum over equally shaped tensors. Ties resolve to the
    /// earliest operand.
    pub fn max_of(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty { op: "max_of" })?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != out.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "max_of",
                    lhs: out.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            for (o, &x) in out.data_mut().iter_mut().zip(v.data()) {
                if x > *o {
                    *o = x;
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::MaxOf(parts.to_vec()), out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg)
    }

    /// Per-row vector-matrix product with a per-row matrix:
    /// `out[b, q] = sum_p x[b, p] * m[b, p * Q + q]` for `x: [B, P]`,
    /// `m: [B, P * Q]`.
    pub fn batch_vecmat(&mut self, x: Var, m: Var) -> Result<Var, NumericsError> {
        let (b, p) = self.value(x).require_rank2("batch_vecmat")?;
        let (b2, pq) = self.value(m).require_rank2("batch_vecmat")?;
        if b != b2 || p == 0 || pq % p != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_vecmat",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(m).shape().to_vec(),
            });
        }
        let q = pq / p;
        let (xv, mv) = (self.value(x), self.value(m));
        let mut out = vec![0.0; b * q];
        for r in 0..b {
            let xr = xv.row(r);
            let mr = mv.row(r);
            let or = &mut out[r * q..(r + 1) * q];
            for (pi, &xp) in xr.iter().enumerate() {
                let block = &mr[pi * q..(pi + 1) * q];
                for (o, &a) in or.iter_mut().zip(block) {
                    *o += xp * a;
                }
            }
        }
        let value = RealTensor::new(vec![b, q], out)?;
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(Op::BatchVecMat(x, m), value, rg))
    }

    /// Rescale every row to Euclidean norm `scale`. An all-zero row has no
    /// direction and is rejected.
    pub fn normalize_rows(&mut self, a: Var, scale: f64) -> Result<Var, NumericsError> {
        let (rows, _) = self.value(a).require_rank2("normalize_rows")?;
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..rows {
            let n = src.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::ZeroRow {
                    op: "normalize_rows",
                    row: i,
                });
            }
            let cols = src.cols();
            out.data_mut()[i * cols..(i + 1) * cols]
                .iter_mut()
                .for_each(|v| *v *= scale / n);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::NormalizeRows(a, scale), out, rg))
    }

    /// Treat each row of `a: [B, 2n]` as `n` complex numbers stored as
    /// `[re_1..re_n, im_1..im_n]` and project each onto the unit circle.
    /// Pairs with magnitude at or below [`UNIT_MODULUS_EPS`] become `1 + 0j`.
    pub fn unit_modulus(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).require_rank2("unit_modulus")?;
        if cols % 2 != 0 {
            return Err(NumericsError::Rank {
                op: "unit_modulus",
                shape: self.value(a).shape().to_vec(),
            });
        }
        let n = cols / 2;
        let src = self.value(a);
        let mut out = src.clone();
        let mut degenerate = 0;
        for i in 0..rows {
            let row = src.row(i);
            let o = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for j in 0..n {
                let (re, im) = (row[j], row[j + n]);
                let mag = re.hypot(im);
                if mag <= UNIT_MODULUS_EPS {
                    o[j] = 1.0;
                    o[j + n] = 0.0;
                    degenerate += 1;
                } else {
                    o[j] = re / mag;
                    o[j + n] = im / mag;
                }
            }
        }
        self.degenerate_phases += degenerate;
        let rg = self.rg(a);
        Ok(self.push(Op::UnitModulus(a), out, rg))
    }

    /// Output row `j` is input row `index[j]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.value(a).require_rank2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::SliceBounds {
                op: "gather_rows",
                start: bad,
                end: bad + 1,
                len: rows,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(src.row(i));
        }
        let value = RealTensor::new(vec![index.len(), cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, index.to_vec()), value, rg))
    }

    fn segment_check(&self, a: Var, size: usize, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let (rows, cols) = self.value(a).require_rank2(op)?;
        if size == 0 || rows % size != 0 {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![size],
            });
        }
        Ok((rows, cols))
    }

    /// Sum consecutive groups of `size` rows: `[G * size, C] -> [G, C]`.
    pub fn segment_sum(&mut self, a: Var, size: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.segment_check(a, size, "segment_sum")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows / size * cols];
        for i in 0..rows {
            let o = &mut out[i / size * cols..(i / size + 1) * cols];
            for (x, v) in o.iter_mut().zip(src.row(i)) {
                *x += v;
            }
        }
        let value = RealTensor::new(vec![rows / size, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SegmentSum(a, size), value, rg))
    }

    pub fn segment_mean(&mut self, a: Var, size: usize) -> Result<Var, NumericsError> {
        let s = self.segment_sum(a, size)?;
        Ok(self.scale(s, 1.0 / size as f64))
    }

    /// Elementwise maximum over consecutive groups of `size` rows. Ties go to
    /// the first row of the group.
    pub fn segment_max(&mut self, a: Var, size: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.segment_check(a, size, "segment_max")?;
        let src = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; rows / size * cols];
        for i in 0..rows {
            let o = &mut out[i / size * cols..(i / size + 1) * cols];
            for (x, &v) in o.iter_mut().zip(src.row(i)) {
                if v > *x {
                    *x = v;
                }
            }
        }
        let value = RealTensor::new(vec![rows / size, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SegmentMax(a, size), value, rg))
    }

    /// Reinterpret the row-major data with a new rank-2 shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let src = self.value(a);
        if rows * cols != src.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let value = RealTensor::new(vec![rows, cols], src.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<RealTensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(RealTensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<RealTensor>], v: Var, g: RealTensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &RealTensor, grads: &mut [Option<RealTensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let s = self.value(v).shape().to_vec();
                        self.accumulate(grads, v, reduce_to(&s, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let s = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, reduce_to(&s, g.clone()));
                }
                if self.rg(*b) {
                    let s = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, reduce_to(&s, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = (g.rows(), g.cols());
                if self.rg(*a) {
                    let full = zip_broadcast(g, vb, r, c, |gi, bi| gi * bi);
                    self.accumulate(grads, *a, reduce_to(va.shape(), full));
                }
                if self.rg(*b) {
                    let full = zip_broadcast(g, va, r, c, |gi, ai| gi * ai);
                    self.accumulate(grads, *b, reduce_to(vb.shape(), full));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = (g.rows(), g.cols());
                if self.rg(*a) {
                    let full = zip_broadcast(g, vb, r, c, |gi, bi| gi / bi);
                    self.accumulate(grads, *a, reduce_to(va.shape(), full));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y / b
                    let gy = zip_broadcast(g, y, r, c, |gi, yi| gi * yi);
                    let full = zip_broadcast(&gy, vb, r, c, |t, bi| -t / bi);
                    self.accumulate(grads, *b, reduce_to(vb.shape(), full));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), false, vb.data(), true, m, n, k, &mut da, false);
                    self.accumulate(grads, *a, RealTensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(va.data(), true, g.data(), false, k, m, n, &mut db, false);
                    self.accumulate(grads, *b, RealTensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut part = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            part.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, RealTensor::new(vec![rows, c], part).unwrap());
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let part = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, p, RealTensor::new(vec![r, cols], part).unwrap());
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut full = RealTensor::zeros(src.shape());
                let (rows, cols, w) = (src.rows(), src.cols(), g.cols());
                for i in 0..rows {
                    full.data_mut()[i * cols + start..i * cols + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, full);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = RealTensor::zeros(src.shape());
                let cols = src.cols();
                full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, full);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = zip_broadcast(g, x, g.rows(), g.cols(), |gi, xi| if xi > 0.0 { gi } else { gi * slope });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let (rows, cols) = (y.rows(), y.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, RealTensor::new(vec![rows, cols], d).unwrap());
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = zip_broadcast(g, x, g.rows(), g.cols(), |gi, xi| gi / xi);
                self.accumulate(grads, *a, d);
            }
            Op::LogClamped(a, floor) => {
                let x = self.value(*a);
                let d = zip_broadcast(g, x, g.rows(), g.cols(), |gi, xi| if xi < *floor { 0.0 } else { gi / xi });
                self.accumulate(grads, *a, d);
            }
            Op::Log1p(a) => {
                let x = self.value(*a);
                let d = zip_broadcast(g, x, g.rows(), g.cols(), |gi, xi| gi / (1.0 + xi));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d = zip_broadcast(g, x, g.rows(), g.cols(), |gi, xi| 2.0 * gi * xi);
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = zip_broadcast(g, y, g.rows(), g.cols(), |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) | Op::Mean(a, _) => {
                let src = self.value(*a);
                let n = match &node.op {
                    Op::Mean(_, Axis::Rows) => src.rows() as f64,
                    Op::Mean(_, Axis::Cols) => src.cols() as f64,
                    _ => 1.0,
                };
                let (r, c) = (src.rows(), src.cols());
                let d = zip_broadcast(&RealTensor::zeros(&[r, c]), g, r, c, |_, gi| gi / n);
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let src = self.value(*a);
                self.accumulate(grads, *a, RealTensor::filled(src.shape(), g.item()));
            }
            Op::MaxOf(parts) => {
                let n = y.len();
                let mut winners = vec![usize::MAX; n];
                for (pi, &p) in parts.iter().enumerate() {
                    let v = self.value(p).data();
                    for e in 0..n {
                        if winners[e] == usize::MAX && v[e] == y.data()[e] {
                            winners[e] = pi;
                        }
                    }
                }
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.rg(p) {
                        continue;
                    }
                    let mut d = RealTensor::zeros(y.shape());
                    for e in 0..n {
                        if winners[e] == pi {
                            d.data_mut()[e] = g.data()[e];
                        }
                    }
                    self.accumulate(grads, p, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::BatchVecMat(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let (b, p) = (xv.rows(), xv.cols());
                let q = mv.cols() / p;
                if self.rg(*x) {
                    let mut dx = vec![0.0; b * p];
                    for r in 0..b {
                        let (gr, mr) = (g.row(r), mv.row(r));
                        for pi in 0..p {
                            let block = &mr[pi * q..(pi + 1) * q];
                            dx[r * p + pi] = block.iter().zip(gr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *x, RealTensor::new(vec![b, p], dx).unwrap());
                }
                if self.rg(*m) {
                    let mut dm = vec![0.0; b * p * q];
                    for r in 0..b {
                        let (gr, xr) = (g.row(r), xv.row(r));
                        for pi in 0..p {
                            for qi in 0..q {
                                dm[r * p * q + pi * q + qi] = xr[pi] * gr[qi];
                            }
                        }
                    }
                    self.accumulate(grads, *m, RealTensor::new(vec![b, p * q], dm).unwrap());
                }
            }
            Op::NormalizeRows(a, scale) => {
                let x = self.value(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let (xr, gr, yr) = (x.row(i), g.row(i), y.row(i));
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // y = s x / n ; dx = (s / n) (g - (u.g) u), u = y / s
                    let ug: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / scale;
                    for j in 0..cols {
                        d[i * cols + j] = scale / n * (gr[j] - ug * yr[j] / scale);
                    }
                }
                self.accumulate(grads, *a, RealTensor::new(vec![rows, cols], d).unwrap());
            }
            Op::UnitModulus(a) => {
                let x = self.value(*a);
                let (rows, cols) = (x.rows(), x.cols());
                let n = cols / 2;
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let (xr, gr, yr) = (x.row(i), g.row(i), y.row(i));
                    for j in 0..n {
                        let mag = xr[j].hypot(xr[j + n]);
                        if mag <= UNIT_MODULUS_EPS {
                            continue;
                        }
                        let (ur, ui) = (yr[j], yr[j + n]);
                        let dot = ur * gr[j] + ui * gr[j + n];
                        d[i * cols + j] = (gr[j] - dot * ur) / mag;
                        d[i * cols + j + n] = (gr[j + n] - dot * ui) / mag;
                    }
                }
                self.accumulate(grads, *a, RealTensor::new(vec![rows, cols], d).unwrap());
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut d = RealTensor::zeros(src.shape());
                for (j, &i) in index.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * cols..(i + 1) * cols];
                    for (x, v) in dst.iter_mut().zip(g.row(j)) {
                        *x += v;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SegmentSum(a, size) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut d = Vec::with_capacity(src.len());
                for i in 0..src.rows() {
                    d.extend_from_slice(g.row(i / size));
                }
                self.accumulate(grads, *a, RealTensor::new(vec![src.rows(), cols], d).unwrap());
            }
            Op::SegmentMax(a, size) => {
                let src = self.value(*a);
                let cols = src.cols();
                let mut d = RealTensor::zeros(src.shape());
                for grp in 0..src.rows() / size {
                    for c in 0..cols {
                        let target = y.get(grp, c);
                        let win = (grp * size..(grp + 1) * size)
                            .find(|&i| src.get(i, c) == target)
                            .expect("max is attained");
                        d.data_mut()[win * cols + c] += g.get(grp, c);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, RealTensor::new(shape, g.data().to_vec()).unwrap());
            }
        }
    }
}

fn reduce_axis(t: &RealTensor, axis: Axis, op: &'static str) -> Result<RealTensor, NumericsError> {
    let (rows, cols) = t.require_rank2(op)?;
    Ok(match axis {
        Axis::Rows => {
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            RealTensor::new(vec![1, cols], out)?
        }
        Axis::Cols => {
            let out = (0..rows).map(|i| t.row(i).iter().sum()).collect();
            RealTensor::new(vec![rows, 1], out)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leaky_relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::row_vector(&[-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::row_vector(&[0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::zeros(&[3, 0]));
        assert!(matches!(t.softmax(x), Err(NumericsError::Empty { .. })));
    }

    #[test]
    fn identity_matmul_on_tape() {
        let mut t = Tape::new();
        let i = t.constant(RealTensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = RealTensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mv = t.constant(m.clone());
        let y = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(y), &m);
    }

    #[test]
    fn each_call_appends_one_node() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::row_vector(&[1.0, 2.0]));
        let before = t.len();
        let s = t.square(x);
        let _ = t.sum_all(s);
        assert_eq!(t.len(), before + 2);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(RealTensor::zeros(&[2, 3]));
        let b = t.constant(RealTensor::zeros(&[3, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::row_vector(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
        assert_eq!(g.wrt(loss).data(), &[1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::row_vector(&[1.0, 2.0]));
        let c = t.constant(RealTensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(NumericsError::NonScalarLoss { .. })));
    }

    #[test]
    fn unit_modulus_projects_and_flags_dead_pairs() {
        let mut t = Tape::new();
        // pairs: (3,4) and (0,0)
        let x = t.leaf(RealTensor::row_vector(&[3.0, 0.0, 4.0, 0.0]));
        let y = t.unit_modulus(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[2] - 0.8).abs() < 1e-15);
        assert_eq!((v[1], v[3]), (1.0, 0.0));
        assert_eq!(t.degenerate_phases(), 1);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut t = Tape::new();
        let a = t.leaf(RealTensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let row = t.leaf(RealTensor::row_vector(&[10.0, 20.0]));
        let col = t.leaf(RealTensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let s = t.add(a, row).unwrap();
        let p = t.mul(s, col).unwrap();
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(row).data(), &[5.0, 5.0]);
        assert_eq!(g.wrt(col).data(), &[33.0, 37.0]);
        assert_eq!(g.wrt(a).data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    /// Central differences on a scalar function of one tensor.
    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: RealTensor) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let loss = build(&mut t, x);
        let g = t.backward(loss).unwrap().wrt(x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let x = t.leaf(xp);
                let l = build(&mut t, x);
                t.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(err < 1e-5, "entry {i}: autodiff {a} vs fd {fd}");
        }
    }

    #[test]
    fn fd_softmax_log_chain() {
        let x0 = RealTensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        fd_check(
            |t, x| {
                let s = t.softmax(x).unwrap();
                let w = t.constant(RealTensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.5, 3.0, 1.0]).unwrap());
                let l = t.log(s).unwrap();
                let p = t.mul(l, w).unwrap();
                t.sum_all(p)
            },
            x0,
        );
    }

    #[test]
    fn fd_normalize_unit_modulus_bvm() {
        let x0 = RealTensor::new(vec![2, 4], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.5, 0.9]).unwrap();
        fd_check(
            |t, x| {
                let n = t.normalize_rows(x, 1.7).unwrap();
                let u = t.unit_modulus(x).unwrap();
                let m = t.constant(RealTensor::new(vec![2, 8], (0..16).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap());
                let b = t.batch_vecmat(u, m).unwrap();
                let q = t.mul(n, n).unwrap();
                let s1 = t.sum_all(b);
                let sq = t.square(s1);
                let sqrt = t.sqrt(sq).unwrap();
                let s2 = t.sum_all(q);
                let x2 = t.mul(x, x).unwrap();
                let lp = t.log1p(x2).unwrap();
                let s3 = t.sum_all(lp);
                let a = t.add(sqrt, s2).unwrap();
                t.add(a, s3).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn fd_structural_ops() {
        let x0 = RealTensor::new(vec![3, 2], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        fd_check(
            |t, x| {
                let xt = t.transpose(x).unwrap();
                let m = t.matmul(x, xt).unwrap();
                let r0 = t.slice_rows(x, 0, 1).unwrap();
                let r1 = t.slice_rows(x, 1, 3).unwrap();
                let back = t.concat_rows(&[r1, r0]).unwrap();
                let c = t.concat_cols(&[back, x]).unwrap();
                let sc = t.slice_cols(c, 1, 3).unwrap();
                let mx = t.max_of(&[sc, back]).unwrap();
                let lr = t.leaky_relu(mx, 0.01);
                let mean = t.mean(lr, Axis::Rows).unwrap();
                let sum = t.sum(m, Axis::Cols).unwrap();
                let d = t.add_scalar(sum, 5.0);
                let inv = t.div(x, d).unwrap();
                let s1 = t.sum_all(mean);
                let s2 = t.sum_all(inv);
                let s2 = t.scale(s2, 0.5);
                let diff = t.sub(s1, s2).unwrap();
                let e = t.sub(x, mx).unwrap();
                let e = t.sum_all(e);
                t.add(diff, e).unwrap()
            },
            x0,
        );
    }

    #[test]
    fn fd_segment_gather_reshape() {
        let x0 = RealTensor::new(vec![4, 3], (0..12).map(|v| ((v * 7 % 5) as f64 - 2.1) * 0.37).collect()).unwrap();
        fd_check(
            |t, x| {
                let g = t.gather_rows(x, &[3, 0, 0, 2, 1, 3]).unwrap();
                let s = t.segment_sum(g, 2).unwrap();
                let m = t.segment_max(x, 2).unwrap();
                let mean = t.segment_mean(x, 4).unwrap();
                let r = t.reshape(s, 1, 9).unwrap();
                let sq = t.square(r);
                let a = t.sum_all(sq);
                let mm = t.mul(m, m).unwrap();
                let b = t.sum_all(mm);
                let c = t.sum_all(mean);
                let ab = t.add(a, b).unwrap();
                t.add(ab, c).unwrap()
            },
            x0,
        );
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let mut t = Tape::new();
            let x = t.constant(RealTensor::row_vector(&logits));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let xs = t.constant(RealTensor::row_vector(&shifted));
            let y = t.softmax(x).unwrap();
            let ys = t.softmax(xs).unwrap();
            let total: f64 = t.value(y).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (a, b) in t.value(y).data().iter().zip(t.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
