use std::sync::Arc;

use super::array::{dot_slices, Array};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous segment layout over the rows of an `E x _` array.
///
/// Segment `s` covers rows `offsets[s]..offsets[s + 1]`. Empty segments are
/// allowed; their softmax is empty and their weighted sum is zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    /// Builds the layout from per-row segment ids, which must be sorted.
    pub fn from_sorted_ids(ids: &[usize], num_segments: usize) -> Result<Self, NumError> {
        let mut offsets = vec![0usize; num_segments + 1];
        let mut prev = 0usize;
        for (row, &id) in ids.iter().enumerate() {
            if id < prev || id >= num_segments {
                return Err(NumError::BadSegments { row, id, num_segments });
            }
            prev = id;
            offsets[id + 1] += 1;
        }
        for s in 0..num_segments {
            offsets[s + 1] += offsets[s];
        }
        Ok(Self { offsets })
    }

    pub fn single(len: usize) -> Self {
        Self { offsets: vec![0, len] }
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    #[inline]
    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Hadamard(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Transpose(Var),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum(Var, Var, Arc<Segments>),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Mean(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    LogClamped(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Arc<Array>,
    op: Op,
}

/// Records a computation over [`Array`] values for reverse-mode
/// differentiation.
///
/// Every op validates shapes, evaluates eagerly, and fails if the result
/// contains a non-finite value. A tape belongs to one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// influence the loss.
    pub fn get(&self, var: Var) -> Array {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Array::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Array {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Array::zeros(r, c)
            }
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> NumError {
    NumError::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
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

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    /// Records an input. Parameters and constants are both leaves; the
    /// caller decides which gradients to read.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.leaf_shared(Arc::new(value))
    }

    /// Records an input without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Array>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Shared handle to a recorded value.
    pub fn shared(&self, var: Var) -> Arc<Array> {
        Arc::clone(&self.nodes[var.0].value)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.matmul(bv);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Elementwise sum. `b` may also be a `1 x cols` row, which is
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.zip_map(bv, |x, y| x + y);
            self.push("add", out, Op::Add(a, b))
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, &y) in out.row_slice_mut(r).iter_mut().zip(bv.data()) {
                    *o += y;
                }
            }
            self.push("add", out, Op::AddRow(a, b))
        } else {
            Err(shape_err("add", av, bv))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s))
    }

    /// `s * a + shift`.
    pub fn affine(&mut self, a: Var, s: f64, shift: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| s * x + shift);
        self.push("affine", out, Op::Affine(a, s))
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", av, sv));
        }
        let k = sv.item();
        let out = av.map(|x| x * k);
        self.push("mul_scalar", out, Op::MulScalar(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("hadamard", av, bv));
        }
        let out = av.zip_map(bv, |x, y| x * y);
        self.push("hadamard", out, Op::Hadamard(a, b))
    }

    /// Stacks arrays vertically; all inputs must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or(NumError::EmptyInput { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Array::from_vec(rows, cols, data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins arrays horizontally; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or(NumError::EmptyInput { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_slice_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row_slice(r));
                offset += v.cols();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        let mut out = Array::zeros(indices.len(), av.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= av.rows() {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: av.rows(),
                });
            }
            out.row_slice_mut(r).copy_from_slice(av.row_slice(i));
        }
        self.push("gather_rows", out, Op::GatherRows(a, indices.into()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Softmax of an `E x 1` column within each segment.
    pub fn segment_softmax(&mut self, scores: Var, segments: Arc<Segments>) -> Result<Var, NumError> {
        let sv = self.value(scores);
        if sv.cols() != 1 || sv.rows() != segments.num_rows() {
            return Err(NumError::SegmentShape {
                op: "segment_softmax",
                shape: sv.shape(),
                rows: segments.num_rows(),
            });
        }
        let mut out = Array::zeros(sv.rows(), 1);
        for s in 0..segments.num_segments() {
            let range = segments.range(s);
            if range.is_empty() {
                continue;
            }
            let x = &sv.data()[range.clone()];
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.data_mut()[range.clone()].iter_mut().zip(x) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in &mut out.data_mut()[range] {
                *o /= z;
            }
        }
        self.push("segment_softmax", out, Op::SegmentSoftmax(scores, segments))
    }

    /// Per segment `s`, `Σ_{e ∈ s} weights[e] * values[e, :]`; returns a
    /// `num_segments x cols` array.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        segments: Arc<Segments>,
    ) -> Result<Var, NumError> {
        let (vv, wv) = (self.value(values), self.value(weights));
        if vv.rows() != segments.num_rows() || wv.shape() != (segments.num_rows(), 1) {
            return Err(shape_err("segment_weighted_sum", vv, wv));
        }
        let mut out = Array::zeros(segments.num_segments(), vv.cols());
        for s in 0..segments.num_segments() {
            for e in segments.range(s) {
                let w = wv.data()[e];
                for (o, &v) in out.row_slice_mut(s).iter_mut().zip(vv.row_slice(e)) {
                    *o += w * v;
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            out,
            Op::SegmentWeightedSum(values, weights, segments),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    /// Elementwise mean of equally shaped arrays.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or(NumError::EmptyInput { op: "mean_of" })?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            if v.shape() != acc.shape() {
                return Err(shape_err("mean_of", &acc, v));
            }
            acc.add_assign(v);
        }
        let k = parts.len() as f64;
        let out = acc.map(|x| x / k);
        self.push("mean_of", out, Op::Mean(parts.to_vec()))
    }

    /// Frobenius inner product, returned as `1 x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("dot", av, bv));
        }
        let out = Array::scalar(dot_slices(av.data(), bv.data()));
        self.push("dot", out, Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let out = Array::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|x| x.clamp(lo, hi).ln());
        self.push("log_clamped", out, Op::LogClamped(a, lo, hi))
    }

    /// Sign pattern of every non-smooth point on the tape (leaky ReLU inputs
    /// and clamp boundaries). Two evaluations with different signatures
    /// straddle a kink, so a finite difference between them is unreliable.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(a, _) => {
                    sig.extend(self.value(*a).data().iter().map(|&x| x >= 0.0));
                }
                Op::LogClamped(a, lo, hi) => {
                    sig.extend(self.value(*a).data().iter().map(|&x| x > *lo && x < *hi));
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumError::NotScalar { shape: lv.shape() });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = Array::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Scale(a, s) | Op::Affine(a, s) => {
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).item();
                    let gs = dot_slices(g.data(), self.value(*a).data());
                    accumulate(&mut grads, *a, g.map(|x| x * k));
                    accumulate(&mut grads, *s, Array::scalar(gs));
                }
                Op::Hadamard(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, p, Array::from_vec(rows, cols, slice));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = Array::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Array::zeros(rows, cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y: &Array = &node.value;
                    let mut ga = Array::zeros(y.rows(), 1);
                    for s in 0..segments.num_segments() {
                        let range = segments.range(s);
                        let inner = dot_slices(&g.data()[range.clone()], &y.data()[range.clone()]);
                        for e in range {
                            ga.data_mut()[e] = y.data()[e] * (g.data()[e] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentWeightedSum(values, weights, segments) => {
                    let (vv, wv) = (self.value(*values), self.value(*weights));
                    let mut gv = Array::zeros(vv.rows(), vv.cols());
                    let mut gw = Array::zeros(wv.rows(), 1);
                    for s in 0..segments.num_segments() {
                        let gs = g.row_slice(s);
                        for e in segments.range(s) {
                            let w = wv.data()[e];
                            for (o, &x) in gv.row_slice_mut(e).iter_mut().zip(gs) {
                                *o = w * x;
                            }
                            gw.data_mut()[e] = dot_slices(gs, vv.row_slice(e));
                        }
                    }
                    accumulate(&mut grads, *values, gv);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::LeakyRelu(a, slope) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v >= 0.0 { x } else { x * slope });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(parts) => {
                    let k = parts.len() as f64;
                    for &p in parts {
                        accumulate(&mut grads, p, g.map(|x| x / k));
                    }
                }
                Op::Dot(a, b) => {
                    let k = g.item();
                    accumulate(&mut grads, *a, self.value(*b).map(|x| x * k));
                    accumulate(&mut grads, *b, self.value(*a).map(|x| x * k));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Array::filled(rows, cols, g.item()));
                }
                Op::LogClamped(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > *lo && v < *hi { x / v } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Array>], var: Var, g: Array) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
