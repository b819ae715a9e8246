use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every node value is rounded to single precision after it is computed.
    F32,
}

const COSINE_EPS: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColMean(usize),
    ColMax(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>, Vec<f64>),
    SegmentMax(usize, Vec<usize>),
    CrossEntropy(usize, Vec<usize>, Vec<f64>, f64),
    BceWithLogits(usize, Vec<f64>),
    Pick(usize, Vec<usize>),
    RowL1(usize),
    RowL2(usize),
    RowCosine(usize, usize),
    AdditiveAttention(usize, usize, usize),
    LayerNorm(usize, Vec<f64>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid topological order for backward.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    precision: Precision,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data)
}

/// `c (m×n) = a · b` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: strides describe in-bounds layouts of `a` (m×k), `b` (k×n)
    // and the row-major m×n output, all checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a (m×k) · b (k×n)`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == m * k && b.len() == k * n);
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
}

/// `a (m×k) · bᵀ` with `b` stored as `n×k`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == m * k && b.len() == n * k);
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize)
}

/// `aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() == k * m && b.len() == k * n);
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1)
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            precision: Precision::F64,
            grad_enabled: true,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::new()
        }
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value; the usual way to read a loss.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter into the graph. Repeated calls return the
    /// same node. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    /// Cuts the gradient path: the result holds the same value as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, mk, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a (m×n) + row (1×n)` broadcast over the leading rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += tr.data()[i % n];
        }
        let t = mat(ta.rows(), n, data);
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(t, Op::AddRow(a.0, row.0), rg))
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.val(a), self.val(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / n])
            .collect();
        let t = mat(ta.rows(), n, data);
        let rg = self.rg(&[a.0, col.0]);
        Ok(self.push(t, Op::MulCol(a.0, col.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.0))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let t = mat(m, n, mm(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = mat(n, m, data);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Transpose(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let mut data = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(x, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Softmax(a.0), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for x in ta.data().chunks(n) {
            let lse = log_sum_exp(x);
            data.extend(x.iter().map(|v| v - lse));
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(t, Op::LogSoftmax(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Sum over columns of each row: `m×n → m×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let data: Vec<f64> = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let t = mat(data.len(), 1, data);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::RowSum(a.0), rg)
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n];
        for r in ta.data().chunks(n) {
            for (o, &x) in data.iter_mut().zip(r) {
                *o += x;
            }
        }
        for o in &mut data {
            *o /= m as f64;
        }
        let rg = self.rg(&[a.0]);
        self.push(mat(1, n, data), Op::ColMean(a.0), rg)
    }

    /// Max over rows: `m×n → 1×n`; ties resolve to the lowest row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut arg = vec![0usize; n];
        let mut data = ta.data()[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                let x = ta.data()[i * n + j];
                if x > data[j] {
                    data[j] = x;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(mat(1, n, data), Op::ColMax(a.0, arg), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let m = self.val(*first).rows();
        for p in parts {
            if self.val(*p).rows() != m {
                return Err(shape_err("concat_cols", self.val(*first), self.val(*p)));
            }
        }
        let n: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.val(*p).row_slice(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(mat(m, n, data), Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let n = self.val(*first).cols();
        let mut data = Vec::new();
        for p in parts {
            let t = self.val(*p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.val(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let m = data.len() / n;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(mat(m, n, data), Op::ConcatRows(ids), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        if start >= end || end > ta.cols() {
            return Err(invalid(
                "slice_cols",
                format!("range {start}..{end} of {:?}", ta.shape()),
            ));
        }
        let w = end - start;
        let data: Vec<f64> = ta
            .data()
            .chunks(ta.cols())
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let t = mat(ta.rows(), w, data);
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::SliceCols(a.0, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        if start >= end || end > ta.rows() {
            return Err(invalid(
                "slice_rows",
                format!("range {start}..{end} of {:?}", ta.shape()),
            ));
        }
        let n = ta.cols();
        let t = mat(end - start, n, ta.data()[start * n..end * n].to_vec());
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::SliceRows(a.0, start), rg))
    }

    /// Selects rows by index (repeats allowed). Embedding lookup is this op
    /// applied to an embedding table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        if idx.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(invalid("gather_rows", format!("row {i} out of {m}")));
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let t = mat(idx.len(), n, data);
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::GatherRows(a.0, idx.to_vec()), rg))
    }

    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        self.gather_rows(table, tokens)
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &[usize], nseg: usize) -> Result<()> {
        let ta = self.val(a);
        if seg.len() != ta.rows() || nseg == 0 {
            return Err(invalid(op, format!("{} segment ids for {} rows", seg.len(), ta.rows())));
        }
        if let Some(&s) = seg.iter().find(|&&s| s >= nseg) {
            return Err(invalid(op, format!("segment {s} >= {nseg}")));
        }
        Ok(())
    }

    /// Per-segment row mean: `m×n → nseg×n`; empty segments are zero.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        self.check_segments("segment_mean", a, seg, nseg)?;
        let ta = self.val(a);
        let n = ta.cols();
        let mut counts = vec![0.0; nseg];
        let mut data = vec![0.0; nseg * n];
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1.0;
            for (o, &x) in data[s * n..(s + 1) * n].iter_mut().zip(ta.row_slice(i)) {
                *o += x;
            }
        }
        for s in 0..nseg {
            if counts[s] > 0.0 {
                for o in &mut data[s * n..(s + 1) * n] {
                    *o /= counts[s];
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(mat(nseg, n, data), Op::SegmentMean(a.0, seg.to_vec(), counts), rg))
    }

    /// Per-segment column max: `m×n → nseg×n`; empty segments are zero.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        self.check_segments("segment_max", a, seg, nseg)?;
        let ta = self.val(a);
        let n = ta.cols();
        let mut arg = vec![usize::MAX; nseg * n];
        let mut data = vec![0.0; nseg * n];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..n {
                let x = ta.data()[i * n + j];
                let k = s * n + j;
                if arg[k] == usize::MAX || x > data[k] {
                    data[k] = x;
                    arg[k] = i;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(mat(nseg, n, data), Op::SegmentMax(a.0, arg), rg))
    }

    /// Mean softmax cross-entropy of `logits (m×C)` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let w = vec![1.0; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// `Σ wᵢ·CEᵢ / Σ wᵢ`; zero when all weights vanish.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let tl = self.val(logits);
        let (m, c) = (tl.rows(), tl.cols());
        if targets.len() != m || weights.len() != m {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets / {} weights for {m} rows", targets.len(), weights.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("cross_entropy", format!("target {t} >= {c} classes")));
        }
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if wsum > 0.0 {
            for (i, x) in tl.data().chunks(c).enumerate() {
                if weights[i] != 0.0 {
                    loss += weights[i] * (log_sum_exp(x) - x[targets[i]]);
                }
            }
            loss /= wsum;
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits.0, targets.to_vec(), weights.to_vec(), wsum),
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` (m×1) against soft targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.val(logits);
        if tl.cols() != 1 || tl.rows() != targets.len() {
            return Err(invalid(
                "bce_with_logits",
                format!("{:?} vs {} targets", tl.shape(), targets.len()),
            ));
        }
        let m = targets.len() as f64;
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / m;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits.0, targets.to_vec()), rg))
    }

    /// `out[i] = a[i, idx[i]]`, giving `m×1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        if idx.len() != ta.rows() {
            return Err(invalid("pick", format!("{} indices for {} rows", idx.len(), ta.rows())));
        }
        let n = ta.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(invalid("pick", format!("column {j} >= {n}")));
            }
            data.push(ta.data()[i * n + j]);
        }
        let t = mat(idx.len(), 1, data);
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Pick(a.0, idx.to_vec()), rg))
    }

    /// Row-wise L1 norm: `m×n → m×1`.
    pub fn l1_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data: Vec<f64> = ta
            .data()
            .chunks(ta.cols())
            .map(|r| r.iter().map(|x| x.abs()).sum())
            .collect();
        let t = mat(data.len(), 1, data);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::RowL1(a.0), rg)
    }

    /// Row-wise L2 norm: `m×n → m×1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data: Vec<f64> = ta
            .data()
            .chunks(ta.cols())
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let t = mat(data.len(), 1, data);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::RowL2(a.0), rg)
    }

    /// Row-wise cosine similarity `a·b / ((|a|+ε)(|b|+ε))`: `m×n, m×n → m×1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let n = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .chunks(n)
            .zip(tb.data().chunks(n))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / ((nx + COSINE_EPS) * (ny + COSINE_EPS))
            })
            .collect();
        let t = mat(data.len(), 1, data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::RowCosine(a.0, b.0), rg))
    }

    /// Additive attention scores `s[b,p] = Σₐ v[a]·tanh(q[b,a] + k[p,a])`.
    pub fn additive_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let a = tq.cols();
        if tk.cols() != a || tv.cols() != a || tv.rows() != 1 {
            return Err(shape_err("additive_attention", tq, tk));
        }
        let (bn, pn) = (tq.rows(), tk.rows());
        let mut data = vec![0.0; bn * pn];
        for b in 0..bn {
            let qr = tq.row_slice(b);
            for p in 0..pn {
                let kr = tk.row_slice(p);
                data[b * pn + p] = (0..a).map(|j| tv.data()[j] * (qr[j] + kr[j]).tanh()).sum();
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(mat(bn, pn, data), Op::AdditiveAttention(q.0, k.0, v.0), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.cols();
        let mut inv = Vec::with_capacity(ta.rows());
        let mut data = Vec::with_capacity(ta.len());
        for r in ta.data().chunks(n) {
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv.push(is);
            data.extend(r.iter().map(|x| (x - mu) * is));
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(t, Op::LayerNorm(a.0, inv), rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.val(loss).all_finite() {
            return Err(TensorError::NonFinite(format!("loss = {}", self.item(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        let v = |j: usize| &nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a).data(), v(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let n = out.cols();
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*r, &mut |d| {
                    for (k, y) in g.iter().enumerate() {
                        d[k % n] += y;
                    }
                });
            }
            Op::MulCol(a, c) => {
                let n = out.cols();
                let (va, vc) = (v(*a).data(), v(*c).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vc[k / n];
                    }
                });
                acc(*c, &mut |d| {
                    for k in 0..g.len() {
                        d[k / n] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |d| {
                    let da = mm_nt(g, tb.data(), m, n, k);
                    d.iter_mut().zip(da).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |d| {
                    let db = mm_tn(ta.data(), g, m, k, n);
                    d.iter_mut().zip(db).for_each(|(x, y)| *x += y);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (v(*a).rows(), v(*a).cols());
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = v(*a).data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = v(*a).data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                });
            }
            Op::Abs(a) => {
                let x = v(*a).data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(x[k]);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for r in 0..y.len() / n {
                        let s = r * n;
                        let dot: f64 = (0..n).map(|c| g[s + c] * y[s + c]).sum();
                        for c in 0..n {
                            d[s + c] += y[s + c] * (g[s + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for r in 0..y.len() / n {
                        let s = r * n;
                        let gs: f64 = g[s..s + n].iter().sum();
                        for c in 0..n {
                            d[s + c] += g[s + c] - y[s + c].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::RowSum(a) => {
                let n = v(*a).cols();
                acc(*a, &mut |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k / n];
                    }
                });
            }
            Op::ColMean(a) => {
                let (m, n) = (v(*a).rows(), v(*a).cols());
                acc(*a, &mut |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k % n] / m as f64;
                    }
                });
            }
            Op::ColMax(a, arg) => {
                let n = v(*a).cols();
                acc(*a, &mut |d| {
                    for (j, &r) in arg.iter().enumerate() {
                        d[r * n + j] += g[j];
                    }
                });
            }
            Op::ConcatCols(ids) => {
                let m = out.rows();
                let n = out.cols();
                let mut off = 0;
                for &p in ids {
                    let w = v(p).cols();
                    acc(p, &mut |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += g[r * n + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &p in ids {
                    let len = v(p).len();
                    acc(p, &mut |d| {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                    });
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let n = v(*a).cols();
                let w = out.cols();
                acc(*a, &mut |d| {
                    for r in 0..out.rows() {
                        for c in 0..w {
                            d[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                acc(*a, &mut |d| {
                    d[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
            }
            Op::GatherRows(a, idx) => {
                let n = out.cols();
                acc(*a, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            d[src * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::SegmentMean(a, seg, counts) => {
                let n = out.cols();
                acc(*a, &mut |d| {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..n {
                            d[r * n + c] += g[s * n + c] / counts[s];
                        }
                    }
                });
            }
            Op::SegmentMax(a, arg) => {
                let n = out.cols();
                acc(*a, &mut |d| {
                    for (k, &r) in arg.iter().enumerate() {
                        if r != usize::MAX {
                            d[r * n + k % n] += g[k];
                        }
                    }
                });
            }
            Op::CrossEntropy(a, targets, weights, wsum) => {
                if *wsum <= 0.0 {
                    return;
                }
                let c = v(*a).cols();
                let x = v(*a).data();
                acc(*a, &mut |d| {
                    let mut p = vec![0.0; c];
                    for (r, &t) in targets.iter().enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let s = r * c;
                        softmax_row(&x[s..s + c], &mut p);
                        let scale = g[0] * weights[r] / wsum;
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[s + j] += scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits(a, targets) => {
                let x = v(*a).data();
                let m = targets.len() as f64;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[0] * (sigmoid(x[k]) - targets[k]) / m;
                    }
                });
            }
            Op::Pick(a, idx) => {
                let n = v(*a).cols();
                acc(*a, &mut |d| {
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * n + j] += g[r];
                    }
                });
            }
            Op::RowL1(a) => {
                let x = v(*a).data();
                let n = v(*a).cols();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k / n] * sign(x[k]);
                    }
                });
            }
            Op::RowL2(a) => {
                let x = v(*a).data();
                let n = v(*a).cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if y[k / n] > 0.0 {
                            d[k] += g[k / n] * x[k] / y[k / n];
                        }
                    }
                });
            }
            Op::RowCosine(a, b) => {
                let n = v(*a).cols();
                let (xa, xb) = (v(*a).data(), v(*b).data());
                let cos = out.data();
                let grad_wrt = |x: &[f64], y: &[f64], d: &mut [f64]| {
                    for r in 0..cos.len() {
                        let xr = &x[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let nx = xr.iter().map(|t| t * t).sum::<f64>().sqrt();
                        let ny = yr.iter().map(|t| t * t).sum::<f64>().sqrt();
                        let (px, py) = (nx + COSINE_EPS, ny + COSINE_EPS);
                        for c in 0..n {
                            let mut gd = yr[c] / (px * py);
                            if nx > 0.0 {
                                gd -= cos[r] * xr[c] / (nx * px);
                            }
                            d[r * n + c] += g[r] * gd;
                        }
                    }
                };
                acc(*a, &mut |d| grad_wrt(xa, xb, d));
                acc(*b, &mut |d| grad_wrt(xb, xa, d));
            }
            Op::AdditiveAttention(q, k, w) => {
                let (tq, tk, tw) = (v(*q), v(*k), v(*w));
                let a = tq.cols();
                let (bn, pn) = (tq.rows(), tk.rows());
                let mut dq = vec![0.0; bn * a];
                let mut dk = vec![0.0; pn * a];
                let mut dw = vec![0.0; a];
                for b in 0..bn {
                    for p in 0..pn {
                        let gs = g[b * pn + p];
                        if gs == 0.0 {
                            continue;
                        }
                        for j in 0..a {
                            let t = (tq.data()[b * a + j] + tk.data()[p * a + j]).tanh();
                            let dpre = gs * tw.data()[j] * (1.0 - t * t);
                            dq[b * a + j] += dpre;
                            dk[p * a + j] += dpre;
                            dw[j] += gs * t;
                        }
                    }
                }
                acc(*q, &mut |d| d.iter_mut().zip(&dq).for_each(|(x, y)| *x += y));
                acc(*k, &mut |d| d.iter_mut().zip(&dk).for_each(|(x, y)| *x += y));
                acc(*w, &mut |d| d.iter_mut().zip(&dw).for_each(|(x, y)| *x += y));
            }
            Op::LayerNorm(a, inv) => {
                let n = out.cols();
                let y = out.data();
                acc(*a, &mut |d| {
                    for (r, is) in inv.iter().enumerate() {
                        let s = r * n;
                        let mg: f64 = g[s..s + n].iter().sum::<f64>() / n as f64;
                        let mgy: f64 = (0..n).map(|c| g[s + c] * y[s + c]).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[s + c] += is * (g[s + c] - mg - y[s + c] * mgy);
                        }
                    }
                });
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the node's value; zeros when no path reached it.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        let shape = g.shape(v).to_vec();
        match self.get_raw(v) {
            Some(d) => Tensor::new(shape, d.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
