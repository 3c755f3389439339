use std::collections::{HashMap, HashSet};

use super::{Mat, ParamId, ParamStore};

/// Additive attention-mask value. Large enough that `exp` underflows to
/// exactly zero after max-subtraction, small enough to stay finite.
pub const NEG_INF_MASK: f64 = -1e9;

const NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    PickCols(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode differentiation over [`Mat`] values.
///
/// Parameters enter through [`Tape::param`]; they only receive gradients if
/// their store was registered with [`Tape::train`]. Everything else is a
/// constant as far as `backward` is concerned.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    trainable: HashSet<u64>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: HashMap<(u64, usize), Var>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Mat> {
        self.params.get(&(store.uid(), id.0)).and_then(|v| self.wrt(*v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks every parameter of `store` as trainable on this tape.
    pub fn train(&mut self, store: &ParamStore) {
        self.trainable.insert(store.uid());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data.len() == value.rows * value.cols);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, value: Mat, op: Op, a: Var) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, value: Mat, op: Op, a: Var, b: Var) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input leaf; `requires_grad` makes it differentiable.
    pub fn input(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a parameter once per tape; repeated calls return the same node,
    /// so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let rg = self.trainable.contains(&store.uid());
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(v, Op::MatMul(a, b), a, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(v, Op::Transpose(a), a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(v, Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(v, Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(v, Op::Mul(a, b), a, b)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols), bm.shape(), "add_row expects 1x{}", am.cols);
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bm.data) {
                *o += b;
            }
        }
        self.binary(out, Op::AddRow(a, row), a, row)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols), bm.shape(), "mul_row expects 1x{}", am.cols);
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bm.data) {
                *o *= b;
            }
        }
        self.binary(out, Op::MulRow(a, row), a, row)
    }

    /// Adds an `rows × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(col));
        assert_eq!((am.rows, 1), bm.shape(), "add_col expects {}x1", am.rows);
        let mut out = am.clone();
        for r in 0..out.rows {
            let b = bm.data[r];
            out.row_mut(r).iter_mut().for_each(|o| *o += b);
        }
        self.binary(out, Op::AddCol(a, col), a, col)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(col));
        assert_eq!((am.rows, 1), bm.shape(), "mul_col expects {}x1", am.rows);
        let mut out = am.clone();
        for r in 0..out.rows {
            let b = bm.data[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= b);
        }
        self.binary(out, Op::MulCol(a, col), a, col)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(v, Op::Scale(a, s), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(v, Op::AddScalar(a), a)
    }

    /// Multiplies `a` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(a).scale(k);
        self.binary(v, Op::ScaleBy(a, s), a, s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(v, Op::Relu(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(v, Op::Tanh(a), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(v, Op::Sigmoid(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(v, Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(v, Op::Ln(a), a)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.unary(v, Op::SumAll(a), a)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `1 × cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(1, m.cols);
        for r in 0..m.rows {
            for (o, &x) in out.data.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        self.unary(out, Op::SumRows(a), a)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let out = Mat::from_vec(m.rows, 1, data);
        self.unary(out, Op::SumCols(a), a)
    }

    /// Column-wise maximum over rows, `1 × cols`. Ties route the gradient to
    /// the first maximal row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert!(m.rows > 0, "max_rows on empty matrix");
        let mut arg = vec![0usize; m.cols];
        let mut out = Mat::from_vec(1, m.cols, m.row(0).to_vec());
        for r in 1..m.rows {
            for (c, &x) in m.row(r).iter().enumerate() {
                if x > out.data[c] {
                    out.data[c] = x;
                    arg[c] = r;
                }
            }
        }
        self.unary(out, Op::MaxRows(a, arg), a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.unary(v, Op::SoftmaxRows(a), a)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.unary(out, Op::LogSoftmaxRows(a), a)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows);
        let n = m.cols as f64;
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        self.unary(out, Op::LayerNorm(a, inv_std), a)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = super::l2_norm(row).max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.unary(out, Op::L2NormalizeRows(a, norms), a)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(idx.len(), m.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        self.unary(out, Op::GatherRows(a, idx.to_vec()), a)
    }

    /// `out[idx[i]] += a[i]` into a fresh `n × cols` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, idx.len(), "scatter_add_rows index length");
        let mut out = Mat::zeros(n, m.cols);
        for (i, &r) in idx.iter().enumerate() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        self.unary(out, Op::ScatterAddRows(a, idx.to_vec()), a)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<Mat> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let out = Mat::stack_rows(&mats);
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|v| self.value(*v).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for v in parts {
            let m = self.value(*v);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let out = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        self.unary(out, Op::SliceRows(a, start), a)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.unary(out, Op::SliceCols(a, start), a)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len(), rows * cols, "reshape size mismatch");
        let out = Mat::from_vec(rows, cols, m.data.clone());
        self.unary(out, Op::Reshape(a), a)
    }

    /// `out[r] = a[r, idx[r]]`, as `rows × 1`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, idx.len(), "pick_cols index length");
        let data = idx.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        let out = Mat::from_vec(m.rows, 1, data);
        self.unary(out, Op::PickCols(a, idx.to_vec()), a)
    }

    /// Mean binary cross-entropy of `rows × 1` logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let m = self.value(logits);
        assert_eq!((m.rows, 1), (labels.len(), m.cols), "bce_with_logits expects rows x 1");
        let n = labels.len() as f64;
        let loss = m.data.iter().zip(labels).map(|(&x, &y)| softplus(x) - y * x).sum::<f64>() / n;
        self.unary(Mat::scalar(loss), Op::BceWithLogits(logits, labels.to_vec()), logits)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(cur) => cur.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(val(b)));
                }
                if self.rg(*b) {
                    acc(*b, val(a).t_matmul(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, g.mean_rows().scale(g.rows as f64));
                }
            }
            Op::MulRow(a, b) => {
                let bm = val(b);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        for (o, &s) in d.row_mut(r).iter_mut().zip(&bm.data) {
                            *o *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.rg(*b) {
                    let am = val(a);
                    let mut d = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((o, &gg), &x) in d.data.iter_mut().zip(g.row(r)).zip(am.row(r)) {
                            *o += gg * x;
                        }
                    }
                    acc(*b, d);
                }
            }
            Op::AddCol(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    let d = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
                    acc(*b, Mat::from_vec(g.rows, 1, d));
                }
            }
            Op::MulCol(a, b) => {
                let bm = val(b);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        let s = bm.data[r];
                        d.row_mut(r).iter_mut().for_each(|o| *o *= s);
                    }
                    acc(*a, d);
                }
                if self.rg(*b) {
                    let am = val(a);
                    let d = (0..g.rows).map(|r| super::dot(g.row(r), am.row(r))).collect();
                    acc(*b, Mat::from_vec(g.rows, 1, d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = val(s).item();
                if self.rg(*a) {
                    acc(*a, g.scale(k));
                }
                if self.rg(*s) {
                    acc(*s, Mat::scalar(super::dot(&g.data, &val(a).data)));
                }
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Exp(a) => acc(*a, g.zip_map(y, |d, e| d * e)),
            Op::Ln(a) => acc(*a, g.zip_map(val(a), |d, x| d / x)),
            Op::SumAll(a) => {
                let am = val(a);
                acc(*a, Mat::filled(am.rows, am.cols, g.item()));
            }
            Op::SumRows(a) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    d.row_mut(r).copy_from_slice(&g.data);
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    let s = g.data[r];
                    d.row_mut(r).iter_mut().for_each(|o| *o = s);
                }
                acc(*a, d);
            }
            Op::MaxRows(a, arg) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (c, &r) in arg.iter().enumerate() {
                    d.set(r, c, g.data[c]);
                }
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows {
                    let yr = y.row(r);
                    let s = super::dot(g.row(r), yr);
                    for (o, &p) in d.row_mut(r).iter_mut().zip(yr) {
                        *o = p * (*o - s);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, &ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * s;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols as f64;
                let mut d = g.clone();
                for r in 0..d.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = super::dot(gr, yr) / n;
                    let is = inv_std[r];
                    for ((o, &gg), &yy) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = is * (gg - mean_g - yy * mean_gy);
                    }
                }
                acc(*a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut d = g.clone();
                for r in 0..d.rows {
                    let yr = y.row(r);
                    let s = super::dot(g.row(r), yr);
                    let n = norms[r];
                    for (o, &yy) in d.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yy * s) / n;
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::ScatterAddRows(a, idx) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (i, &r) in idx.iter().enumerate() {
                    d.row_mut(i).copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pm = val(p);
                    let d = Mat::from_vec(pm.rows, pm.cols, g.data[off * g.cols..(off + pm.rows) * g.cols].to_vec());
                    off += pm.rows;
                    acc(*p, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pm = val(p);
                    let mut d = Mat::zeros(pm.rows, pm.cols);
                    for r in 0..pm.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + pm.cols]);
                    }
                    off += pm.cols;
                    acc(*p, d);
                }
            }
            Op::SliceRows(a, start) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                d.data[start * am.cols..(start + g.rows) * am.cols].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    d.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let am = val(a);
                acc(*a, Mat::from_vec(am.rows, am.cols, g.data.clone()));
            }
            Op::PickCols(a, idx) => {
                let am = val(a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (r, &c) in idx.iter().enumerate() {
                    d.set(r, c, g.data[r]);
                }
                acc(*a, d);
            }
            Op::BceWithLogits(a, labels) => {
                let am = val(a);
                let n = labels.len() as f64;
                let k = g.item() / n;
                let d = am.data.iter().zip(labels).map(|(&x, &l)| k * (sigmoid(x) - l)).collect();
                acc(*a, Mat::from_vec(am.rows, 1, d));
            }
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of `f` at `x`, compared against the tape.
    fn check(f: impl Fn(&mut Tape, Var) -> Var, x: Mat) {
        let mut t = Tape::new();
        let v = t.input(x.clone(), true);
        let out = f(&mut t, v);
        let g = t.backward(out).wrt(v).cloned().unwrap_or_else(|| Mat::zeros(x.rows, x.cols));
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xm = x.clone();
                xm.data[i] += delta;
                let mut t = Tape::new();
                let v = t.input(xm, false);
                let o = f(&mut t, v);
                t.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data[i];
            let tol = 1e-5 * (1.0 + fd.abs().max(an.abs()));
            assert!((fd - an).abs() < tol, "grad mismatch at {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn gradients_of_every_op_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 5, 1);
        let x = rand_mat(&mut rng, 5, 4);

        check(|t, v| { let w = t.constant(w.clone()); let y = t.matmul(v, w); let y = t.tanh(y); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.transpose(v); let y = t.mul(y, y); t.sum_all(y) }, x.clone());
        check(|t, v| { let r = t.input(row.clone(), false); let w = t.constant(w.clone()); let y = t.matmul(v, w); let y = t.add_row(y, r); let y = t.mul_row(y, r); let y = t.sigmoid(y); t.mean_all(y) }, x.clone());
        check(|t, v| { let c = t.constant(col.clone()); let y = t.add_col(v, c); let y = t.mul_col(y, c); let y = t.exp(y); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.softmax_rows(v); let c = t.constant(x.clone()); let y = t.mul(y, c); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.log_softmax_rows(v); let y = t.pick_cols(y, &[0, 1, 2, 3, 0]); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.layer_norm(v, 1e-5); let c = t.constant(x.clone()); let y = t.mul(y, c); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.l2_normalize_rows(v); let c = t.constant(x.clone()); let y = t.mul(y, c); t.sum_all(y) }, x.clone());
        check(|t, v| { let y = t.gather_rows(v, &[0, 2, 2, 4]); let y = t.scatter_add_rows(y, &[1, 1, 0, 2], 3); let y = t.mul(y, y); t.sum_all(y) }, x.clone());
        check(|t, v| { let a = t.slice_rows(v, 1, 3); let b = t.slice_cols(v, 1, 2); let b = t.slice_rows(b, 0, 3); let y = t.concat_cols(&[a, b]); let z = t.concat_rows(&[y, y]); let z = t.reshape(z, 4, 9); let z = t.relu(z); let z = t.mul(z, z); t.sum_all(z) }, x.clone());
        check(|t, v| { let m = t.max_rows(v); let s = t.sum_rows(v); let s = t.mul(s, m); let c = t.sum_cols(v); let c = t.mul(c, c); let a = t.sum_all(s); let b = t.sum_all(c); t.add(a, b) }, x.clone());
        check(|t, v| { let s = t.slice_rows(v, 0, 1); let s = t.slice_cols(s, 0, 1); let y = t.scale_by(v, s); let y = t.add_scalar(y, 3.0); let y = t.ln(y); t.sum_all(y) }, x.map(|z| z.abs() * 0.5 + 0.1));
        check(|t, v| { let c = t.slice_cols(v, 0, 1); t.bce_with_logits(c, &[1.0, 0.0, 1.0, 0.0, 1.0]) }, x.clone());
        check(|t, v| { let a = t.scale(v, 2.0); let b = t.sub(a, v); let b = t.mul(b, v); t.sum_all(b) }, x);
    }

    #[test]
    fn params_share_one_node_and_only_trainable_get_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_rows(&[[2.0]]));
        let frozen = {
            let mut s = ParamStore::new();
            s.add("f", Mat::from_rows(&[[3.0]]));
            s
        };
        let mut t = Tape::new();
        t.train(&store);
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let f = t.param(&frozen, ParamId(0));
        let y = t.mul(a, b);
        let y = t.mul(y, f);
        let g = t.backward(y);
        // d(3 w^2)/dw = 6 w = 12
        assert_eq!(g.param(&store, id).unwrap().item(), 12.0);
        assert!(g.param(&frozen, ParamId(0)).is_none());
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_rows(&[[0.3, NEG_INF_MASK, 1.0]]));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).get(0, 1), 0.0);
    }
}
