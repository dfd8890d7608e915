//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly: each method computes its
//! output immediately and appends a node remembering its inputs. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every parameter and every [`Tape::variable`] leaf
//! that the scalar depends on.

use std::collections::HashMap;

use crate::matrix::gemm;
use crate::{Matrix, ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        src: Var,
        positions: Vec<usize>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Eager computation record supporting reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    vars: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter, if it was used and reached.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Matrix> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Matrix> {
        self.params
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls with the same id
    /// return the same node, so gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` element-wise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects an n x 1 column");
        let mut value = av.clone();
        for i in 0..value.rows() {
            let s = cv.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax of `a + mask`.
    ///
    /// `mask` is additive with entries in `{0, -inf}`. Masked cells receive
    /// weight exactly zero. A row whose cells are all masked yields an
    /// all-zero row instead of NaN.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Matrix>) -> Var {
        let value = softmax_rows(self.value(a), mask);
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None)
    }

    /// Normalizes every row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Copy of `base` with row `positions[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Var {
        let mut out = self.value(base).clone();
        let sv = self.value(src);
        assert_eq!(sv.rows(), positions.len(), "scatter_rows count mismatch");
        assert_eq!(sv.cols(), out.cols(), "scatter_rows width mismatch");
        for (i, &p) in positions.iter().enumerate() {
            out.row_mut(p).copy_from_slice(sv.row(i));
        }
        let ng = self.ng(base) || self.ng(src);
        self.push(
            out,
            Op::ScatterRows {
                base,
                src,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), ng)
    }

    /// `sum_i -log softmax(logits_i)[targets_i]` as a `1 x 1` node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv, None);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "target {t} out of range");
            total -= log_softmax_at(lv.row(i), t);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Gradients { vars: grads, params }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    let gb = self.value(b);
                    acc_gemm(grads, a, self.value(a).shape(), g, false, gb, true);
                }
                if self.ng(b) {
                    let av = self.value(a);
                    acc_gemm(grads, b, self.value(b).shape(), av, true, g, false);
                }
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.acc_ref(grads, a, g);
                self.acc_ref(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.acc_ref(grads, a, g);
                if self.ng(b) {
                    self.acc(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                self.acc_ref(grads, a, g);
                if self.ng(row) {
                    self.acc(grads, row, column_sums(g));
                }
            }
            &Op::MulRow(a, row) => {
                if self.ng(a) {
                    self.acc(grads, a, broadcast_row(g, self.value(row), |x, y| x * y));
                }
                if self.ng(row) {
                    let prod = g.zip_map(self.value(a), |x, y| x * y);
                    self.acc(grads, row, column_sums(&prod));
                }
            }
            &Op::MulCol(a, col) => {
                let cv = self.value(col);
                if self.ng(a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = cv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, a, ga);
                }
                if self.ng(col) {
                    let av = self.value(a);
                    let gc = Matrix::from_fn(av.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    });
                    self.acc(grads, col, gc);
                }
            }
            &Op::Affine(a, scale) => self.acc(grads, a, g.map(|x| x * scale)),
            &Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.acc(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                self.acc(grads, a, ga);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.acc(grads, a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let xhat = &node.value;
                let n = xhat.cols() as f64;
                let mut ga = Matrix::zeros(xhat.rows(), xhat.cols());
                for i in 0..xhat.rows() {
                    let (xr, gr) = (xhat.row(i), g.row(i));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (o, (gi, xi)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(xr)) {
                        *o = inv_std[i] * (gi - mean_g - xi * mean_gx);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let gp = Matrix::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                        self.acc(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.ng(p) {
                        let gp = Matrix::from_vec(
                            rows,
                            cols,
                            g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        self.acc(grads, p, gp);
                    }
                    offset += rows;
                }
            }
            &Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(a).shape();
                let mut ga = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.value(*a).shape();
                let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            }
            Op::ScatterRows {
                base,
                src,
                positions,
            } => {
                if self.ng(*base) {
                    let mut gb = g.clone();
                    for &p in positions {
                        gb.row_mut(p).iter_mut().for_each(|x| *x = 0.0);
                    }
                    self.acc(grads, *base, gb);
                }
                if self.ng(*src) {
                    self.acc(grads, *src, g.select_rows(positions));
                }
            }
            &Op::SumAll(a) => {
                let (rows, cols) = self.value(a).shape();
                self.acc(grads, a, Matrix::filled(rows, cols, g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item();
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let v = gl.get(i, t);
                    gl.set(i, t, v - 1.0);
                }
                gl.scale_in_place(scale);
                self.acc(grads, *logits, gl);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn acc_gemm(
    grads: &mut [Option<Matrix>],
    target: Var,
    shape: (usize, usize),
    a: &Matrix,
    ta: bool,
    b: &Matrix,
    tb: bool,
) {
    match &mut grads[target.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

fn broadcast_row(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.shape(), (1, a.cols()), "row broadcast shape mismatch");
    let r = row.row(0);
    let mut out = a.clone();
    for i in 0..out.rows() {
        for (x, &y) in out.row_mut(i).iter_mut().zip(r) {
            *x = f(*x, y);
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, x) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x + mask`; fully masked rows become zeros.
pub fn softmax_rows(x: &Matrix, mask: Option<&Matrix>) -> Matrix {
    if let Some(m) = mask {
        assert_eq!(m.shape(), x.shape(), "mask shape mismatch");
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if let Some(m) = mask {
            for (v, mv) in row.iter_mut().zip(m.row(i)) {
                *v += mv;
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `log softmax(row)[t]`, computed stably.
pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}
