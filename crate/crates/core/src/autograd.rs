//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every node holds a 2-D value. Scalars are `1 x 1` matrices. Parameters enter the
//! tape through [`Graph::param`], which memoizes one node per parameter slot so that
//! shared weights accumulate a single gradient.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Arc<Mat>),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Normalize(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherCells(Var, Vec<(usize, usize)>),
    Sum(Var),
    DotConst(Var, Arc<Mat>),
}

/// Additive-free attention mask: `allowed[[query, key]]`.
pub type AttnMask = Array2<bool>;

pub struct Graph {
    values: Vec<Mat>,
    ops: Vec<Op>,
    params: HashMap<usize, Var>,
}

/// Gradients of one backward pass, keyed by parameter slot.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub grads: HashMap<usize, Mat>,
}

impl ParamGrads {
    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.grads.get(&slot)
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (slot, g) in &other.grads {
            match self.grads.get_mut(slot) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.grads.insert(*slot, g * scale);
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Mat, mask: Option<&AttnMask>) -> Mat {
    let mut out = x.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(j) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        if total > 0.0 {
            row.mapv_inplace(|v| v / total);
        }
    }
    out
}

fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The node for parameter `slot`, created on first use.
    pub fn param(&mut self, slot: usize, value: &Mat) -> Var {
        if let Some(v) = self.params.get(&slot) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(slot, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` with the `1 x n` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    /// `a * b` elementwise with the `1 x n` row `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::MulRow(a, b))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let out = self.value(a) * c.as_ref();
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax; entries where `mask` is false get probability zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Var {
        let out = softmax_rows(self.value(a), mask);
        self.push(out, Op::MaskedSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        self.push(out, Op::Normalize(a, rstd))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((rows.len(), x.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&x.row(r));
        }
        self.push(out, Op::GatherRows(a, rows))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for p in &parts {
            let v = self.value(*p);
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Picks the listed `(row, col)` entries into a `1 x n` row.
    pub fn gather_cells(&mut self, a: Var, cells: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let out = Mat::from_shape_fn((1, cells.len()), |(_, j)| x[cells[j]]);
        self.push(out, Op::GatherCells(a, cells))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `sum(a * c)` for a constant `c`, as a scalar.
    pub fn dot_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let total = Zip::from(self.value(a))
            .and(c.as_ref())
            .fold(0.0, |acc, x, y| acc + x * y);
        self.push(Mat::from_elem((1, 1), total), Op::DotConst(a, c))
    }

    /// Reverse pass from the scalar `root`, returning parameter gradients.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let adj = self.adjoints(root);
        let mut out = ParamGrads::default();
        for (slot, var) in &self.params {
            if let Some(g) = &adj[var.0] {
                out.grads.insert(*slot, g.clone());
            }
        }
        out
    }

    /// Adjoints of the leaves and parameters reachable from `root`; interior entries are consumed.
    pub fn adjoints(&self, root: Var) -> Vec<Option<Mat>> {
        let mut adj: Vec<Option<Mat>> = vec![None; self.values.len()];
        adj[root.0] = Some(Mat::ones(self.values[root.0].dim()));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf | Op::Param) {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            let y = &self.values[i];
            match &self.ops[i] {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.values[b.0].t());
                    let db = self.values[a.0].t().dot(&dy);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Transpose(a) => acc(&mut adj, *a, dy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, dy.clone());
                    acc(&mut adj, *b, dy.clone());
                }
                Op::AddRow(a, b) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *a, dy.clone());
                    acc(&mut adj, *b, db);
                }
                Op::MulRow(a, b) => {
                    let av = &self.values[a.0];
                    let bv = &self.values[b.0];
                    let db = (&dy * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *a, &dy * bv);
                    acc(&mut adj, *b, db);
                }
                Op::MulConst(a, c) => acc(&mut adj, *a, &dy * c.as_ref()),
                Op::Scale(a, k) => acc(&mut adj, *a, &dy * *k),
                Op::Gelu(a) => {
                    let x = &self.values[a.0];
                    let mut g = dy.clone();
                    Zip::from(&mut g).and(x).for_each(|g, &x| *g *= gelu_grad(x));
                    acc(&mut adj, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = dy.clone();
                    Zip::from(&mut g).and(y).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut adj, *a, g);
                }
                Op::MaskedSoftmax(a) => {
                    let mut g = &dy * y;
                    for (mut grow, yrow) in g.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|g, &yv| *g -= yv * dot);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::LogSoftmax(a) => {
                    let mut g = dy.clone();
                    for (mut grow, yrow) in g.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let total: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|g, &yv| *g -= yv.exp() * total);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Normalize(a, rstd) => {
                    let d = y.ncols() as f64;
                    let mut g = dy.clone();
                    for ((mut grow, yrow), r) in g
                        .axis_iter_mut(Axis(0))
                        .zip(y.axis_iter(Axis(0)))
                        .zip(rstd)
                    {
                        let mean_dy = grow.sum() / d;
                        let mean_dyy = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|g, &yv| *g = r * (*g - mean_dy - yv * mean_dyy));
                    }
                    acc(&mut adj, *a, g);
                }
                Op::GatherRows(a, rows) => {
                    let mut g = Mat::zeros(self.values[a.0].dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = g.row_mut(r);
                        dst += &dy.row(i);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Mat::zeros(self.values[a.0].dim());
                    g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut adj, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.values[p.0].ncols();
                        acc(&mut adj, *p, dy.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::GatherCells(a, cells) => {
                    let mut g = Mat::zeros(self.values[a.0].dim());
                    for (j, &cell) in cells.iter().enumerate() {
                        g[cell] += dy[[0, j]];
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Sum(a) => {
                    let g = Mat::from_elem(self.values[a.0].dim(), dy[[0, 0]]);
                    acc(&mut adj, *a, g);
                }
                Op::DotConst(a, c) => acc(&mut adj, *a, c.as_ref() * dy[[0, 0]]),
            }
        }
        adj
    }
}
