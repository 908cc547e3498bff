//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] on a `1×1` node returns gradients for every parameter
//! that took part. Parameters live in a [`ParamStore`] outside the graph so a
//! graph is cheap to throw away after one example.

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Additive mask entry that removes a logit from a softmax.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }
}

/// Per-parameter gradients; `None` for parameters the graph never touched.
#[derive(Debug, Clone)]
pub struct Grads {
    pub grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    /// `a * s[0, j]`
    ScaleBy(Var, Var, usize),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Stores `1/σ` per row; the node value is the normalized matrix.
    LayerNormRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize),
    BroadcastRows(Var),
    Gather(Var, Vec<usize>),
    /// `-Σ a[r, c] / denom` over the listed entries.
    NegMeanPick(Var, Vec<(usize, usize)>, f64),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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
        self.value(v).dim()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a constant matrix (no gradient flows into it); used for masks.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn scale_by(&mut self, a: Var, scalars: Var, j: usize) -> Var {
        let k = self.value(scalars)[[0, j]];
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, scalars, j))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(v, Op::LayerNormRows(a, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::Rows(a, start))
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Cols(a, start))
    }

    /// Repeats a `1×n` row `count` times.
    pub fn broadcast_rows(&mut self, a: Var, count: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "broadcast_rows expects a single row");
        let v = row
            .broadcast((count, row.ncols()))
            .expect("broadcast")
            .to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn neg_mean_pick(&mut self, a: Var, picks: Vec<(usize, usize)>, denom: f64) -> Var {
        let x = self.value(a);
        let total: f64 = picks.iter().map(|&(r, c)| x[[r, c]]).sum();
        let v = Mat::from_elem((1, 1), -total / denom);
        self.push(v, Op::NegMeanPick(a, picks, denom))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Back-propagates from a `1×1` node.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::ones((1, 1)));
        let mut grads = Grads::zeros_like(store);

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut grads.grads[id.0] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, ga);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddConst(a) => acc(&mut adj, *a, g),
                Op::Scale(a, k) => acc(&mut adj, *a, g * *k),
                Op::ScaleBy(a, scalars, j) => {
                    let k = self.value(*scalars)[[0, *j]];
                    let mut gs = Mat::zeros(self.shape(*scalars));
                    gs[[0, *j]] = (&g * self.value(*a)).sum();
                    acc(&mut adj, *scalars, gs);
                    acc(&mut adj, *a, g * k);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Zip::from(&g).and(y).map_collect(|g, y| g * y * (1.0 - y));
                    acc(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Zip::from(&g)
                        .and(x)
                        .map_collect(|g, x| if *x > 0.0 { *g } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gy - &(y * &dots);
                    acc(&mut adj, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(p * &sums);
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let xhat = &node.value;
                    let n = xhat.ncols() as f64;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        Zip::from(&mut row)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, g, x| *o = inv_std[r] * (g - mean_g - x * mean_gx));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut adj, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut adj, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Rows(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::Cols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    acc(&mut adj, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::NegMeanPick(a, picks, denom) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let k = g[[0, 0]] / denom;
                    for &(r, c) in picks {
                        ga[[r, c]] -= k;
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    acc(&mut adj, *a, Mat::from_elem(self.shape(*a), k));
                }
            }
        }
        grads
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    v
}
