//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations on [`Var`] handles during the forward pass;
//! [`Tape::backward`] then accumulates gradients into one buffer per entry of
//! the [`ParamSet`] the tape reads its parameters from.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialised `rows × cols` matrix.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    /// Gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a `1 × n` row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    /// `scale * a + shift`
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    /// Per-row standardisation; stores the per-row inverse deviation.
    LayerNorm(Var, Vec<f64>),
    /// Cross-entropy of a column of logits against a target row.
    CrossEntropy(Var, usize),
    /// Mean binary cross-entropy of a column of logits.
    BinaryCrossEntropy(Var, Vec<f64>),
    Sum(Var),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut inv = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * r);
            inv.push(r);
        }
        self.push(value, Op::LayerNorm(a, inv))
    }

    /// `-log softmax(logits)[target]` for an `L × 1` column of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits).column(0).to_owned();
        let loss = log_sum_exp(z.iter().copied()) - z[target];
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy(logits, target))
    }

    /// Mean binary cross-entropy of an `n × 1` column of logits against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let z = self.value(logits);
        let n = targets.len() as f64;
        let loss = z
            .column(0)
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BinaryCrossEntropy(logits, targets),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Accumulate d`loss`/dθ into `grads` (one buffer per parameter).
    pub fn backward(&self, loss: Var, grads: &mut [Array2<f64>]) {
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads[id.0] += &g,
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MulRow(a, row) => {
                    let da = &g * self.value(*row);
                    let drow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *row, drow);
                }
                Op::Affine(a, scale) => acc(&mut adj, *a, g * *scale),
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    acc(&mut adj, *a, g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    acc(&mut adj, *a, g * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut adj, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut adj, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *a, da);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.nrows() as f64;
                    let da = Array2::from_shape_fn(x.raw_dim(), |(_, j)| g[[0, j]] / n);
                    acc(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut da = &g * y;
                    for (mut row, yr) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |d, &y| *d -= y * dot);
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LayerNorm(a, inv) => {
                    let y = self.value(Var(i));
                    let n = y.ncols() as f64;
                    let mut da = g.clone();
                    for ((mut row, yr), &r) in da.rows_mut().into_iter().zip(y.rows()).zip(inv) {
                        let mean_g = row.sum() / n;
                        let mean_gy = row.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        row.zip_mut_with(&yr, |d, &y| *d = r * (*d - mean_g - y * mean_gy));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::CrossEntropy(logits, target) => {
                    let z = self.value(*logits);
                    let lse = log_sum_exp(z.column(0).iter().copied());
                    let mut da = z.mapv(|z| (z - lse).exp());
                    da[[*target, 0]] -= 1.0;
                    acc(&mut adj, *logits, da * g[[0, 0]]);
                }
                Op::BinaryCrossEntropy(logits, targets) => {
                    let z = self.value(*logits);
                    let n = targets.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let da = Array2::from_shape_fn(z.raw_dim(), |(r, _)| {
                        (sigmoid(z[[r, 0]]) - targets[r]) * scale
                    });
                    acc(&mut adj, *logits, da);
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut adj, *a, da);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn matmul_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        let tape_grads = {
            let mut t = Tape::new(&ps);
            let x = t.constant(array![[1.0, -1.0]]);
            let wv = t.param(w);
            let y = t.matmul(x, wv);
            let l = t.sum(y);
            assert_abs_diff_eq!(t.scalar(l), -4.0);
            let mut g = ps.zero_grads();
            t.backward(l, &mut g);
            g
        };
        assert_eq!(tape_grads[0], array![[1.0, 1.0], [-1.0, -1.0]]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_len() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps);
        let z = t.constant(Array2::zeros((7, 1)));
        let l = t.cross_entropy(z, 3);
        assert_abs_diff_eq!(t.scalar(l), 7f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps);
        let z = t.constant(array![[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]);
        let y = t.softmax_rows(z);
        for row in t.value(y).rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", array![[2.0]]);
        let mut t = Tape::new(&ps);
        let a = t.param(w);
        let b = t.param(w);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let mut g = ps.zero_grads();
        t.backward(y, &mut g);
        assert_abs_diff_eq!(g[0][[0, 0]], 4.0);
    }
}
