//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are read
//! from a borrowed [`ParamStore`] and materialized once per tape; calling
//! [`Tape::backward`] returns gradients aligned with that store.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + b` with `b` a `1 x n` row broadcast over rows.
    AddRow(Var, Var),
    /// `a * c` with `c` an `n x 1` column broadcast over columns.
    MulCol(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    XLogX(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Recorded computation graph of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient flows to the caller's data).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
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

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x * x.ln() } else { 0.0 });
        self.push(v, Op::XLogX(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &normed * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        debug_assert_eq!(src.len(), rows * cols);
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("reshape size");
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over rows, giving a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    /// Stable `ln(sum(exp(x)))` over every entry.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.fold(f64::NEG_INFINITY, |p, &q| p.max(q));
        let s = x.iter().map(|v| (v - m).exp()).sum::<f64>();
        let v = Array2::from_elem((1, 1), m + s.ln());
        self.push(v, Op::LogSumExp(a))
    }

    /// Linear combination of scalar nodes: `sum(w_i * x_i)`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Array2::zeros((1, 1))))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward_all(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    let ga = &g * self.value(*col);
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g * *scale),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::Square(a) => acc(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::XLogX(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        *gv = if x > 0.0 { *gv * (x.ln() + 1.0) } else { 0.0 };
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = gy - &(y * &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dn = &g * self.value(*gamma);
                    let n = normed.ncols() as f64;
                    let mut gx = Array2::zeros(normed.dim());
                    for r in 0..normed.nrows() {
                        let dnr = dn.row(r);
                        let nr = normed.row(r);
                        let sum_d = dnr.sum();
                        let sum_dn = dnr.dot(&nr);
                        let inv = inv_std[r];
                        for c in 0..normed.ncols() {
                            gx[[r, c]] = inv / n * (n * dnr[c] - sum_d - nr[c] * sum_dn);
                        }
                    }
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let data: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shape, data).expect("reshape grad");
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (k, &r) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![off..off + r, ..]).to_owned());
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., off..off + c]).to_owned());
                        off += c;
                    }
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let row = g.row(0).mapv(|v| v / r as f64);
                    let ga = Array2::from_shape_fn((r, c), |(_, j)| row[j]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let ga = Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExp(a) => {
                    let out = node.value[[0, 0]];
                    let ga = self.value(*a).mapv(|x| (x - out).exp() * g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        grads
    }

    /// Parameter gradients of a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut node_grads = self.backward_all(loss);
        let mut out = vec![None; self.params.len()];
        for (id, v) in &self.param_nodes {
            out[id.index()] = node_grads[v.0].take();
        }
        Gradients::from_vec(out)
    }
}
