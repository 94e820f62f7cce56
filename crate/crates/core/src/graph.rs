//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every operation evaluates eagerly and records how to propagate gradients
//! back to its inputs. Leaves are either constants (frozen weights, inputs)
//! or parameters; gradients only flow through nodes that depend on at least
//! one parameter, so a forward pass over a frozen backbone costs nothing on
//! the way back unless trainable tokens were injected into it.
//!
//! Shape violations inside the tape are programmer errors and panic. The
//! public pipeline functions validate user-facing shapes before building
//! graphs.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::error::{AfrError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-compressed sparse matrix applied from the left (`y = S x`).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: Vec<Vec<(usize, f64)>>,
    n_cols: usize,
}

impl SparseMatrix {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, n_cols: usize) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(c, _)| c < n_cols));
        SparseMatrix { rows, n_cols }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_cols, "sparse apply: row count");
        let mut out = Array2::zeros((self.rows.len(), x.ncols()));
        for (r, entries) in self.rows.iter().enumerate() {
            let mut out_row = out.row_mut(r);
            for &(c, w) in entries {
                out_row.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    pub fn apply_transposed(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(g.nrows(), self.rows.len(), "sparse transpose apply: row count");
        let mut out = Array2::zeros((self.n_cols, g.ncols()));
        for (r, entries) in self.rows.iter().enumerate() {
            for &(c, w) in entries {
                out.row_mut(c).scaled_add(w, &g.row(r));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// tanh approximation of GELU.
    Gelu,
    /// `x * sigmoid(1.702 x)`, the activation used by CLIP's towers.
    QuickGelu,
}

impl Activation {
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Activation::QuickGelu => x * sigmoid(1.702 * x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::QuickGelu => {
                let s = sigmoid(1.702 * x);
                s + x * 1.702 * s * (1.0 - s)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` inside the losses.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    Sparse(Arc<SparseMatrix>, Var),
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norm_b: f64,
    },
    SoftmaxPair(Var, Var),
    Mean(Var),
    Bce(Var, Array2<f64>),
    Focal(Var, Array2<f64>, f64),
    Dice(Var, Array2<f64>, f64),
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Evaluation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf sharing storage with the caller, e.g. frozen weights.
    pub fn constant_shared(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulTransB(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shapes differ");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width");
        let value = self.value(a) + self.value(row);
        let rg = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shapes differ");
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).mapv(|x| act.forward(x));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Act(a, act), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// `x W + b` with `W` stored `[in × out]` and `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xw = self.matmul(x, weight);
        self.add_row(xw, bias)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        assert_eq!(self.shape(gamma), (1, d), "layer_norm: gamma");
        assert_eq!(self.shape(beta), (1, d), "layer_norm: beta");
        let mut normalized = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                normalized[[r, c]] = (v - mean) * is;
            }
        }
        let value = &normalized * self.value(gamma) + self.value(beta);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.nrows(), 1, "broadcast_rows: expects a single row");
        let value = rv.broadcast((rows, rv.ncols())).unwrap().to_owned();
        let rg = self.any_grad(&[row]);
        self.push(value, Op::BroadcastRows(row), rg)
    }

    pub fn sparse(&mut self, m: Arc<SparseMatrix>, a: Var) -> Var {
        let value = m.apply(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sparse(m, a), rg)
    }

    /// Cosine similarity of every row of `a` with the single row `b`,
    /// returned as an `n×1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.nrows() != 1 || av.ncols() != bv.ncols() {
            return Err(AfrError::shape(
                "cosine_rows",
                format!("[n×{}] against [1×{}]", av.ncols(), av.ncols()),
                format!("[{}×{}] against [{}×{}]", av.nrows(), av.ncols(), bv.nrows(), bv.ncols()),
            ));
        }
        let norm_b = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm_b > 0.0) {
            return Err(AfrError::Degenerate("cosine similarity against a zero-norm vector".into()));
        }
        let b_row = bv.row(0);
        let mut norms_a = Vec::with_capacity(av.nrows());
        let mut value = Array2::zeros((av.nrows(), 1));
        for (r, row) in av.rows().into_iter().enumerate() {
            let na = row.dot(&row).sqrt();
            if !(na > 0.0) {
                return Err(AfrError::Degenerate(format!(
                    "cosine similarity of zero-norm row {r}"
                )));
            }
            norms_a.push(na);
            value[[r, 0]] = row.dot(&b_row) / (na * norm_b);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            },
            rg,
        ))
    }

    /// Elementwise two-way softmax `exp(a) / (exp(a) + exp(b))`.
    pub fn softmax_pair(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "softmax_pair: shapes differ");
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = crate::numeric::softmax_pair(*x, y));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::SoftmaxPair(a, b), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy between probabilities `p` and `target`.
    pub fn bce(&mut self, p: Var, target: Array2<f64>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim(), "bce: target shape");
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(target.iter())
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[p]);
        self.push(Array2::from_elem((1, 1), loss), Op::Bce(p, target), rg)
    }

    /// Mean focal loss with focusing parameter `gamma`.
    pub fn focal(&mut self, p: Var, target: Array2<f64>, gamma: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim(), "focal: target shape");
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(target.iter())
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * (1.0 - p).powf(gamma) * p.ln() + (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[p]);
        self.push(Array2::from_elem((1, 1), loss), Op::Focal(p, target, gamma), rg)
    }

    /// Soft Dice loss `1 - (2 Σ p g + s) / (Σ p + Σ g + s)`.
    pub fn dice(&mut self, p: Var, target: Array2<f64>, smooth: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim(), "dice: target shape");
        let inter = (pv * &target).sum();
        let denom = pv.sum() + target.sum() + smooth;
        let loss = 1.0 - (2.0 * inter + smooth) / denom;
        let rg = self.any_grad(&[p]);
        self.push(Array2::from_elem((1, 1), loss), Op::Dice(p, target, smooth), rg)
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if rg(a) {
                    acc(a, g.dot(&self.value(b).t()));
                }
                if rg(b) {
                    acc(b, self.value(a).t().dot(g));
                }
            }
            &Op::MatMulTransB(a, b) => {
                if rg(a) {
                    acc(a, g.dot(self.value(b)));
                }
                if rg(b) {
                    acc(b, g.t().dot(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::AddRow(a, row) => {
                acc(a, g.clone());
                if rg(row) {
                    acc(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(a, g * self.value(b));
                }
                if rg(b) {
                    acc(b, g * self.value(a));
                }
            }
            &Op::Scale(a, c) => acc(a, g * c),
            &Op::Act(a, act) => {
                let mut d = self.value(a).clone();
                d.zip_mut_with(&*node.value, |x, &y| *x = act.derivative(*x, y));
                acc(a, d * g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                if rg(*gamma) {
                    acc(*gamma, (g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let gxhat = g * self.value(*gamma);
                    let d = g.ncols() as f64;
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let gh = gxhat.row(r);
                        let xh = normalized.row(r);
                        let mean_g = gh.sum() / d;
                        let mean_gx = gh.dot(&xh) / d;
                        for c in 0..g.ncols() {
                            gx[[r, c]] = inv_std[r] * (gh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    acc(*x, gx);
                }
            }
            &Op::SoftmaxRows(a) => {
                let y: &Array2<f64> = &node.value;
                let mut gx = y * g;
                for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yr, |v, &yv| *v -= yv * dot);
                }
                acc(a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if rg(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            &Op::SliceCols(a, start) => {
                let mut full = Array2::zeros(self.shape(a));
                full.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                acc(a, full);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if rg(p) {
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            &Op::SliceRows(a, start) => {
                let mut full = Array2::zeros(self.shape(a));
                full.slice_mut(s![start..start + g.nrows(), ..]).assign(g);
                acc(a, full);
            }
            &Op::BroadcastRows(row) => acc(row, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Sparse(m, a) => acc(*a, m.apply_transposed(g)),
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cos: &Array2<f64> = &node.value;
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for r in 0..av.nrows() {
                    let gr = g[[r, 0]];
                    if gr == 0.0 {
                        continue;
                    }
                    let c = cos[[r, 0]];
                    let na = norms_a[r];
                    for k in 0..av.ncols() {
                        let (x, y) = (av[[r, k]], bv[[0, k]]);
                        ga[[r, k]] = gr * (y / (na * norm_b) - c * x / (na * na));
                        gb[[0, k]] += gr * (x / (na * norm_b) - c * y / (norm_b * norm_b));
                    }
                }
                if rg(*a) {
                    acc(*a, ga);
                }
                if rg(*b) {
                    acc(*b, gb);
                }
            }
            &Op::SoftmaxPair(a, b) => {
                let d = node.value.mapv(|p| p * (1.0 - p)) * g;
                if rg(b) {
                    acc(b, -&d);
                }
                acc(a, d);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(a, Array2::from_elem(self.shape(a), g[[0, 0]] / n));
            }
            Op::Bce(p, target) => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                let mut d = pv.clone();
                d.zip_mut_with(target, |p, &y| {
                    *p = if in_clamp_range(*p) {
                        (-(y / *p) + (1.0 - y) / (1.0 - *p)) / n
                    } else {
                        0.0
                    };
                });
                acc(*p, d * g[[0, 0]]);
            }
            Op::Focal(p, target, gamma) => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                let gamma = *gamma;
                let mut d = pv.clone();
                d.zip_mut_with(target, |p, &y| {
                    if !in_clamp_range(*p) {
                        *p = 0.0;
                        return;
                    }
                    let q = 1.0 - *p;
                    // d/dp of -(y q^γ ln p + (1-y) p^γ ln q)
                    let pos = -gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / *p;
                    let neg = gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q;
                    *p = -(y * pos + (1.0 - y) * neg) / n;
                });
                acc(*p, d * g[[0, 0]]);
            }
            Op::Dice(p, target, smooth) => {
                let pv = self.value(*p);
                let inter = (pv * target).sum();
                let denom = pv.sum() + target.sum() + smooth;
                let num = 2.0 * inter + smooth;
                // d/dp_j [1 - num/denom] = -(2 g_j denom - num) / denom²
                let d = target.mapv(|y| -(2.0 * y * denom - num) / (denom * denom));
                acc(*p, d * g[[0, 0]]);
            }
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

fn in_clamp_range(p: f64) -> bool {
    (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&p)
}
