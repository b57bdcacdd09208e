//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns gradients for every variable created with [`Tape::param`].
//! Constants never receive gradients, and operations whose inputs are all
//! constant are skipped on the way back.

use std::rc::Rc;

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed sparse linear map `y[i] += w * x[j]` applied to matrix rows.
///
/// Used for message passing, where the adjacency is data rather than a
/// parameter.
#[derive(Clone, Debug)]
pub struct Propagation {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Propagation {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, weight: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, weight));
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, x.ncols());
        for &(i, j, w) in &self.entries {
            for c in 0..x.ncols() {
                out[(i, c)] += w * x[(j, c)];
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &Mat) -> Mat {
        let mut out = Mat::zeros(self.cols, g.ncols());
        for &(i, j, w) in &self.entries {
            for c in 0..g.ncols() {
                out[(j, c)] += w * g[(i, c)];
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    NormalizeRows { input: Var, norms: Vec<f64> },
    SumAll(Var),
    MeanRows(Var),
    LogSumExpRows(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Cols { input: Var, start: usize },
    Propagate(Rc<Propagation>, Var),
    TraceRidge { input: Var, eps: f64 },
    LogDetSpd { input: Var, inverse: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or a zero matrix of the given shape when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).component_mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Hadamard(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant matrix.
    pub fn add_const(&mut self, a: Var, c: Mat) -> Var {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// `a + 1 b` for a row vector `b`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        for mut x in value.row_iter_mut() {
            x += r;
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Scales every column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "mul_row expects a row vector");
        let mut value = self.value(a).clone();
        for mut x in value.row_iter_mut() {
            x.component_mul_assign(r);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Multiplies `a` by a 1x1 variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let value = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.hadamard(a, a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.row_iter_mut() {
            let m = row.max();
            row.apply(|x| *x = (*x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine
    /// parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.row_iter_mut() {
            let mean = row.sum() / n;
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / n;
            let r = 1.0 / (var + eps).sqrt();
            row *= r;
            inv_std.push(r);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNormRows { input: a, inv_std }, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.row_iter_mut() {
            let n = row.norm();
            row /= n;
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows { input: a, norms }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_element(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a `1 x n` row vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).row_mean();
        let value = Mat::from_row_slice(1, m.len(), m.as_slice());
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Per-row log-sum-exp as an `m x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::from_iterator(
            x.nrows(),
            1,
            x.row_iter().map(|row| {
                let m = row.max();
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            }),
        );
        let rg = self.rg(a);
        self.push(value, Op::LogSumExpRows(a), rg)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "hcat row mismatch");
            value.columns_mut(at, v.ncols()).copy_from(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::HCat(parts.to_vec()), rg)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols, "vcat column mismatch");
            value.rows_mut(at, v.nrows()).copy_from(v);
            at += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::VCat(parts.to_vec()), rg)
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).columns(start, len).into_owned();
        let rg = self.rg(a);
        self.push(value, Op::Cols { input: a, start }, rg)
    }

    pub fn propagate(&mut self, prop: Rc<Propagation>, a: Var) -> Var {
        let value = prop.apply(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Propagate(prop, a), rg)
    }

    /// `A + eps * (tr A / d) * I`: a ridge that scales with the matrix.
    pub fn trace_ridge(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.nrows();
        let shift = eps * x.trace() / d as f64;
        let mut value = x.clone();
        for i in 0..d {
            value[(i, i)] += shift;
        }
        let rg = self.rg(a);
        self.push(value, Op::TraceRidge { input: a, eps }, rg)
    }

    /// `A + eps * I`.
    pub fn ridge(&mut self, a: Var, eps: f64) -> Var {
        let d = self.value(a).nrows();
        self.add_const(a, Mat::identity(d, d) * eps)
    }

    /// Log-determinant of a symmetric positive definite matrix via Cholesky.
    ///
    /// Returns `None` when the factorization fails.
    pub fn logdet_spd(&mut self, a: Var) -> Option<Var> {
        let chol = self.value(a).clone().cholesky()?;
        let l = chol.l_dirty();
        let scale = self.value(a).diagonal().max();
        if (0..l.nrows()).any(|i| l[(i, i)] * l[(i, i)] <= 1e-13 * scale) {
            return None;
        }
        let logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        let rg = self.rg(a);
        let inverse = if rg { chol.inverse() } else { Mat::zeros(0, 0) };
        Some(self.push(
            Mat::from_element(1, 1, logdet),
            Op::LogDetSpd { input: a, inverse },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        self.backward_seeded(out, Mat::from_element(1, 1, 1.0))
    }

    /// Reverse pass with an explicit upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, g: Mat) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, nodes, *a, &g * val(*b).transpose());
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, nodes, *b, val(*a).tr_mul(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut grads, nodes, *a, g.transpose()),
                Op::Add(a, b) => {
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, nodes, *b, g.clone());
                    }
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, nodes, *b, -&g);
                    }
                    acc(&mut grads, nodes, *a, g);
                }
                Op::Hadamard(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, nodes, *a, g.component_mul(val(*b)));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, nodes, *b, g.component_mul(val(*a)));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, nodes, *a, g * *c),
                Op::AddRow(a, r) => {
                    if nodes[r.0].requires_grad {
                        let rs = g.row_sum();
                        acc(&mut grads, nodes, *r, Mat::from_row_slice(1, rs.len(), rs.as_slice()));
                    }
                    acc(&mut grads, nodes, *a, g);
                }
                Op::MulRow(a, r) => {
                    if nodes[r.0].requires_grad {
                        let rs = g.component_mul(val(*a)).row_sum();
                        acc(&mut grads, nodes, *r, Mat::from_row_slice(1, rs.len(), rs.as_slice()));
                    }
                    if nodes[a.0].requires_grad {
                        let mut ga = g;
                        let rv = val(*r);
                        for mut x in ga.row_iter_mut() {
                            x.component_mul_assign(rv);
                        }
                        acc(&mut grads, nodes, *a, ga);
                    }
                }
                Op::MulScalar(a, s) => {
                    if nodes[s.0].requires_grad {
                        let d = g.dot(val(*a));
                        acc(&mut grads, nodes, *s, Mat::from_element(1, 1, d));
                    }
                    let sv = val(*s)[(0, 0)];
                    acc(&mut grads, nodes, *a, g * sv);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(val(*a), |gi, x| gi * gelu_grad(x));
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, nodes, *a, g.component_mul(&node.value)),
                Op::Ln(a) => acc(&mut grads, nodes, *a, g.component_div(val(*a))),
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| 0.5 * gi / y);
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.component_mul(y);
                    for (r, mut row) in ga.row_iter_mut().enumerate() {
                        let s = row.sum();
                        for c in 0..row.len() {
                            row[c] -= y[(r, c)] * s;
                        }
                    }
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::LayerNormRows { input, inv_std } => {
                    let xhat = &node.value;
                    let n = xhat.ncols() as f64;
                    let mut ga = g;
                    for (r, mut row) in ga.row_iter_mut().enumerate() {
                        let sum_g = row.sum();
                        let sum_gx = row.dot(&xhat.row(r));
                        let k = inv_std[r] / n;
                        for c in 0..row.len() {
                            row[c] = k * (n * row[c] - sum_g - xhat[(r, c)] * sum_gx);
                        }
                    }
                    acc(&mut grads, nodes, *input, ga);
                }
                Op::NormalizeRows { input, norms } => {
                    let u = &node.value;
                    let mut ga = g;
                    for (r, mut row) in ga.row_iter_mut().enumerate() {
                        let proj = row.dot(&u.row(r));
                        for c in 0..row.len() {
                            row[c] = (row[c] - u[(r, c)] * proj) / norms[r];
                        }
                    }
                    acc(&mut grads, nodes, *input, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, nodes, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(*a).shape();
                    let scale = 1.0 / r as f64;
                    let ga = Mat::from_fn(r, c, |_, j| g[(0, j)] * scale);
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let lse = &node.value;
                    let ga = Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
                        g[(i, 0)] * (x[(i, j)] - lse[(i, 0)]).exp()
                    });
                    acc(&mut grads, nodes, *a, ga);
                }
                Op::HCat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, nodes, *p, g.columns(at, w).into_owned());
                        }
                        at += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, nodes, *p, g.rows(at, h).into_owned());
                        }
                        at += h;
                    }
                }
                Op::Cols { input, start } => {
                    let (r, c) = val(*input).shape();
                    let mut ga = Mat::zeros(r, c);
                    ga.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut grads, nodes, *input, ga);
                }
                Op::Propagate(prop, a) => {
                    acc(&mut grads, nodes, *a, prop.apply_transpose(&g));
                }
                Op::TraceRidge { input, eps } => {
                    let d = g.nrows();
                    let shift = eps * g.trace() / d as f64;
                    let mut ga = g;
                    for k in 0..d {
                        ga[(k, k)] += shift;
                    }
                    acc(&mut grads, nodes, *input, ga);
                }
                Op::LogDetSpd { input, inverse } => {
                    acc(&mut grads, nodes, *input, inverse * g[(0, 0)]);
                }
            }
        }
        Gradients { grads }
    }
}
