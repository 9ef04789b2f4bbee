//! Dynamic reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Shape errors inside graph construction are programming errors and panic;
//! only the Cholesky-backed primitives return `Result`, because a
//! non-positive-definite kernel matrix is a data-dependent failure.

use std::f64::consts::PI;
use std::rc::Rc;

use super::cholesky::{cholesky, solve_spd, CholeskyFactor};
use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a + s` with `s` a 1x1 node.
    AddScalar(Var, Var),
    /// `a * s` with `s` a 1x1 node.
    MulScalar(Var, Var),
    /// `a (n x k) + b (1 x k)`.
    AddRow(Var, Var),
    /// `a (n x k) * c (n x 1)`, row-wise.
    MulCol(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Powf(Var, f64),
    Sum(Var),
    /// Column ranges of several nodes laid side by side.
    Concat(Vec<(Var, usize, usize)>),
    SqDist(Var, Var),
    SoftmaxRows(Var),
    /// `a + s I` with `s` a 1x1 node.
    AddDiag(Var, Var),
    /// Unit-variance Matérn-5/2 of squared distances, lengthscale node.
    Matern52(Var, Var),
    /// Unit-variance periodic kernel between rows: (a, b, lengthscale, period).
    Periodic(Var, Var, Var, Var),
    /// `yᵀ K⁻¹ y`.
    CholQuad {
        k: Var,
        y: Var,
        alpha: Rc<Matrix>,
    },
    /// `log |K|`.
    CholLogDet { k: Var, factor: Rc<CholeskyFactor> },
    /// Fused LSTM step: (x, [h|c], weights, bias) -> [h'|c'], caching gate activations.
    LstmCell {
        x: Var,
        state: Var,
        weights: Var,
        bias: Var,
        gates: Matrix,
        tanh_c: Matrix,
    },
    /// `Σ_t weights[:, t] * states[t]`, row-wise.
    AttentionPool { weights: Var, states: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Adjoints from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `∂output/∂var`; zeros when the output does not depend on `var`.
    pub fn wrt(&self, var: Var) -> Matrix {
        match &self.adjoints[var.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints[var.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through a single `exp`, with absolute error near 1e-16.
#[inline]
fn fast_tanh(v: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * v).exp() + 1.0)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn assert_scalar(&self, v: Var) {
        assert_eq!(self.shape(v), (1, 1), "expected a 1x1 node");
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), value, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        self.assert_scalar(s);
        let sv = self.scalar_value(s);
        let value = self.value(a).map(|x| x + sv);
        let rg = self.rg(&[a, s]);
        self.push(Op::AddScalar(a, s), value, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        self.assert_scalar(s);
        let sv = self.scalar_value(s);
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(Op::MulScalar(a, s), value, rg)
    }

    /// Adds the `1 x k` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        assert_eq!(self.shape(b), (1, k), "add_row shapes");
        let mut value = self.value(a).clone();
        let bv = self.value(b).as_slice().to_vec();
        for i in 0..n {
            for (x, y) in value.row_mut(i).iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Op::AddRow(a, b), value, rg)
    }

    /// Scales row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(c), (n, 1), "mul_col shapes");
        let mut value = self.value(a).clone();
        for i in 0..n {
            let s = self.value(c).get(i, 0);
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(&[a, c]);
        self.push(Op::MulCol(a, c), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shapes");
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    /// Horizontal concatenation of column ranges `[start, end)` of each piece.
    pub fn concat_cols(&mut self, pieces: &[(Var, usize, usize)]) -> Var {
        assert!(!pieces.is_empty(), "concat of nothing");
        let n = self.shape(pieces[0].0).0;
        let width: usize = pieces.iter().map(|&(_, s, e)| e - s).sum();
        let mut value = Matrix::zeros(n, width);
        let mut offset = 0;
        for &(v, s, e) in pieces {
            let src = self.value(v);
            assert!(src.rows() == n && e <= src.cols() && s <= e, "concat shapes");
            for i in 0..n {
                value.row_mut(i)[offset..offset + e - s].copy_from_slice(&src.row(i)[s..e]);
            }
            offset += e - s;
        }
        let vars: Vec<Var> = pieces.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        self.push(Op::Concat(pieces.to_vec()), value, rg)
    }

    pub fn concat(&mut self, vars: &[Var]) -> Var {
        let pieces: Vec<_> = vars.iter().map(|&v| (v, 0, self.shape(v).1)).collect();
        self.concat_cols(&pieces)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.concat_cols(&[(a, start, end)])
    }

    /// Pairwise squared Euclidean distances between rows, clamped at zero.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let value = sq_dist(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Op::SqDist(a, b), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    pub fn add_diag(&mut self, a: Var, s: Var) -> Var {
        self.assert_scalar(s);
        let (n, m) = self.shape(a);
        assert_eq!(n, m, "add_diag needs a square matrix");
        let sv = self.scalar_value(s);
        let mut value = self.value(a).clone();
        for i in 0..n {
            value.set(i, i, value.get(i, i) + sv);
        }
        let rg = self.rg(&[a, s]);
        self.push(Op::AddDiag(a, s), value, rg)
    }

    pub fn matern52(&mut self, d2: Var, lengthscale: Var) -> Var {
        self.assert_scalar(lengthscale);
        let ls = self.scalar_value(lengthscale);
        let value = self.value(d2).map(|d| matern52_unit(d.sqrt(), ls));
        let rg = self.rg(&[d2, lengthscale]);
        self.push(Op::Matern52(d2, lengthscale), value, rg)
    }

    /// `exp(−2 Σ_d sin²(π (a_id − b_jd) / p) / ℓ²)` for every pair of rows.
    pub fn periodic(&mut self, a: Var, b: Var, lengthscale: Var, period: Var) -> Var {
        self.assert_scalar(lengthscale);
        self.assert_scalar(period);
        let ls = self.scalar_value(lengthscale);
        let p = self.scalar_value(period);
        let value = periodic_matrix(self.value(a), self.value(b), ls, p);
        let rg = self.rg(&[a, b, lengthscale, period]);
        self.push(Op::Periodic(a, b, lengthscale, period), value, rg)
    }

    /// Factors `k` once and returns `(yᵀ k⁻¹ y, log |k|)` nodes.
    pub fn chol_terms(&mut self, k: Var, y: Var) -> Result<(Var, Var)> {
        let factor = cholesky(self.value(k))?;
        let n = factor.n();
        if self.shape(y) != (n, 1) {
            return Err(Error::DimensionMismatch(format!(
                "quadratic form of {n}x{n} with {:?}",
                self.shape(y)
            )));
        }
        let alpha = solve_spd(&factor, self.value(y))?;
        let quad: f64 = alpha
            .as_slice()
            .iter()
            .zip(self.value(y).as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let log_det = factor.log_det();
        let factor = Rc::new(factor);
        let rg_q = self.rg(&[k, y]);
        let rg_d = self.rg(&[k]);
        let q = self.push(
            Op::CholQuad {
                k,
                y,
                alpha: Rc::new(alpha),
            },
            Matrix::scalar(quad),
            rg_q,
        );
        let d = self.push(Op::CholLogDet { k, factor }, Matrix::scalar(log_det), rg_d);
        Ok((q, d))
    }

    /// One LSTM step with gate order (input, forget, cell, output).
    ///
    /// `state` is `[h | c]` (n x 2h), `weights` is `(w + h) x 4h` acting on `[x | h]`,
    /// `bias` is `1 x 4h`. Returns the new `[h | c]`.
    pub fn lstm_cell(&mut self, x: Var, state: Var, weights: Var, bias: Var) -> Var {
        let (n, w) = self.shape(x);
        let (sn, two_h) = self.shape(state);
        let h = two_h / 2;
        assert_eq!(sn, n, "lstm state rows");
        assert_eq!(self.shape(weights), (w + h, 4 * h), "lstm weight shape");
        assert_eq!(self.shape(bias), (1, 4 * h), "lstm bias shape");

        let xh = lstm_input(self.value(x), self.value(state), h);
        let mut gates = Matrix::zeros(n, 4 * h);
        gemm(false, &xh, false, self.value(weights), &mut gates, 0.0);
        let b = self.value(bias).as_slice();
        let sv = self.value(state);
        let mut out = Matrix::zeros(n, 2 * h);
        let mut tanh_c = Matrix::zeros(n, h);
        for r in 0..n {
            let g = gates.row_mut(r);
            for (gv, bv) in g.iter_mut().zip(b) {
                *gv += bv;
            }
            for j in 0..h {
                g[j] = sigmoid(g[j]);
                g[h + j] = sigmoid(g[h + j]);
                g[2 * h + j] = fast_tanh(g[2 * h + j]);
                g[3 * h + j] = sigmoid(g[3 * h + j]);
            }
            let c_prev = &sv.row(r)[h..];
            let o = out.row_mut(r);
            let tc = tanh_c.row_mut(r);
            for j in 0..h {
                let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
                tc[j] = fast_tanh(c);
                o[j] = g[3 * h + j] * tc[j];
                o[h + j] = c;
            }
        }
        let rg = self.rg(&[x, state, weights, bias]);
        self.push(
            Op::LstmCell {
                x,
                state,
                weights,
                bias,
                gates,
                tanh_c,
            },
            out,
            rg,
        )
    }

    /// Row-wise convex combination `Σ_t weights[i, t] * states[t][i, :]`.
    pub fn attention_pool(&mut self, weights: Var, states: &[Var]) -> Var {
        let (n, t) = self.shape(weights);
        assert_eq!(t, states.len(), "one state per attention column");
        let k = self.shape(states[0]).1;
        let mut value = Matrix::zeros(n, k);
        let wv = self.value(weights);
        for (ti, s) in states.iter().enumerate() {
            let sv = self.value(*s);
            assert_eq!(sv.shape(), (n, k), "attention state shape");
            for i in 0..n {
                let a = wv.get(i, ti);
                for (o, x) in value.row_mut(i).iter_mut().zip(sv.row(i)) {
                    *o += a * x;
                }
            }
        }
        let mut all = states.to_vec();
        all.push(weights);
        let rg = self.rg(&all);
        self.push(
            Op::AttentionPool {
                weights,
                states: states.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Reverse sweep from a 1x1 `output` node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Matrix)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| {
                let (r, c) = self.nodes[v.0].value.shape();
                Matrix::zeros(r, c)
            });
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.add_scaled(g, 1.0));
                acc(*b, &|s| s.add_scaled(g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.add_scaled(g, 1.0));
                acc(*b, &|s| s.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s| s.add_scaled(&g.zip_map(bv, |x, y| x * y), 1.0));
                acc(*b, &|s| s.add_scaled(&g.zip_map(av, |x, y| x * y), 1.0));
            }
            Op::Scale(a, c) => acc(*a, &|s| s.add_scaled(g, *c)),
            Op::AddScalar(a, sc) => {
                acc(*a, &|s| s.add_scaled(g, 1.0));
                let total = g.sum();
                acc(*sc, &|s| s.as_mut_slice()[0] += total);
            }
            Op::MulScalar(a, sc) => {
                let sv = val(*sc).as_slice()[0];
                acc(*a, &|s| s.add_scaled(g, sv));
                let av = val(*a);
                let total: f64 = g.as_slice().iter().zip(av.as_slice()).map(|(x, y)| x * y).sum();
                acc(*sc, &|s| s.as_mut_slice()[0] += total);
            }
            Op::AddRow(a, b) => {
                acc(*a, &|s| s.add_scaled(g, 1.0));
                acc(*b, &|s| {
                    let out = s.as_mut_slice();
                    for i in 0..g.rows() {
                        for (o, x) in out.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                acc(*a, &|s| {
                    for i in 0..g.rows() {
                        let f = cv.get(i, 0);
                        for (o, x) in s.row_mut(i).iter_mut().zip(g.row(i)) {
                            *o += f * x;
                        }
                    }
                });
                acc(*c, &|s| {
                    for i in 0..g.rows() {
                        let d: f64 = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                        s.as_mut_slice()[i] += d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s| gemm(false, g, true, bv, s, 1.0));
                acc(*b, &|s| gemm(true, av, false, g, s, 1.0));
            }
            Op::Sigmoid(a) => acc(*a, &|s| s.add_scaled(&g.zip_map(y, |d, v| d * v * (1.0 - v)), 1.0)),
            Op::Tanh(a) => acc(*a, &|s| s.add_scaled(&g.zip_map(y, |d, v| d * (1.0 - v * v)), 1.0)),
            Op::Exp(a) => acc(*a, &|s| s.add_scaled(&g.zip_map(y, |d, v| d * v), 1.0)),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &|s| s.add_scaled(&g.zip_map(av, |d, x| d / x), 1.0));
            }
            Op::Sin(a) => {
                let av = val(*a);
                acc(*a, &|s| s.add_scaled(&g.zip_map(av, |d, x| d * x.cos()), 1.0));
            }
            Op::Powf(a, p) => {
                let av = val(*a);
                let p = *p;
                acc(*a, &|s| {
                    s.add_scaled(&g.zip_map(av, |d, x| d * p * x.powf(p - 1.0)), 1.0)
                });
            }
            Op::Sum(a) => {
                let d = g.as_slice()[0];
                acc(*a, &|s| s.as_mut_slice().iter_mut().for_each(|x| *x += d));
            }
            Op::Concat(pieces) => {
                let mut offset = 0;
                for &(v, st, en) in pieces {
                    let w = en - st;
                    acc(v, &|s| {
                        for i in 0..g.rows() {
                            let src = &g.row(i)[offset..offset + w];
                            for (o, x) in s.row_mut(i)[st..en].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                // zero the gradient where the distance was clamped
                let gm = g.zip_map(y, |d, v| if v > 0.0 { d } else { 0.0 });
                // ∂/∂a_i = 2 a_i Σ_j g_ij − 2 Σ_j g_ij b_j, symmetric for b
                acc(*a, &|s| {
                    let gb = gm.matmul(bv).expect("sqdist grad");
                    for i in 0..gm.rows() {
                        let rs: f64 = gm.row(i).iter().sum();
                        let ar = av.row(i);
                        let gbr = gb.row(i);
                        for (k, o) in s.row_mut(i).iter_mut().enumerate() {
                            *o += 2.0 * ar[k] * rs - 2.0 * gbr[k];
                        }
                    }
                });
                acc(*b, &|s| {
                    let gta = gm.transpose().matmul(av).expect("sqdist grad");
                    for j in 0..gm.cols() {
                        let cs: f64 = (0..gm.rows()).map(|i| gm.get(i, j)).sum();
                        let br = bv.row(j);
                        let gr = gta.row(j);
                        for (k, o) in s.row_mut(j).iter_mut().enumerate() {
                            *o += 2.0 * br[k] * cs - 2.0 * gr[k];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => acc(*a, &|s| {
                for i in 0..g.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, o) in s.row_mut(i).iter_mut().enumerate() {
                        *o += yr[k] * (gr[k] - dot);
                    }
                }
            }),
            Op::AddDiag(a, sc) => {
                acc(*a, &|s| s.add_scaled(g, 1.0));
                let tr: f64 = (0..g.rows()).map(|i| g.get(i, i)).sum();
                acc(*sc, &|s| s.as_mut_slice()[0] += tr);
            }
            Op::Matern52(d2, ls) => {
                let l = val(*ls).as_slice()[0];
                let dv = val(*d2);
                let s5 = 5f64.sqrt();
                acc(*d2, &|s| {
                    for ((o, &d), &gd) in s.as_mut_slice().iter_mut().zip(dv.as_slice()).zip(g.as_slice()) {
                        let u = s5 * d.sqrt() / l;
                        *o += gd * (-5.0 / (6.0 * l * l)) * (1.0 + u) * (-u).exp();
                    }
                });
                let dl: f64 = dv
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&d, &gd)| {
                        let u = s5 * d.sqrt() / l;
                        gd * u * u / (3.0 * l) * (1.0 + u) * (-u).exp()
                    })
                    .sum();
                acc(*ls, &|s| s.as_mut_slice()[0] += dl);
            }
            Op::Periodic(a, b, ls, per) => {
                let l = val(*ls).as_slice()[0];
                let p = val(*per).as_slice()[0];
                let (av, bv) = (val(*a), val(*b));
                let dim = av.cols();
                // ∂k/∂a_id = −k (2π / (ℓ² p)) sin(2π (a_id − b_jd) / p), and ∂k/∂b = −∂k/∂a
                let mut ga = Matrix::zeros(av.rows(), dim);
                let mut gb = Matrix::zeros(bv.rows(), dim);
                let (mut dl, mut dp) = (0.0, 0.0);
                let c = 2.0 * PI / (l * l * p);
                for i in 0..av.rows() {
                    let ar = av.row(i);
                    for j in 0..bv.rows() {
                        let gk = g.get(i, j) * y.get(i, j);
                        if gk == 0.0 {
                            continue;
                        }
                        let br = bv.row(j);
                        let mut sum_sq = 0.0;
                        let mut sum_sd = 0.0;
                        for d in 0..dim {
                            let delta = ar[d] - br[d];
                            let u = PI * delta / p;
                            let sn = u.sin();
                            sum_sq += sn * sn;
                            let s2 = (2.0 * u).sin();
                            sum_sd += s2 * delta;
                            let dd = -gk * c * s2;
                            ga.row_mut(i)[d] += dd;
                            gb.row_mut(j)[d] -= dd;
                        }
                        dl += gk * 4.0 * sum_sq / (l * l * l);
                        dp += gk * c * sum_sd / p;
                    }
                }
                acc(*a, &|s| s.add_scaled(&ga, 1.0));
                acc(*b, &|s| s.add_scaled(&gb, 1.0));
                acc(*ls, &|s| s.as_mut_slice()[0] += dl);
                acc(*per, &|s| s.as_mut_slice()[0] += dp);
            }
            Op::CholQuad { k, y: yv, alpha } => {
                let gs = g.as_slice()[0];
                acc(*k, &|s| {
                    let a = alpha.as_slice();
                    let n = a.len();
                    for i in 0..n {
                        let row = s.row_mut(i);
                        for j in 0..n {
                            row[j] -= gs * a[i] * a[j];
                        }
                    }
                });
                acc(*yv, &|s| s.add_scaled(alpha, 2.0 * gs));
            }
            Op::CholLogDet { k, factor } => {
                let gs = g.as_slice()[0];
                if self.wants(*k) {
                    let inv = factor.inverse();
                    acc(*k, &|s| s.add_scaled(&inv, gs));
                }
            }
            Op::LstmCell {
                x,
                state,
                weights,
                bias,
                gates,
                tanh_c,
            } => {
                let (xv, sv, wv) = (val(*x), val(*state), val(*weights));
                let n = xv.rows();
                let h = tanh_c.cols();
                let mut d_pre = Matrix::zeros(n, 4 * h);
                let mut dc_prev = Matrix::zeros(n, h);
                for r in 0..n {
                    let gt = gates.row(r);
                    let tc = tanh_c.row(r);
                    let gr = g.row(r);
                    let c_prev = &sv.row(r)[h..];
                    let dp = d_pre.row_mut(r);
                    let dcp = dc_prev.row_mut(r);
                    for j in 0..h {
                        let (i_g, f_g, c_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * o_g * (1.0 - tc[j] * tc[j]);
                        dp[j] = dc * c_g * i_g * (1.0 - i_g);
                        dp[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
                        dp[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                        dp[3 * h + j] = dh * tc[j] * o_g * (1.0 - o_g);
                        dcp[j] = dc * f_g;
                    }
                }
                if self.wants(*weights) {
                    let xh = lstm_input(xv, sv, h);
                    acc(*weights, &|s| gemm(true, &xh, false, &d_pre, s, 1.0));
                }
                acc(*bias, &|s| {
                    let out = s.as_mut_slice();
                    for r in 0..n {
                        for (o, v) in out.iter_mut().zip(d_pre.row(r)) {
                            *o += v;
                        }
                    }
                });
                if self.wants(*x) || self.wants(*state) {
                    let mut d_xh = Matrix::zeros(n, xv.cols() + h);
                    gemm(false, &d_pre, true, wv, &mut d_xh, 0.0);
                    let w = xv.cols();
                    acc(*x, &|s| {
                        for r in 0..n {
                            for (o, v) in s.row_mut(r).iter_mut().zip(&d_xh.row(r)[..w]) {
                                *o += v;
                            }
                        }
                    });
                    acc(*state, &|s| {
                        for r in 0..n {
                            let row = s.row_mut(r);
                            for j in 0..h {
                                row[j] += d_xh.get(r, w + j);
                                row[h + j] += dc_prev.get(r, j);
                            }
                        }
                    });
                }
            }
            Op::AttentionPool { weights, states } => {
                let wv = val(*weights);
                for (t, st) in states.iter().enumerate() {
                    acc(*st, &|s| {
                        for i in 0..g.rows() {
                            let a = wv.get(i, t);
                            for (o, x) in s.row_mut(i).iter_mut().zip(g.row(i)) {
                                *o += a * x;
                            }
                        }
                    });
                }
                acc(*weights, &|s| {
                    for (t, st) in states.iter().enumerate() {
                        let sv = val(*st);
                        for i in 0..g.rows() {
                            let d: f64 = g.row(i).iter().zip(sv.row(i)).map(|(p, q)| p * q).sum();
                            s.set(i, t, s.get(i, t) + d);
                        }
                    }
                });
            }
        }
    }
}

/// `[x | h]` where `h` is the first half of `state`.
fn lstm_input(x: &Matrix, state: &Matrix, h: usize) -> Matrix {
    let n = x.rows();
    let w = x.cols();
    let mut xh = Matrix::zeros(n, w + h);
    for r in 0..n {
        let row = xh.row_mut(r);
        row[..w].copy_from_slice(x.row(r));
        row[w..].copy_from_slice(&state.row(r)[..h]);
    }
    xh
}

/// Pairwise squared distances `‖a_i‖² + ‖b_j‖² − 2 a_i·b_j`, clamped at 0.
pub fn sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "sq_dist feature dimension");
    let an: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
    let bn: Vec<f64> = (0..b.rows()).map(|j| b.row(j).iter().map(|v| v * v).sum()).collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    gemm(false, a, true, b, &mut out, 0.0);
    for i in 0..a.rows() {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (an[i] + bn[j] - 2.0 * *o).max(0.0);
        }
    }
    out
}

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `(1 + √5 r/ℓ + 5r²/(3ℓ²)) exp(−√5 r/ℓ)`.
pub fn matern52_unit(r: f64, lengthscale: f64) -> f64 {
    let u = 5f64.sqrt() * r / lengthscale;
    (1.0 + u + u * u / 3.0) * (-u).exp()
}

/// `Σ_d sin²(π (a_d − b_d) / p)`.
pub fn periodic_sin_sum(a: &[f64], b: &[f64], period: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (PI * (x - y) / period).sin().powi(2))
        .sum()
}

/// `exp(−2 Σ_d sin²(π (a_d − b_d) / p) / ℓ²)`.
pub fn periodic_unit(a: &[f64], b: &[f64], lengthscale: f64, period: f64) -> f64 {
    (-2.0 * periodic_sin_sum(a, b, period) / (lengthscale * lengthscale)).exp()
}

pub fn periodic_matrix(a: &Matrix, b: &Matrix, lengthscale: f64, period: f64) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "periodic feature dimension");
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        periodic_unit(a.row(i), b.row(j), lengthscale, period)
    })
}

