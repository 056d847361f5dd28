//! A small reverse-mode tape over [`Matrix`] values.
//!
//! The graph is rebuilt for every sample. Parameter leaves borrow the
//! model's weights; only leaves flagged trainable (and nodes downstream of
//! them) take part in the backward sweep, so frozen groups cost nothing on
//! the way back and always report an exactly zero gradient.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    /// `a · bᵀ` (linear layer with `[out, in]` weights).
    MatMulT(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0]
            .value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Input, false)
    }

    pub fn param(&mut self, name: &str, value: &'a Matrix, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(name.to_string()), trainable)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push_owned(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_owned(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a).add_row(self.value(bias));
        self.push_owned(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is treated
    /// as `-inf` and comes out as exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let out = softmax_rows(self.value(a), causal);
        self.push_owned(out, Op::Softmax(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push_owned(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_cols(&mats);
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_rows(&mats);
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push_owned(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `root`) back through the tape and returns the gradient of every
    /// trainable parameter leaf, keyed by parameter name.
    pub fn backward(&self, root: Var, seed: Matrix) -> BTreeMap<String, Matrix> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    match out.get_mut(name) {
                        Some(acc) => Matrix::add_assign(acc, &dy),
                        None => {
                            out.insert(name.clone(), dy);
                        }
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs_grad(*a) {
                        let da = dy.matmul(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let db = dy.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let da = dy.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let db = self.value(*a).t_matmul(&dy);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        accumulate(&mut grads, *b, dy.clone());
                    }
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs_grad(*bias) {
                        accumulate(&mut grads, *bias, dy.sum_rows());
                    }
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, dy.scaled(*s));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = dy;
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.needs_grad(*gamma) {
                        let mut dg = Matrix::zeros(1, xhat.cols());
                        for r in 0..xhat.rows() {
                            for ((g, d), h) in dg.data_mut().iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                                *g += d * h;
                            }
                        }
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if self.needs_grad(*beta) {
                        accumulate(&mut grads, *beta, dy.sum_rows());
                    }
                    if self.needs_grad(*x) {
                        let g = self.value(*gamma);
                        let n = xhat.cols() as f64;
                        let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                        for r in 0..xhat.rows() {
                            let dyr = dy.row(r);
                            let hr = xhat.row(r);
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for c in 0..hr.len() {
                                let dh = dyr[c] * g.data()[c];
                                sum_d += dh;
                                sum_dh += dh * hr[c];
                            }
                            let is = inv_std[r];
                            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                                let dh = dyr[c] * g.data()[c];
                                *o = is * (dh - sum_d / n - hr[c] * sum_dh / n);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let dr = dy.row(r);
                        let dot: f64 = pr.iter().zip(dr).map(|(x, y)| x * y).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = pr[c] * (dr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    let w = dy.cols();
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs_grad(*p) {
                            accumulate(&mut grads, *p, dy.slice_cols(offset, w));
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        if self.needs_grad(*p) {
                            accumulate(&mut grads, *p, dy.slice_rows(offset, h));
                        }
                        offset += h;
                    }
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, d) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(m: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let limit = if causal { (r + 1).min(row.len()) } else { row.len() };
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut sum = 0.0;
        for c in 0..limit {
            let e = (row[c] - max).exp();
            o[c] = e;
            sum += e;
        }
        for v in &mut o[..limit] {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `sum(out ⊙ probe)` so any op can be checked against
    /// central differences with a fixed random probe.
    fn check_op(build: impl Fn(&mut Graph, Var) -> Var, input: Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = {
            let mut g = Graph::new();
            let x = g.param("x", &input, true);
            let y = build(&mut g, x);
            Matrix::randn(g.value(y).rows(), g.value(y).cols(), 1.0, &mut rng)
        };
        let objective = |m: &Matrix| {
            let mut g = Graph::new();
            let x = g.param("x", m, true);
            let y = build(&mut g, x);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let x = g.param("x", &input, true);
        let y = build(&mut g, x);
        let grads = g.backward(y, probe.clone());
        let analytic = &grads["x"];
        let eps = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "element {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(rows as u64 * 31 + cols as u64);
        Matrix::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn softmax_causal_zeroes_future() {
        let p = softmax_rows(&sample(3, 3), true);
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(0, 2), 0.0);
        assert_eq!(p.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_and_structural_ops_match_finite_differences() {
        check_op(|g, x| g.gelu(x), sample(3, 4));
        check_op(|g, x| g.scale(x, -2.5), sample(2, 3));
        check_op(|g, x| g.softmax(x, false), sample(3, 5));
        check_op(|g, x| g.softmax(x, true), sample(4, 4));
        check_op(
            |g, x| {
                let a = g.slice_cols(x, 1, 2);
                let b = g.slice_cols(x, 0, 1);
                g.concat_cols(&[a, b, a])
            },
            sample(3, 4),
        );
        check_op(|g, x| g.concat_rows(&[x, x]), sample(2, 3));
        check_op(|g, x| g.gather(x, &[2, 0, 2]), sample(3, 4));
    }

    #[test]
    fn products_match_finite_differences() {
        let w = sample(5, 4);
        let other = sample(4, 3);
        check_op(
            {
                let w = w.clone();
                move |g: &mut Graph, x| {
                    let wv = g.input(w.clone());
                    g.matmul_t(x, wv)
                }
            },
            sample(3, 4),
        );
        check_op(
            move |g: &mut Graph, x| {
                let ov = g.input(other.clone());
                g.matmul(x, ov)
            },
            sample(2, 4),
        );
        // Gradient with respect to the weight side.
        let xin = sample(3, 4);
        check_op(
            move |g: &mut Graph, w| {
                let xv = g.input(xin.clone());
                g.matmul_t(xv, w)
            },
            w,
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let gamma = sample(1, 5);
        let beta = sample(1, 5);
        check_op(
            {
                let (gamma, beta) = (gamma.clone(), beta.clone());
                move |g: &mut Graph, x| {
                    let gv = g.input(gamma.clone());
                    let bv = g.input(beta.clone());
                    g.layer_norm(x, gv, bv)
                }
            },
            sample(3, 5),
        );
        let x = sample(3, 5);
        check_op(
            move |g: &mut Graph, gm| {
                let xv = g.input(x.clone());
                let bv = g.input(beta.clone());
                g.layer_norm(xv, gm, bv)
            },
            gamma,
        );
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let w = sample(2, 2);
        let x = sample(1, 2);
        let mut g = Graph::new();
        let wv = g.param("w", &w, false);
        let xv = g.param("x", &x, true);
        let y = g.matmul_t(xv, wv);
        let grads = g.backward(y, Matrix::filled(1, 2, 1.0));
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("w"));
    }
}
