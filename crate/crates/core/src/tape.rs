//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Forward values
//! come from the `numkit` kernels; [`Tape::backward`] walks the record in
//! reverse and accumulates adjoints. Tapes are single-use.

use crate::error::{Error, Result};
use crate::numkit::{self, sigmoid, Matrix};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + row`, where `row` is `1 x cols` broadcast over rows.
    AddRow(Var, Var),
    /// `a ⊙ row`, with `row` broadcast as above.
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Zero-mean unit-variance normalization of each row.
    NormalizeRows(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// `G[i][j] = -(j - c_i)^2 / (2 sigma_i^2)` with
    /// `sigma_i = max(window_i / 2, floor)`.
    GaussianBias {
        window: Var,
        center: Var,
        floor: f64,
    },
    /// `-sum w * ln(max(p[r][c], floor))` over the listed picks.
    WeightedNll {
        probs: Var,
        picks: Vec<(usize, usize, f64)>,
        floor: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped: usize,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped by [`Tape::weighted_nll`] so far.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numkit::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numkit::matmul_transposed(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numkit::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::dims("add_row", m.shape(), r.shape()));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::dims("mul_row", m.shape(), r.shape()));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x *= y;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = numkit::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = numkit::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        let n = m.cols() as f64;
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(indices)?;
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec())))
    }

    /// Gaussian localness bias from per-row window sizes and centers, both
    /// `I x 1` columns. The output is `I x I`.
    pub fn gaussian_bias(&mut self, window: Var, center: Var, floor: f64) -> Result<Var> {
        let (w, c) = (self.value(window), self.value(center));
        if w.cols() != 1 || c.shape() != w.shape() {
            return Err(Error::dims("gaussian_bias", w.shape(), c.shape()));
        }
        let n = w.rows();
        let sigmas: Vec<f64> = w.data().iter().map(|&d| (d / 2.0).max(floor)).collect();
        let v = crate::localness::gaussian_bias_rows(c.data(), &sigmas, n)?;
        Ok(self.push(v, Op::GaussianBias { window, center, floor }))
    }

    /// Weighted negative log-likelihood of picked entries of a probability
    /// matrix. Probabilities below `floor` are clamped and counted.
    pub fn weighted_nll(
        &mut self,
        probs: Var,
        picks: Vec<(usize, usize, f64)>,
        floor: f64,
    ) -> Result<Var> {
        let p = self.value(probs);
        let mut loss = 0.0;
        let mut clamped = 0;
        for &(r, c, w) in &picks {
            if r >= p.rows() || c >= p.cols() {
                return Err(Error::dims("weighted_nll", p.shape(), (r, c)));
            }
            let x = p.get(r, c);
            if x < floor {
                clamped += 1;
            }
            loss -= w * x.max(floor).ln();
        }
        self.clamped += clamped;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::WeightedNll { probs, picks, floor },
        ))
    }

    /// Adjoints of every node with respect to the `1 x 1` output `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.shape() != (1, 1) {
            return Err(Error::dims("backward", root_val.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let da = numkit::matmul_transposed(&g, self.value(*b))?;
                    let db = numkit::matmul(&self.value(*a).transpose(), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a
                    let da = numkit::matmul(&g, self.value(*b))?;
                    let db = numkit::matmul(&g.transpose(), self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, x) in dr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, dr);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.set(i, j, g.get(i, j) * rv.get(0, j));
                            dr.row_mut(0)[j] += g.get(i, j) * av.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, dr);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, numkit::scale(&g, *c)),
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, zip_map(&g, x, |g, x| g * gelu_grad(x)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(g, y)| g * y).sum();
                        for j in 0..y.cols() {
                            da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols() as f64;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let row = x.row(i);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = g.row(i).iter().sum::<f64>() / n;
                        let gy_mean: f64 =
                            g.row(i).iter().zip(y.row(i)).map(|(g, y)| g * y).sum::<f64>() / n;
                        for j in 0..x.cols() {
                            da.set(i, j, inv * (g.get(i, j) - g_mean - y.get(i, j) * gy_mean));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(offset, cols)?);
                        offset += cols;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (dst, &s) in indices.iter().enumerate() {
                        for (d, x) in da.row_mut(s).iter_mut().zip(g.row(dst)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GaussianBias { window, center, floor } => {
                    let w = self.value(*window);
                    let c = self.value(*center);
                    let n = w.rows();
                    let mut dw = Matrix::zeros(n, 1);
                    let mut dc = Matrix::zeros(n, 1);
                    for i in 0..n {
                        let half = w.get(i, 0) / 2.0;
                        let sigma = half.max(*floor);
                        let ci = c.get(i, 0);
                        let mut d_sigma = 0.0;
                        let mut d_center = 0.0;
                        for j in 0..g.cols() {
                            let off = j as f64 - ci;
                            let gij = g.get(i, j);
                            d_sigma += gij * off * off / (sigma * sigma * sigma);
                            d_center += gij * off / (sigma * sigma);
                        }
                        if half > *floor {
                            dw.set(i, 0, d_sigma / 2.0);
                        }
                        dc.set(i, 0, d_center);
                    }
                    accumulate(&mut grads, *window, dw);
                    accumulate(&mut grads, *center, dc);
                }
                Op::WeightedNll { probs, picks, floor } => {
                    let p = self.value(*probs);
                    let upstream = g.get(0, 0);
                    let mut dp = Matrix::zeros(p.rows(), p.cols());
                    for &(r, c, w) in picks {
                        let x = p.get(r, c);
                        if x >= *floor {
                            let cur = dp.get(r, c);
                            dp.set(r, c, cur - upstream * w / x);
                        }
                    }
                    accumulate(&mut grads, *probs, dp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("zip_map shapes agree")
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
