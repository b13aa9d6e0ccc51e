//! Scaled dot-product and multi-head attention with an optional additive
//! bias on the scores.
//!
//! Both structural mechanisms reduce to the same primitive:
//!
//! ```text
//! gaussian: softmax((q k^T + G) / sqrt(d)) v      bias inside the scaling
//! mask:     scores = q k^T + M; softmax(scores / sqrt(d)) v
//! ```
//!
//! The two placements are arithmetically identical here; the tag keeps track
//! of which construction a bias came from so callers can validate it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix, NEG_INF};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    None,
    Gaussian,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Added to the raw scores before the `1/sqrt(d)` factor is applied,
    /// as part of the scaled quantity.
    InsideScaling,
    /// Folded into the scores themselves; scaling then applies to the sum.
    PreScaling,
}

/// Additive bias on attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    kind: BiasKind,
    bias: Option<Matrix>,
    placement: Placement,
}

impl AttentionBias {
    pub fn none() -> Self {
        Self {
            kind: BiasKind::None,
            bias: None,
            placement: Placement::InsideScaling,
        }
    }

    /// Gaussian localness bias; every entry must be `<= 0`.
    pub fn gaussian(bias: Matrix) -> Result<Self> {
        check_square(&bias)?;
        if let Some(x) = bias.data().iter().find(|&&x| !(x <= 0.0)) {
            return Err(Error::Parameter(format!("gaussian bias entry {x} is not <= 0")));
        }
        Ok(Self {
            kind: BiasKind::Gaussian,
            bias: Some(bias),
            placement: Placement::InsideScaling,
        })
    }

    /// Visibility-mask bias; every entry must be `0` or [`NEG_INF`].
    pub fn mask(bias: Matrix) -> Result<Self> {
        check_square(&bias)?;
        if let Some(x) = bias.data().iter().find(|&&x| x != 0.0 && x != NEG_INF) {
            return Err(Error::Parameter(format!("mask bias entry {x} is neither 0 nor NEG_INF")));
        }
        Ok(Self {
            kind: BiasKind::Mask,
            bias: Some(bias),
            placement: Placement::PreScaling,
        })
    }

    pub fn kind(&self) -> BiasKind {
        self.kind
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn matrix(&self) -> Option<&Matrix> {
        self.bias.as_ref()
    }
}

fn check_square(m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::dims("attention bias", m.shape(), (m.cols(), m.rows())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix,
    pub weights: Matrix,
}

fn biased_scores(scores: Matrix, bias: &AttentionBias) -> Result<Matrix> {
    let Some(b) = bias.matrix() else {
        return Ok(scores);
    };
    if b.shape() != scores.shape() {
        return Err(Error::dims("attend bias", scores.shape(), b.shape()));
    }
    if bias.kind() == BiasKind::Gaussian {
        return numkit::add(&scores, &row_max_shifted(b));
    }
    let summed = numkit::add(&scores, b)?;
    check_visible_rows(&summed)?;
    Ok(summed)
}

/// `m` minus its row maxima. Softmax ignores per-row shifts, and a Gaussian
/// with a floored width can sit far below `NEG_INF` everywhere in a row;
/// shifting keeps the row's peak at zero.
fn row_max_shifted(m: &Matrix) -> Matrix {
    numkit::add(m, &row_max_offsets(m)).expect("same shape")
}

/// Each row filled with minus that row's maximum.
fn row_max_offsets(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let max = m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.row_mut(r).iter_mut().for_each(|x| *x = -max);
    }
    out
}

fn check_visible_rows(m: &Matrix) -> Result<()> {
    for r in 0..m.rows() {
        if !m.row(r).iter().any(|&x| x > NEG_INF / 2.0) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Ok(())
}

/// Scaled dot-product attention with an additive score bias.
///
/// Returns the attended values together with the post-softmax weights.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, bias: &AttentionBias) -> Result<AttentionOutput> {
    if k.rows() != v.rows() {
        return Err(Error::dims("attend k/v", k.shape(), v.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = biased_scores(numkit::matmul_transposed(q, k)?, bias)?;
    let weights = numkit::softmax_rows(&numkit::scale(&scores, scale))?;
    let output = numkit::matmul(&weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// Projection weights for multi-head attention.
///
/// Each projection is stored as one `model_dim x model_dim` matrix; head `h`
/// owns columns `[h * head_dim, (h + 1) * head_dim)` of `w_q`, `w_k`, `w_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub num_heads: usize,
    pub head_dim: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl MultiHeadParams {
    pub fn new(
        num_heads: usize,
        head_dim: usize,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
    ) -> Result<Self> {
        let d = num_heads * head_dim;
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Parameter("num_heads and head_dim must be positive".into()));
        }
        for m in [&w_q, &w_k, &w_v, &w_o] {
            if m.shape() != (d, d) {
                return Err(Error::dims("MultiHeadParams", (d, d), m.shape()));
            }
            if !m.is_finite() {
                return Err(Error::Parameter("non-finite projection".into()));
            }
        }
        Ok(Self {
            num_heads,
            head_dim,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn identity(num_heads: usize, head_dim: usize) -> Self {
        let d = num_heads * head_dim;
        Self::new(
            num_heads,
            head_dim,
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
        )
        .expect("identity projections are valid")
    }

    /// Uniform `±1/sqrt(model_dim)` initialization.
    pub fn random(num_heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        let d = num_heads * head_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = || {
            let data = (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::new(d, d, data).expect("square")
        };
        let (w_q, w_k, w_v, w_o) = (draw(), draw(), draw(), draw());
        Self::new(num_heads, head_dim, w_q, w_k, w_v, w_o).expect("random projections are valid")
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    pub output: Matrix,
    /// Post-softmax weights, one matrix per head.
    pub weights: Vec<Matrix>,
}

/// Multi-head self-attention with one bias shared by every head.
pub fn multi_head_attend(x: &Matrix, params: &MultiHeadParams, bias: &AttentionBias) -> Result<Matrix> {
    Ok(multi_head_attend_with(x, params, |_, _| Ok(bias.clone()))?.output)
}

/// Multi-head self-attention where each head's bias is built from that
/// head's projected queries, as the Gaussian localness bias requires.
pub fn multi_head_attend_with<F>(
    x: &Matrix,
    params: &MultiHeadParams,
    mut bias_for_head: F,
) -> Result<MultiHeadOutput>
where
    F: FnMut(usize, &Matrix) -> Result<AttentionBias>,
{
    if x.cols() != params.model_dim() {
        return Err(Error::dims("multi_head_attend", x.shape(), params.w_q.shape()));
    }
    let q = numkit::matmul(x, &params.w_q)?;
    let k = numkit::matmul(x, &params.w_k)?;
    let v = numkit::matmul(x, &params.w_v)?;
    let dh = params.head_dim;
    let mut heads = Vec::with_capacity(params.num_heads);
    let mut weights = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let bias = bias_for_head(h, &qh)?;
        let out = attend(&qh, &kh, &vh, &bias)?;
        heads.push(out.output);
        weights.push(out.weights);
    }
    let output = numkit::matmul(&Matrix::concat_cols(&heads)?, &params.w_o)?;
    Ok(MultiHeadOutput { output, weights })
}

/// Additive score bias recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeBias {
    None,
    Gaussian(Var),
    Mask(Var),
}

/// Differentiable counterpart of [`attend`]: records the computation on
/// `tape` and returns `(output, weights)`.
pub fn attend_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var, bias: TapeBias) -> Result<(Var, Var)> {
    let d = tape.value(q).cols();
    let mut scores = tape.matmul_t(q, k)?;
    match bias {
        TapeBias::None => {}
        TapeBias::Gaussian(g) => {
            // the shift is constant per row, so its gradient cancels in softmax
            let offset = tape.leaf(row_max_offsets(tape.value(g)));
            let shifted = tape.add(g, offset)?;
            scores = tape.add(scores, shifted)?;
        }
        TapeBias::Mask(m) => {
            scores = tape.add(scores, m)?;
            check_visible_rows(tape.value(scores))?;
        }
    }
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scaled)?;
    let output = tape.matmul(weights, v)?;
    Ok((output, weights))
}
