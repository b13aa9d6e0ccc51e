//! Answer-centred Gaussian bias on encoder self-attention.
//!
//! Each query row `i` gets its own window `D_i = I * sigmoid(U_d^T tanh(W_p q_i))`
//! and standard deviation `sigma_i = D_i / 2`. The bias is
//! `G[i][j] = -(j - P_c)^2 / (2 sigma_i^2)`, centred on the answer midpoint
//! `P_c = (s + e) / 2` or, in the predicted-centre variant, on
//! `I * sigmoid(U_p^T tanh(W_p q_i))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sigmoid, Matrix};
use crate::tape::{Tape, Var};

/// Lower bound applied to every `sigma_i`.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Inclusive answer span in the concatenated `A [SEP] P` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
}

impl AnswerSpan {
    /// Validates `start <= end < len` and that the span starts at or after
    /// `passage_offset`, the first passage token.
    pub fn new(start: usize, end: usize, len: usize, passage_offset: usize) -> Result<Self> {
        if start > end || end >= len {
            return Err(Error::Parameter(format!(
                "answer span [{start}, {end}] invalid for length {len}"
            )));
        }
        if start < passage_offset {
            return Err(Error::Parameter(format!(
                "answer span starts at {start}, before the passage at {passage_offset}"
            )));
        }
        Ok(Self { start, end })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterStrategy {
    #[default]
    AnswerCenter,
    PredictedCenter,
}

/// Per-layer learnable localness parameters, shared by the heads of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalnessParams {
    /// `head_dim x head_dim`
    pub w_p: Matrix,
    pub u_d: Vec<f64>,
    /// Only read by [`CenterStrategy::PredictedCenter`].
    pub u_p: Vec<f64>,
    pub center_strategy: CenterStrategy,
}

impl LocalnessParams {
    /// `W_p ~ U(-1/sqrt(d_h), 1/sqrt(d_h))`; `U_d` and `U_p` start at zero so
    /// every window begins at the neutral `I / 2`.
    pub fn init(head_dim: usize, center_strategy: CenterStrategy, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (head_dim as f64).sqrt();
        let data = (0..head_dim * head_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            w_p: Matrix::new(head_dim, head_dim, data).expect("square"),
            u_d: vec![0.0; head_dim],
            u_p: vec![0.0; head_dim],
            center_strategy,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_p.rows()
    }
}

pub fn answer_center(span: AnswerSpan) -> f64 {
    (span.start + span.end) as f64 / 2.0
}

// U^T tanh(W_p q)
fn projected_logit(q: &[f64], w_p: &Matrix, u: &[f64]) -> Result<f64> {
    if q.len() != w_p.cols() || u.len() != w_p.rows() {
        return Err(Error::dims("localness projection", w_p.shape(), (q.len(), u.len())));
    }
    let mut z = 0.0;
    for (r, &ur) in u.iter().enumerate() {
        let mut acc = 0.0;
        for (w, x) in w_p.row(r).iter().zip(q) {
            acc += w * x;
        }
        z += ur * acc.tanh();
    }
    Ok(z)
}

/// Window size `D_i` for one query vector; lies in `(0, len)`.
pub fn window_size(q: &[f64], params: &LocalnessParams, len: usize) -> Result<f64> {
    let z = projected_logit(q, &params.w_p, &params.u_d)?;
    Ok(len as f64 * sigmoid(z))
}

pub fn sigma_from_window(window: f64) -> f64 {
    (window / 2.0).max(SIGMA_FLOOR)
}

/// Predicted centre for one query vector, mapped into `(0, len)`.
pub fn predicted_center(q: &[f64], params: &LocalnessParams, len: usize) -> Result<f64> {
    let p = projected_logit(q, &params.w_p, &params.u_p)?;
    Ok(len as f64 * sigmoid(p))
}

/// `I x I` Gaussian bias around a single centre with one sigma per row.
pub fn gaussian_bias(center: f64, sigmas: &[f64], len: usize) -> Result<Matrix> {
    gaussian_bias_rows(&vec![center; sigmas.len()], sigmas, len)
}

/// Gaussian bias where every row may have its own centre.
pub fn gaussian_bias_rows(centers: &[f64], sigmas: &[f64], len: usize) -> Result<Matrix> {
    if sigmas.len() != len || centers.len() != len {
        return Err(Error::dims("gaussian_bias", (len, len), (centers.len(), sigmas.len())));
    }
    let mut g = Matrix::zeros(len, len);
    for (i, (&c, &s)) in centers.iter().zip(sigmas).enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Parameter(format!("sigma {s} for row {i} is not positive")));
        }
        let s = s.max(SIGMA_FLOOR);
        let denom = 2.0 * s * s;
        for (j, x) in g.row_mut(i).iter_mut().enumerate() {
            let off = j as f64 - c;
            *x = -(off * off) / denom;
        }
    }
    Ok(g)
}

/// Everything computed for one head's Gaussian bias.
#[derive(Debug, Clone)]
pub struct HeadLocalness {
    pub bias: Matrix,
    pub windows: Vec<f64>,
    pub centers: Vec<f64>,
}

/// Builds one head's Gaussian bias from its projected queries (`I x d_h`).
pub fn head_localness(
    queries: &Matrix,
    params: &LocalnessParams,
    span: AnswerSpan,
) -> Result<HeadLocalness> {
    let len = queries.rows();
    let mut windows = Vec::with_capacity(len);
    let mut centers = Vec::with_capacity(len);
    for i in 0..len {
        let q = queries.row(i);
        windows.push(window_size(q, params, len)?);
        centers.push(match params.center_strategy {
            CenterStrategy::AnswerCenter => answer_center(span),
            CenterStrategy::PredictedCenter => predicted_center(q, params, len)?,
        });
    }
    let sigmas: Vec<f64> = windows.iter().map(|&d| sigma_from_window(d)).collect();
    let bias = gaussian_bias_rows(&centers, &sigmas, len)?;
    Ok(HeadLocalness {
        bias,
        windows,
        centers,
    })
}

/// Tape handles for the localness parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LocalnessVars {
    /// `d_h x d_h`
    pub w_p: Var,
    /// `d_h x 1`
    pub u_d: Var,
    /// `d_h x 1`, predicted-centre variant only.
    pub u_p: Option<Var>,
}

/// Differentiable Gaussian bias for one head. Returns `(bias, windows, centers)`.
pub fn head_localness_on_tape(
    tape: &mut Tape,
    queries: Var,
    vars: LocalnessVars,
    span: AnswerSpan,
) -> Result<(Var, Var, Var)> {
    let len = tape.value(queries).rows();
    let hidden = tape.matmul_t(queries, vars.w_p)?;
    let hidden = tape.tanh(hidden);
    let z = tape.matmul(hidden, vars.u_d)?;
    let s = tape.sigmoid(z);
    let window = tape.scale(s, len as f64);
    let center = match vars.u_p {
        None => tape.leaf(Matrix::filled(len, 1, answer_center(span))),
        Some(u_p) => {
            let p = tape.matmul(hidden, u_p)?;
            let p = tape.sigmoid(p);
            tape.scale(p, len as f64)
        }
    };
    let bias = tape.gaussian_bias(window, center, SIGMA_FLOOR)?;
    Ok((bias, window, center))
}
