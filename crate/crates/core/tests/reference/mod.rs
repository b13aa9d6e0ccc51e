//! Plain-loop post-LN encoder without either mechanism, written
//! independently of the crate's matrix code.

use synloc_core::model::Model;
use synloc_core::Matrix;

pub type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mm(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layer_norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Vanilla post-LN encoder; the attention output is multiplied by
/// `branches` (two identical branches summed).
pub fn reference_encoder(model: &Model, tokens: &[usize], branches: f64) -> Rows {
    let p = |n: &str| rows(model.params.get(n).unwrap());
    let c = &model.config.encoder;
    let dh = c.head_dim();
    let (emb, pos) = (p("tok_emb"), p("enc_pos"));
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| emb[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 1..=c.num_layers {
        let w = |s: &str| p(&format!("enc{l}.{s}"));
        let (q, k, v) = (mm(&x, &w("attn.w_q")), mm(&x, &w("attn.w_k")), mm(&x, &w("attn.w_v")));
        let mut cat = vec![vec![0.0; c.model_dim]; x.len()];
        for h in 0..c.num_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let wts = softmax(&scores);
                for d in cols.clone() {
                    cat[i][d] = (0..x.len()).map(|j| wts[j] * v[j][d]).sum();
                }
            }
        }
        let attn = mm(&cat, &w("attn.w_o"));
        let res: Rows = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + branches * q).collect())
            .collect();
        let a = layer_norm(&res, &w("ln1.g")[0], &w("ln1.b")[0]);
        let hidden: Rows = mm(&a, &w("ffn.w1"))
            .into_iter()
            .map(|r| r.iter().zip(&w("ffn.b1")[0]).map(|(x, b)| gelu(x + b)).collect())
            .collect();
        let f: Rows = mm(&hidden, &w("ffn.w2"))
            .into_iter()
            .map(|r| r.iter().zip(&w("ffn.b2")[0]).map(|(x, b)| x + b).collect())
            .collect();
        let res: Rows = a.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        x = layer_norm(&res, &w("ln2.g")[0], &w("ln2.b")[0]);
    }
    x
}

pub fn max_diff(a: &Matrix, b: &Rows) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in b.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m = m.max((a.get(i, j) - v).abs());
        }
    }
    m
}
