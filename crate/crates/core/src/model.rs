//! Small post-LN transformer encoder-decoder carrying both structural
//! mechanisms in the encoder.
//!
//! Each encoder layer projects `q`, `k`, `v` once and runs two attention
//! branches over them: the localness branch (Gaussian bias in localness
//! layers, plain attention elsewhere) and, in syntactic-mask layers, the
//! masked branch. The branch outputs are summed before the residual
//! connection. The decoder is a standard causal transformer decoder with
//! `n` independent output heads; head `j` predicts the token `j` steps
//! ahead. Generation uses head 0 only.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_on_tape, TapeBias};
use crate::error::{Error, Result};
use crate::localness::{head_localness_on_tape, AnswerSpan, CenterStrategy, LocalnessVars};
use crate::numkit::{Matrix, NEG_INF};
use crate::synmask::{mask_to_bias, VisibilityMask};
use crate::tape::{Gradients, Tape, Var};
use crate::text::{BOS, EOS};

const LN_EPS: f64 = 1e-5;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// 1-based layer indices that use the Gaussian localness bias.
    pub localness_layers: Vec<usize>,
    /// 1-based layer indices that add the syntactic-mask branch.
    pub synmask_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            ffn_dim: 64,
            localness_layers: vec![1],
            synmask_layers: vec![1, 2],
        }
    }
}

impl EncoderConfig {
    /// Twelve layers, localness in the first four, masks everywhere.
    pub fn full_scale() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            model_dim: 768,
            ffn_dim: 3072,
            localness_layers: (1..=4).collect(),
            synmask_layers: (1..=12).collect(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn has_localness(&self, layer: usize) -> bool {
        self.localness_layers.contains(&layer)
    }

    pub fn has_synmask(&self, layer: usize) -> bool {
        self.synmask_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        for (name, layers) in [("localness_layers", &self.localness_layers), ("synmask_layers", &self.synmask_layers)] {
            if let Some(l) = layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
                return Err(Error::Config(format!(
                    "{name} contains {l}, outside 1..={}",
                    self.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Weights of the `n` future-token losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLossConfig {
    pub n: usize,
    pub alphas: Vec<f64>,
}

impl Default for NGramLossConfig {
    fn default() -> Self {
        Self {
            n: 1,
            alphas: vec![1.0],
        }
    }
}

impl NGramLossConfig {
    pub fn new(n: usize, alphas: Vec<f64>) -> Result<Self> {
        let c = Self { n, alphas };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if self.alphas.len() != self.n {
            return Err(Error::Config(format!(
                "{} alphas given for n = {}",
                self.alphas.len(),
                self.n
            )));
        }
        if self.alphas.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("alphas must be finite and non-negative".into()));
        }
        if self.alphas.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("alphas must not all be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    /// Longest encoder or decoder sequence; sizes the position tables.
    pub max_len: usize,
    pub center_strategy: CenterStrategy,
    pub ngram: NGramLossConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ngram.validate()?;
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.vocab_size <= EOS || self.max_len == 0 {
            return Err(Error::Config("vocabulary and max_len are too small".into()));
        }
        Ok(())
    }
}

/// Named parameter matrices, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(BTreeMap<String, Matrix>);

fn stream_id(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Params {
    /// Every matrix draws from its own ChaCha stream keyed by its name, so
    /// adding or removing a parameter leaves the others untouched.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let enc = &config.encoder;
        let d = enc.model_dim;
        let dh = enc.head_dim();
        let ffn = enc.ffn_dim;
        let v = config.vocab_size;
        let mut p = Params::default();

        let uniform = |p: &mut Params, name: String, rows: usize, cols: usize, bound: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(&name));
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            p.0.insert(name, Matrix::new(rows, cols, data).expect("shape"));
        };
        let constant = |p: &mut Params, name: String, rows: usize, cols: usize, value: f64| {
            p.0.insert(name, Matrix::filled(rows, cols, value));
        };
        let attn_bound = 1.0 / (d as f64).sqrt();

        uniform(&mut p, "tok_emb".into(), v, d, 0.5);
        uniform(&mut p, "enc_pos".into(), config.max_len, d, 0.5);
        uniform(&mut p, "dec_pos".into(), config.max_len, d, 0.5);

        let block = |p: &mut Params, prefix: String| {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                uniform(p, format!("{prefix}.{w}"), d, d, attn_bound);
            }
        };
        let ffn_block = |p: &mut Params, prefix: &str| {
            uniform(p, format!("{prefix}.ffn.w1"), d, ffn, attn_bound);
            constant(p, format!("{prefix}.ffn.b1"), 1, ffn, 0.0);
            uniform(p, format!("{prefix}.ffn.w2"), ffn, d, 1.0 / (ffn as f64).sqrt());
            constant(p, format!("{prefix}.ffn.b2"), 1, d, 0.0);
        };
        let norm = |p: &mut Params, name: String| {
            constant(p, format!("{name}.g"), 1, d, 1.0);
            constant(p, format!("{name}.b"), 1, d, 0.0);
        };

        for l in 1..=enc.num_layers {
            let prefix = format!("enc{l}");
            block(&mut p, format!("{prefix}.attn"));
            if enc.has_localness(l) {
                uniform(&mut p, format!("{prefix}.local.w_p"), dh, dh, 1.0 / (dh as f64).sqrt());
                constant(&mut p, format!("{prefix}.local.u_d"), dh, 1, 0.0);
                if config.center_strategy == CenterStrategy::PredictedCenter {
                    constant(&mut p, format!("{prefix}.local.u_p"), dh, 1, 0.0);
                }
            }
            norm(&mut p, format!("{prefix}.ln1"));
            ffn_block(&mut p, &prefix);
            norm(&mut p, format!("{prefix}.ln2"));
        }
        for l in 1..=config.decoder_layers {
            let prefix = format!("dec{l}");
            block(&mut p, format!("{prefix}.self"));
            norm(&mut p, format!("{prefix}.ln1"));
            block(&mut p, format!("{prefix}.cross"));
            norm(&mut p, format!("{prefix}.ln2"));
            ffn_block(&mut p, &prefix);
            norm(&mut p, format!("{prefix}.ln3"));
        }
        for j in 0..config.ngram.n {
            uniform(&mut p, format!("head{j}.w"), d, v, attn_bound);
            constant(&mut p, format!("head{j}.b"), 1, v, 0.0);
        }
        p
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(|m| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Matrix::is_finite)
    }
}

/// Encoder input: token ids of `answer [SEP] passage`, the answer span and
/// (when any layer uses it) the visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<usize>,
    pub span: AnswerSpan,
    pub mask: Option<VisibilityMask>,
}

/// One training example: encoder input plus target ids `y_1..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub input: EncoderInput,
    pub targets: Vec<usize>,
}

/// Negative log-likelihood with the number of clamped probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramLoss {
    pub value: f64,
    pub clamped: usize,
}

/// `-sum_j alpha_j sum_{t=1}^{T-j} ln p_j(y_{t+j} | y_{<t}, x)`.
///
/// `dists[j]` holds head `j`'s distributions, row `t - 1` for step `t`.
pub fn ngram_loss(dists: &[Matrix], targets: &[usize], config: &NGramLossConfig) -> Result<NgramLoss> {
    config.validate()?;
    if dists.len() != config.n {
        return Err(Error::Config(format!("{} heads for n = {}", dists.len(), config.n)));
    }
    let t_len = targets.len();
    if t_len < config.n {
        return Err(Error::Config(format!("target length {t_len} shorter than n = {}", config.n)));
    }
    let mut value = 0.0;
    let mut clamped = 0;
    for (j, (dist, &alpha)) in dists.iter().zip(&config.alphas).enumerate() {
        let mut head = 0.0;
        for t in 1..=t_len - j {
            let target = targets[t + j - 1];
            if t > dist.rows() || target >= dist.cols() {
                return Err(Error::dims("ngram_loss", dist.shape(), (t - 1, target)));
            }
            let p = dist.get(t - 1, target);
            if p < PROB_FLOOR {
                clamped += 1;
            }
            head += p.max(PROB_FLOOR).ln();
        }
        value -= alpha * head;
    }
    if clamped > 0 {
        log::warn!("{clamped} target probabilities clamped at {PROB_FLOOR}");
    }
    Ok(NgramLoss { value, clamped })
}

/// Greedy argmax decoding. `step` returns the next-token distribution for a
/// prefix that starts with `BOS`; ties go to the lowest id and decoding
/// stops at `EOS` (not emitted) or after `max_len` tokens.
pub fn greedy_decode<F>(max_len: usize, mut step: F) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let probs = step(&prefix)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        prefix.push(best);
    }
    Ok(out)
}

/// Parameters registered as leaves of one tape.
pub struct Binding(BTreeMap<String, Var>);

impl Binding {
    pub fn new(tape: &mut Tape, params: &Params) -> Self {
        Binding(
            params
                .iter()
                .map(|(name, m)| (name.clone(), tape.leaf(m.clone())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn gradients(&self, grads: &Gradients, params: &Params) -> BTreeMap<String, Matrix> {
        self.0
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let m = &params.0[name];
                    Matrix::zeros(m.rows(), m.cols())
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Tape handles for one encoder layer's attention, for inspection.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// 1-based.
    pub layer: usize,
    /// Localness-branch weights per head (plain attention outside
    /// localness layers).
    pub local_weights: Vec<Var>,
    /// Masked-branch weights per head; empty outside mask layers.
    pub mask_weights: Vec<Var>,
    /// `(bias, windows, centers)` per head in localness layers.
    pub gaussian: Vec<(Var, Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub output: Var,
    pub layers: Vec<LayerTrace>,
}

fn layer_norm(tape: &mut Tape, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let n = tape.normalize_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, b.get(&format!("{name}.g"))?)?;
    tape.add_row(scaled, b.get(&format!("{name}.b"))?)
}

fn feed_forward(tape: &mut Tape, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.get(&format!("{prefix}.ffn.w1"))?)?;
    let h = tape.add_row(h, b.get(&format!("{prefix}.ffn.b1"))?)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, b.get(&format!("{prefix}.ffn.w2"))?)?;
    tape.add_row(o, b.get(&format!("{prefix}.ffn.b2"))?)
}

struct HeadSlices {
    q: Vec<Var>,
    k: Vec<Var>,
    v: Vec<Var>,
}

fn project_heads(
    tape: &mut Tape,
    b: &Binding,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
) -> Result<HeadSlices> {
    let q = tape.matmul(x_q, b.get(&format!("{prefix}.w_q"))?)?;
    let k = tape.matmul(x_kv, b.get(&format!("{prefix}.w_k"))?)?;
    let v = tape.matmul(x_kv, b.get(&format!("{prefix}.w_v"))?)?;
    let dh = tape.value(q).cols() / heads;
    let mut out = HeadSlices {
        q: Vec::with_capacity(heads),
        k: Vec::with_capacity(heads),
        v: Vec::with_capacity(heads),
    };
    for h in 0..heads {
        out.q.push(tape.slice_cols(q, h * dh, dh)?);
        out.k.push(tape.slice_cols(k, h * dh, dh)?);
        out.v.push(tape.slice_cols(v, h * dh, dh)?);
    }
    Ok(out)
}

/// Attends every head with its own optional bias, concatenates and applies
/// the output projection. Returns `(output, weights per head)`.
fn attend_heads(
    tape: &mut Tape,
    b: &Binding,
    prefix: &str,
    slices: &HeadSlices,
    biases: &[TapeBias],
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(slices.q.len());
    let mut weights = Vec::with_capacity(slices.q.len());
    for h in 0..slices.q.len() {
        let (o, w) = attend_on_tape(tape, slices.q[h], slices.k[h], slices.v[h], biases[h])?;
        outs.push(o);
        weights.push(w);
    }
    let cat = tape.concat_cols(&outs)?;
    let out = tape.matmul(cat, b.get(&format!("{prefix}.w_o"))?)?;
    Ok((out, weights))
}

fn position_rows(len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Strict upper triangle blinded.
pub fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, NEG_INF);
        }
    }
    m
}

/// Records the encoder forward pass on `tape`.
pub fn encode_on_tape(
    tape: &mut Tape,
    b: &Binding,
    config: &ModelConfig,
    input: &EncoderInput,
) -> Result<EncoderTrace> {
    let enc = &config.encoder;
    let len = input.tokens.len();
    if len == 0 || len > config.max_len {
        return Err(Error::Config(format!(
            "input length {len} outside 1..={}",
            config.max_len
        )));
    }
    if let Some(&bad) = input.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary")));
    }
    if input.span.start > input.span.end || input.span.end >= len {
        return Err(Error::Config(format!("answer span {:?} outside input", input.span)));
    }
    let mask_bias = if enc.synmask_layers.is_empty() {
        None
    } else {
        let mask = input
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("syntactic-mask layers configured but no mask given".into()))?;
        if mask.size() != len {
            return Err(Error::Config(format!(
                "mask covers {} tokens, input has {len}",
                mask.size()
            )));
        }
        let bias = mask_to_bias(mask);
        Some(tape.leaf(bias.matrix().expect("mask bias").clone()))
    };

    let tok = tape.gather_rows(b.get("tok_emb")?, &input.tokens)?;
    let pos = tape.gather_rows(b.get("enc_pos")?, &position_rows(len))?;
    let mut x = tape.add(tok, pos)?;
    let heads = enc.num_heads;
    let mut layers = Vec::with_capacity(enc.num_layers);

    for l in 1..=enc.num_layers {
        let prefix = format!("enc{l}");
        let attn = format!("{prefix}.attn");
        let slices = project_heads(tape, b, &attn, x, x, heads)?;

        let mut gaussian = Vec::new();
        let mut local_bias = vec![TapeBias::None; heads];
        if enc.has_localness(l) {
            let vars = LocalnessVars {
                w_p: b.get(&format!("{prefix}.local.w_p"))?,
                u_d: b.get(&format!("{prefix}.local.u_d"))?,
                u_p: match config.center_strategy {
                    CenterStrategy::AnswerCenter => None,
                    CenterStrategy::PredictedCenter => Some(b.get(&format!("{prefix}.local.u_p"))?),
                },
            };
            for (h, slot) in local_bias.iter_mut().enumerate() {
                let g = head_localness_on_tape(tape, slices.q[h], vars, input.span)?;
                *slot = TapeBias::Gaussian(g.0);
                gaussian.push(g);
            }
        }
        let (local, local_weights) = attend_heads(tape, b, &attn, &slices, &local_bias)?;

        let mut mask_weights = Vec::new();
        let combined = match mask_bias {
            Some(mb) if enc.has_synmask(l) => {
                let (hk, w) = attend_heads(tape, b, &attn, &slices, &vec![TapeBias::Mask(mb); heads])?;
                mask_weights = w;
                tape.add(local, hk)?
            }
            _ => local,
        };

        let res = tape.add(x, combined)?;
        let a = layer_norm(tape, b, &format!("{prefix}.ln1"), res)?;
        let f = feed_forward(tape, b, &prefix, a)?;
        let res = tape.add(a, f)?;
        x = layer_norm(tape, b, &format!("{prefix}.ln2"), res)?;

        layers.push(LayerTrace {
            layer: l,
            local_weights,
            mask_weights,
            gaussian,
        });
    }
    Ok(EncoderTrace { output: x, layers })
}

/// Records the decoder trunk over `prefix` (starting with `BOS`); returns
/// the `T x model_dim` hidden states.
pub fn decode_on_tape(
    tape: &mut Tape,
    b: &Binding,
    config: &ModelConfig,
    memory: Var,
    prefix: &[usize],
) -> Result<Var> {
    let len = prefix.len();
    if len == 0 || len > config.max_len {
        return Err(Error::Config(format!(
            "decoder length {len} outside 1..={}",
            config.max_len
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary")));
    }
    let heads = config.encoder.num_heads;
    let causal = tape.leaf(causal_mask(len));
    let tok = tape.gather_rows(b.get("tok_emb")?, prefix)?;
    let pos = tape.gather_rows(b.get("dec_pos")?, &position_rows(len))?;
    let mut x = tape.add(tok, pos)?;
    for l in 1..=config.decoder_layers {
        let p = format!("dec{l}");
        let own = format!("{p}.self");
        let slices = project_heads(tape, b, &own, x, x, heads)?;
        let (sa, _) = attend_heads(tape, b, &own, &slices, &vec![TapeBias::Mask(causal); heads])?;
        let res = tape.add(x, sa)?;
        let a = layer_norm(tape, b, &format!("{p}.ln1"), res)?;

        let cross = format!("{p}.cross");
        let slices = project_heads(tape, b, &cross, a, memory, heads)?;
        let (ca, _) = attend_heads(tape, b, &cross, &slices, &vec![TapeBias::None; heads])?;
        let res = tape.add(a, ca)?;
        let c = layer_norm(tape, b, &format!("{p}.ln2"), res)?;

        let f = feed_forward(tape, b, &p, c)?;
        let res = tape.add(c, f)?;
        x = layer_norm(tape, b, &format!("{p}.ln3"), res)?;
    }
    Ok(x)
}

/// Distributions of output head `j` over the vocabulary, one row per step.
pub fn head_probs_on_tape(tape: &mut Tape, b: &Binding, hidden: Var, j: usize) -> Result<Var> {
    let logits = tape.matmul(hidden, b.get(&format!("head{j}.w"))?)?;
    let logits = tape.add_row(logits, b.get(&format!("head{j}.b"))?)?;
    tape.softmax_rows(logits)
}

/// Teacher-forced decoder input `[BOS, y_1, ..., y_{T-1}]`.
pub fn shifted_targets(targets: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(targets.iter().copied().take(targets.len().saturating_sub(1)))
        .collect()
}

/// Records the full n-gram loss; returns the scalar loss node.
pub fn loss_on_tape(
    tape: &mut Tape,
    b: &Binding,
    config: &ModelConfig,
    batch: &SequenceBatch,
) -> Result<Var> {
    let ngram = &config.ngram;
    let t_len = batch.targets.len();
    if t_len < ngram.n {
        return Err(Error::Config(format!("target length {t_len} shorter than n = {}", ngram.n)));
    }
    if let Some(&bad) = batch.targets.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Config(format!("target id {bad} outside vocabulary")));
    }
    let enc = encode_on_tape(tape, b, config, &batch.input)?;
    let hidden = decode_on_tape(tape, b, config, enc.output, &shifted_targets(&batch.targets))?;
    let mut total: Option<Var> = None;
    for (j, &alpha) in ngram.alphas.iter().enumerate() {
        if alpha == 0.0 {
            continue;
        }
        let probs = head_probs_on_tape(tape, b, hidden, j)?;
        let picks = (1..=t_len - j)
            .map(|t| (t - 1, batch.targets[t + j - 1], alpha))
            .collect();
        let nll = tape.weighted_nll(probs, picks, PROB_FLOOR)?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    Ok(total.expect("validated alphas have a positive entry"))
}

/// Attention inspection for one encoder layer and head.
#[derive(Debug, Clone)]
pub struct HeadProbe {
    pub local_weights: Matrix,
    pub mask_weights: Option<Matrix>,
    pub gaussian: Option<Matrix>,
    pub windows: Option<Vec<f64>>,
    pub centers: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub layer: usize,
    pub heads: Vec<HeadProbe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::init(&config, 0);
        for (name, m) in expected.iter() {
            let got = params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_err()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params })
    }

    /// Final encoder representation, `I x model_dim`.
    pub fn encode(&self, input: &EncoderInput) -> Result<Matrix> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let trace = encode_on_tape(&mut tape, &b, &self.config, input)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Per-head distributions under teacher forcing, in the layout
    /// [`ngram_loss`] expects.
    pub fn head_distributions(&self, batch: &SequenceBatch) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let enc = encode_on_tape(&mut tape, &b, &self.config, &batch.input)?;
        let hidden = decode_on_tape(&mut tape, &b, &self.config, enc.output, &shifted_targets(&batch.targets))?;
        (0..self.config.ngram.n)
            .map(|j| {
                let probs = head_probs_on_tape(&mut tape, &b, hidden, j)?;
                Ok(tape.value(probs).clone())
            })
            .collect()
    }

    pub fn loss(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let loss = loss_on_tape(&mut tape, &b, &self.config, batch)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss and gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &SequenceBatch) -> Result<(f64, BTreeMap<String, Matrix>)> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let loss = loss_on_tape(&mut tape, &b, &self.config, batch)?;
        let value = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss)?;
        Ok((value, b.gradients(&grads, &self.params)))
    }

    /// One SGD step on the mean loss of `batches`; gradients accumulate in
    /// slice order. Returns the mean loss before the update.
    pub fn train_step(&mut self, batches: &[SequenceBatch], learning_rate: f64, batch_id: usize) -> Result<f64> {
        if batches.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let scale = 1.0 / batches.len() as f64;
        let mut total = 0.0;
        let mut acc: BTreeMap<String, Matrix> = BTreeMap::new();
        for batch in batches {
            let (loss, grads) = self.loss_and_grads(batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { batch: batch_id });
            }
            total += loss;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Divergence { batch: batch_id });
        }
        for (name, g) in &acc {
            let p = self.params.get_mut(name)?;
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= learning_rate * scale * d;
            }
        }
        Ok(mean)
    }

    /// Head-0 distribution for the token after `prefix`.
    pub fn next_token_distribution(&self, memory: &Matrix, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let mem = tape.leaf(memory.clone());
        let hidden = decode_on_tape(&mut tape, &b, &self.config, mem, prefix)?;
        let probs = head_probs_on_tape(&mut tape, &b, hidden, 0)?;
        let p = tape.value(probs);
        Ok(p.row(p.rows() - 1).to_vec())
    }

    /// Greedy decoding with the next-token head only.
    pub fn generate(&self, input: &EncoderInput, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        let memory = self.encode(input)?;
        let limit = max_len.min(self.config.max_len - 1);
        greedy_decode(limit, |prefix| self.next_token_distribution(&memory, prefix))
    }

    /// Per-layer, per-head attention weights and Gaussian terms.
    pub fn probe(&self, input: &EncoderInput) -> Result<Vec<LayerProbe>> {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &self.params);
        let trace = encode_on_tape(&mut tape, &b, &self.config, input)?;
        let column = |tape: &Tape, v: Var| tape.value(v).data().to_vec();
        Ok(trace
            .layers
            .iter()
            .map(|lt| LayerProbe {
                layer: lt.layer,
                heads: (0..lt.local_weights.len())
                    .map(|h| HeadProbe {
                        local_weights: tape.value(lt.local_weights[h]).clone(),
                        mask_weights: lt.mask_weights.get(h).map(|&w| tape.value(w).clone()),
                        gaussian: lt.gaussian.get(h).map(|g| tape.value(g.0).clone()),
                        windows: lt.gaussian.get(h).map(|g| column(&tape, g.1)),
                        centers: lt.gaussian.get(h).map(|g| column(&tape, g.2)),
                    })
                    .collect(),
            })
            .collect())
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.get(name).is_ok()
    }
}

/// Mean over rows of the attention mass inside `[c_i - D_i, c_i + D_i]`.
pub fn window_mass(weights: &Matrix, centers: &[f64], windows: &[f64]) -> f64 {
    let n = weights.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (c, d) = (centers[i], windows[i]);
        total += weights
            .row(i)
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as f64 - c).abs() <= d)
            .map(|(_, w)| w)
            .sum::<f64>();
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1,
                num_heads: 2,
                model_dim: 4,
                ffn_dim: 6,
                localness_layers: vec![1],
                synmask_layers: vec![1],
            },
            decoder_layers: 1,
            vocab_size: 8,
            max_len: 8,
            center_strategy: CenterStrategy::AnswerCenter,
            ngram: NGramLossConfig::default(),
        }
    }

    fn tiny_batch() -> SequenceBatch {
        SequenceBatch {
            input: EncoderInput {
                tokens: vec![4, 2, 5, 4, 6],
                span: AnswerSpan { start: 3, end: 3 },
                mask: Some(VisibilityMask::from_pairs(5, &[(3, 4)]).unwrap()),
            },
            targets: vec![6, 5, EOS],
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.encoder.localness_layers = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.encoder.num_heads = 3;
        assert!(c.validate().is_err());
        assert!(NGramLossConfig::new(2, vec![1.0]).is_err());
        assert!(NGramLossConfig::new(2, vec![0.0, 0.0]).is_err());
        assert!(NGramLossConfig::new(2, vec![1.0, -0.5]).is_err());
        assert!(EncoderConfig::full_scale().validate().is_ok());
        assert_eq!(EncoderConfig::full_scale().localness_layers, vec![1, 2, 3, 4]);
    }

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = Params::init(&tiny_config(), 7);
        let b = Params::init(&tiny_config(), 7);
        assert_eq!(a, b);
        let mut c2 = tiny_config();
        c2.ngram = NGramLossConfig::new(2, vec![1.0, 0.5]).unwrap();
        let c = Params::init(&c2, 7);
        for (name, m) in a.iter() {
            assert_eq!(c.get(name).unwrap(), m, "{name}");
        }
        assert!(c.get("head1.w").is_ok());
        assert_eq!(a.get("enc1.local.u_d").unwrap(), &Matrix::zeros(2, 1));
    }

    #[test]
    fn ngram_loss_examples() {
        let uniform = Matrix::filled(2, 4, 0.25);
        let l = ngram_loss(&[uniform], &[1, 3], &NGramLossConfig::default()).unwrap();
        assert!((l.value - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 2.772_588_722_239_781).abs() < 1e-12);

        let zero = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let l = ngram_loss(&[zero], &[1], &NGramLossConfig::default()).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + PROB_FLOOR.ln()).abs() < 1e-9);

        assert!(ngram_loss(&[Matrix::filled(1, 2, 0.5)], &[], &NGramLossConfig::default()).is_err());
    }

    #[test]
    fn greedy_follows_forced_path() {
        let out = greedy_decode(10, |prefix| {
            let mut p = vec![0.0; 10];
            p[if prefix.len() == 1 { 7 } else { EOS }] = 1.0;
            Ok(p)
        })
        .unwrap();
        assert_eq!(out, vec![7]);
        // ties go to the lowest id; max_len bounds the output
        let out = greedy_decode(3, |_| Ok(vec![0.0, 0.0, 0.0, 0.5, 0.5])).unwrap();
        assert_eq!(out, vec![3, 3, 3]);
        assert!(greedy_decode(0, |_| unreachable!()).unwrap().is_empty());
    }

    #[test]
    fn missing_mask_is_configuration_error() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let mut batch = tiny_batch();
        batch.input.mask = None;
        assert!(matches!(model.encode(&batch.input), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut model = Model::new(tiny_config(), 1).unwrap();
        let before = model.params.clone();
        let loss = model.train_step(&[tiny_batch()], 0.0, 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(model.params, before);
        let after = model.train_step(&[tiny_batch()], 0.05, 1).unwrap();
        assert_eq!(after, loss);
        assert!(model.loss(&tiny_batch()).unwrap() < loss);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let input = tiny_batch().input;
        let a = model.generate(&input, 5).unwrap();
        let b = model.generate(&input, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
        assert!(model.generate(&input, 0).unwrap().is_empty());
    }

    #[test]
    fn probe_exposes_gaussian_and_mask() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let probe = model.probe(&tiny_batch().input).unwrap();
        assert_eq!(probe.len(), 1);
        let head = &probe[0].heads[0];
        // neutral windows: D = I / 2
        assert_eq!(head.windows.as_ref().unwrap(), &vec![2.5; 5]);
        let mw = head.mask_weights.as_ref().unwrap();
        assert_eq!(mw.get(0, 1), 0.0);
        assert_eq!(mw.get(0, 0), 1.0);
        let g = head.gaussian.as_ref().unwrap();
        assert_eq!(g.get(2, 3), 0.0);
    }

    #[test]
    fn window_mass_counts_inside_window() {
        let w = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]);
        assert!((window_mass(&w, &[1.0], &[1.0]) - 0.6).abs() < 1e-15);
        assert!((window_mass(&w, &[1.5], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let model = Model::new(tiny_config(), 0).unwrap();
        assert!(Model::from_parts(tiny_config(), model.params.clone()).is_ok());
        let mut bad = model.params.clone();
        bad.insert("tok_emb", Matrix::zeros(1, 1));
        assert!(Model::from_parts(tiny_config(), bad).is_err());
        let mut extra = model.params;
        extra.insert("surplus", Matrix::zeros(1, 1));
        assert!(Model::from_parts(tiny_config(), extra).is_err());
    }
}
