//! Synthetic tasks and the training loop used to exercise the model end to
//! end.
//!
//! Toy examples go through the same preprocessing path as real data: each
//! one is a [`DatasetRecord`] plus a CoNLL-U parse, so fixtures written to
//! disk can be fed back through `preprocess` and `generate`.
//!
//! * Neighborhood task: a passage of 10–14 distinct symbols with an answer
//!   span of one or two symbols that has at least two symbols on each side;
//!   the target is the two symbols before the span followed by the two
//!   after it. The parse links the span to exactly those neighbors with
//!   core-argument relations and attaches everything else with `dep`.
//! * Copy task: a passage of 4–6 symbols whose target is the passage.

use std::fmt::Write as _;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conllu::{read_conllu, ParsedSentence};
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::localness::answer_center;
use crate::model::{EncoderInput, Model, SequenceBatch};
use crate::numkit::Matrix;
use crate::pipeline::{prepare_input, preprocess_record, target_ids};
use crate::synmask::RelationStrategy;
use crate::text::{SubwordTokenizer, Vocab};

pub const TOY_SYMBOLS: usize = 24;

/// Longest toy sequence (encoder input or target) plus headroom.
pub const TOY_MAX_LEN: usize = 24;

pub fn symbol(i: usize) -> String {
    format!("s{i:02}")
}

/// Special tokens followed by `s00..s23`.
pub fn toy_vocab() -> Vocab {
    Vocab::from((0..TOY_SYMBOLS).map(symbol).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    #[default]
    Neighborhood,
    Copy,
}

impl std::str::FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighborhood" => Ok(Self::Neighborhood),
            "copy" => Ok(Self::Copy),
            other => Err(Error::Config(format!("unknown toy task {other:?}"))),
        }
    }
}

/// A generated record with its parse in CoNLL-U form.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFixture {
    pub record: DatasetRecord,
    pub conllu: String,
}

/// CoNLL-U block for a one-sentence passage: `links` are `(head, dep, rel)`
/// word indices, every other word hangs off `root` with `dep`.
fn conllu_block(id: &str, words: &[String], root: usize, links: &[(usize, usize, &str)]) -> String {
    let mut out = format!("# id = {id}\n");
    for (w, form) in words.iter().enumerate() {
        let (head, rel) = if w == root {
            (0, "root")
        } else if let Some(&(h, _, r)) = links.iter().find(|l| l.1 == w) {
            (h + 1, r)
        } else {
            (root + 1, "dep")
        };
        writeln!(out, "{}\t{form}\t_\t_\t_\t_\t{head}\t{rel}\t_\t_", w + 1).expect("string write");
    }
    out.push('\n');
    out
}

fn make_fixture(task: ToyTask, index: usize, rng: &mut impl Rng) -> ToyFixture {
    let id = format!("toy-{index:04}");
    let (len, span_len) = match task {
        ToyTask::Neighborhood => (rng.gen_range(10..=14), rng.gen_range(1..=2)),
        ToyTask::Copy => (rng.gen_range(4..=6), 1),
    };
    let mut symbols: Vec<usize> = (0..TOY_SYMBOLS).choose_multiple(rng, len);
    symbols.shuffle(rng);
    let words: Vec<String> = symbols.iter().map(|&s| symbol(s)).collect();

    let (start, end, links, target) = match task {
        ToyTask::Neighborhood => {
            let start = rng.gen_range(2..=len - span_len - 2);
            let end = start + span_len - 1;
            let links = vec![
                (start, start - 2, "nsubj"),
                (start, start - 1, "nsubj"),
                (end, end + 1, "obj"),
                (end, end + 2, "obj"),
            ];
            let target = [start - 2, start - 1, end + 1, end + 2].map(|w| words[w].clone()).to_vec();
            (start, end, links, target)
        }
        ToyTask::Copy => (0, 0, Vec::new(), words.clone()),
    };

    let passage = words.join(" ");
    let answer = words[start..=end].join(" ");
    // every symbol is three chars plus a separating space
    let answer_start = (start * 4) as i64;
    let conllu = conllu_block(&id, &words, start, &links);
    ToyFixture {
        record: DatasetRecord {
            id,
            passage,
            answer,
            answer_start,
            question: Some(target.join(" ")),
        },
        conllu,
    }
}

/// `count` fixtures drawn from `rng` in order.
pub fn generate_fixtures(task: ToyTask, count: usize, rng: &mut impl Rng) -> Vec<ToyFixture> {
    (0..count).map(|i| make_fixture(task, i, rng)).collect()
}

/// Concatenated CoNLL-U of all fixtures.
pub fn fixtures_conllu(fixtures: &[ToyFixture]) -> String {
    fixtures.iter().map(|f| f.conllu.as_str()).collect()
}

/// Runs a record through preprocessing and encodes it for the model. The
/// record's question becomes the target.
pub fn build_batch(
    record: &DatasetRecord,
    parses: &[ParsedSentence],
    strategy: RelationStrategy,
    tokenizer: &SubwordTokenizer,
    vocab: &Vocab,
) -> Result<SequenceBatch> {
    let pre = preprocess_record(record, parses, strategy, tokenizer)?;
    let prepared = prepare_input(record, &pre.artifact, tokenizer)?;
    let question = record
        .question
        .as_deref()
        .ok_or_else(|| Error::Config(format!("record {} has no target question", record.id)))?;
    Ok(SequenceBatch {
        input: prepared.encoder_input(vocab),
        targets: target_ids(question, tokenizer, vocab),
    })
}

/// Training batches for `fixtures`.
pub fn fixture_batches(
    fixtures: &[ToyFixture],
    strategy: RelationStrategy,
    tokenizer: &SubwordTokenizer,
    vocab: &Vocab,
) -> Result<Vec<SequenceBatch>> {
    fixtures
        .iter()
        .map(|f| {
            let parses = read_conllu(f.conllu.as_bytes())?;
            build_batch(&f.record, &parses, strategy, tokenizer, vocab)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, before each update.
    pub loss: f64,
    pub window_mass: f64,
    pub token_acc: f64,
}

/// Mean localness-branch attention mass inside `[c_i - D_i, c_i + D_i]`.
///
/// Centers and windows come from `reference` (default: `model` itself) in
/// its localness layers, per head; the weights come from `model`'s
/// localness branch at the same layers and heads. Without localness layers
/// the statistic falls back to layer 1 with the answer center and the
/// untrained window `I / 2`.
pub fn localness_window_mass(model: &Model, input: &EncoderInput, reference: Option<&Model>) -> Result<f64> {
    let own = model.probe(input)?;
    let source = match reference {
        Some(r) => r.probe(input)?,
        None => own.clone(),
    };
    let len = input.tokens.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in &source {
        for (h, head) in layer.heads.iter().enumerate() {
            let (Some(centers), Some(windows)) = (&head.centers, &head.windows) else {
                continue;
            };
            let weights = &own
                .get(layer.layer - 1)
                .and_then(|l| l.heads.get(h))
                .ok_or_else(|| Error::Config("reference model is deeper or wider than the probed one".into()))?
                .local_weights;
            total += crate::model::window_mass(weights, centers, windows);
            count += 1;
        }
    }
    if count == 0 {
        let centers = vec![answer_center(input.span); len];
        let windows = vec![len as f64 / 2.0; len];
        for head in &own[0].heads {
            total += crate::model::window_mass(&head.local_weights, &centers, &windows);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of target tokens that are the argmax of head 0 under teacher
/// forcing.
pub fn teacher_forced_accuracy(model: &Model, batches: &[SequenceBatch]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in batches {
        let dists = model.head_distributions(b)?;
        hits += argmax_hits(&dists[0], &b.targets);
        total += b.targets.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

fn argmax_hits(dist: &Matrix, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(t, &y)| {
            let row = dist.row(t);
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count()
}

/// Position-wise agreement between greedy output (with its end token) and
/// the targets, over the target length.
pub fn generation_accuracy(model: &Model, batches: &[SequenceBatch]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in batches {
        let mut out = model.generate(&b.input, b.targets.len())?;
        out.push(crate::text::EOS);
        hits += b.targets.iter().zip(&out).filter(|(a, b)| a == b).count();
        total += b.targets.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Mini-batch SGD over a fixed example set with per-epoch reshuffling.
pub struct ToyTrainer {
    model: Model,
    batches: Vec<SequenceBatch>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    steps: usize,
}

impl ToyTrainer {
    pub fn new(model: Model, batches: Vec<SequenceBatch>, config: TrainConfig) -> Result<Self> {
        if batches.is_empty() || config.batch_size == 0 {
            return Err(Error::Config("training needs examples and a positive batch size".into()));
        }
        if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            batches,
            config,
            rng,
            steps: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn batches(&self) -> &[SequenceBatch] {
        &self.batches
    }

    /// Swaps in a new example set, e.g. freshly drawn data for the next
    /// epoch.
    pub fn set_batches(&mut self, batches: Vec<SequenceBatch>) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::Config("training needs examples".into()));
        }
        self.batches = batches;
        Ok(())
    }

    /// Trains one epoch. On divergence the parameters are rolled back to
    /// the last step that produced a finite loss and the error is returned.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<SequenceBatch> = chunk.iter().map(|&i| self.batches[i].clone()).collect();
            let snapshot = self.model.params.clone();
            match self.model.train_step(&batch, self.config.learning_rate, self.steps) {
                Ok(_) if !self.model.params.is_finite() => {
                    self.model.params = snapshot;
                    return Err(Error::Divergence { batch: self.steps });
                }
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(e) => {
                    self.model.params = snapshot;
                    return Err(e);
                }
            }
            self.steps += 1;
        }
        Ok(total / self.batches.len() as f64)
    }

    /// Trains one epoch, then measures window mass and accuracy on `eval`.
    pub fn run_epoch(&mut self, epoch: usize, eval: &[SequenceBatch], reference: Option<&Model>) -> Result<EpochMetrics> {
        let loss = self.train_epoch()?;
        let (window_mass, token_acc) = evaluate(&self.model, eval, reference)?;
        Ok(EpochMetrics {
            epoch,
            loss,
            window_mass,
            token_acc,
        })
    }
}

/// Mean window mass and teacher-forced accuracy over `batches`.
pub fn evaluate(model: &Model, batches: &[SequenceBatch], reference: Option<&Model>) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Err(Error::Config("evaluation needs examples".into()));
    }
    let mut mass = 0.0;
    for b in batches {
        mass += localness_window_mass(model, &b.input, reference)?;
    }
    Ok((mass / batches.len() as f64, teacher_forced_accuracy(model, batches)?))
}

/// Mean loss over `batches`.
pub fn mean_loss(model: &Model, batches: &[SequenceBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Config("evaluation needs examples".into()));
    }
    let total = batches.iter().map(|b| model.loss(b)).sum::<Result<f64>>()?;
    Ok(total / batches.len() as f64)
}

/// Seeded stream of toy examples, drawn through the full preprocessing
/// path.
pub struct ToySource {
    task: ToyTask,
    count: usize,
    strategy: RelationStrategy,
    tokenizer: SubwordTokenizer,
    vocab: Vocab,
    rng: ChaCha8Rng,
}

impl ToySource {
    /// `stream` separates independent sources sharing a seed.
    pub fn new(task: ToyTask, count: usize, strategy: RelationStrategy, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            task,
            count,
            strategy,
            tokenizer: SubwordTokenizer::default(),
            vocab: toy_vocab(),
            rng,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenizer(&self) -> SubwordTokenizer {
        self.tokenizer
    }

    /// Next `count` fixtures and their batches.
    pub fn draw(&mut self) -> Result<(Vec<ToyFixture>, Vec<SequenceBatch>)> {
        let fixtures = generate_fixtures(self.task, self.count, &mut self.rng);
        let batches = fixture_batches(&fixtures, self.strategy, &self.tokenizer, &self.vocab)?;
        Ok((fixtures, batches))
    }
}
