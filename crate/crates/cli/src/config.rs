//! Run configuration: a flat `key = value` file, overridden by flags that
//! use the same key names.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use synloc_core::localness::CenterStrategy;
use synloc_core::model::{EncoderConfig, ModelConfig, NGramLossConfig};
use synloc_core::synmask::RelationStrategy;
use synloc_core::toy::{toy_vocab, ToyTask, TrainConfig, TOY_MAX_LEN};
use synloc_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: RelationStrategy,
    pub localness_layers: Vec<usize>,
    pub synmask_layers: Vec<usize>,
    pub center: CenterStrategy,
    pub ngram: usize,
    /// Empty means "all ones".
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub examples: usize,
    pub task: ToyTask,
    /// Draw fresh training examples every epoch instead of reusing one set.
    pub resample: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        Self {
            strategy: RelationStrategy::default(),
            localness_layers: enc.localness_layers,
            synmask_layers: enc.synmask_layers,
            center: CenterStrategy::default(),
            ngram: 1,
            alphas: Vec::new(),
            seed: train.seed,
            layers: enc.num_layers,
            heads: enc.num_heads,
            model_dim: enc.model_dim,
            ffn_dim: enc.ffn_dim,
            decoder_layers: 1,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            examples: 64,
            task: ToyTask::default(),
            resample: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Comma-separated list; empty or `none` is the empty list.
fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let v = value.trim();
    if v.is_empty() || v.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

impl RunConfig {
    /// Sets one key. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim().replace('_', "-").as_str() {
            "strategy" => self.strategy = value.parse()?,
            "localness-layers" => self.localness_layers = parse_list(key, value)?,
            "synmask-layers" => self.synmask_layers = parse_list(key, value)?,
            "center" => {
                self.center = match value {
                    "answer" => CenterStrategy::AnswerCenter,
                    "predicted" => CenterStrategy::PredictedCenter,
                    other => return Err(Error::Config(format!("center must be answer or predicted, not {other:?}"))),
                }
            }
            "ngram" => self.ngram = parse(key, value)?,
            "alphas" => self.alphas = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "model-dim" => self.model_dim = parse(key, value)?,
            "ffn-dim" => self.ffn_dim = parse(key, value)?,
            "decoder-layers" => self.decoder_layers = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch-size" => self.batch_size = parse(key, value)?,
            "lr" | "learning-rate" => self.learning_rate = parse(key, value)?,
            "examples" => self.examples = parse(key, value)?,
            "task" => self.task = value.parse()?,
            "resample" => self.resample = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected key = value, found {line:?}"),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn ngram_config(&self) -> Result<NGramLossConfig> {
        let alphas = if self.alphas.is_empty() {
            vec![1.0; self.ngram]
        } else {
            self.alphas.clone()
        };
        NGramLossConfig::new(self.ngram, alphas)
    }

    /// Model for `vocab_size` ids and sequences of up to `max_len` tokens
    /// (never less than the toy length).
    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: self.layers,
                num_heads: self.heads,
                model_dim: self.model_dim,
                ffn_dim: self.ffn_dim,
                localness_layers: self.localness_layers.clone(),
                synmask_layers: self.synmask_layers.clone(),
            },
            decoder_layers: self.decoder_layers,
            vocab_size,
            max_len: max_len.max(TOY_MAX_LEN),
            center_strategy: self.center,
            ngram: self.ngram_config()?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn toy_model_config(&self) -> Result<ModelConfig> {
        self.model_config(toy_vocab().len(), TOY_MAX_LEN)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}
