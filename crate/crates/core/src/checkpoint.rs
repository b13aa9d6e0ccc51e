//! JSON checkpoints: configuration, vocabulary, tokenizer and every
//! parameter as shape plus row-major values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::numkit::Matrix;
use crate::text::{SubwordTokenizer, Vocab};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tokenizer: SubwordTokenizer,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocab, tokenizer: SubwordTokenizer) -> Self {
        let params = model
            .params
            .iter()
            .map(|(name, m)| {
                (
                    name.clone(),
                    ParamEntry {
                        shape: [m.rows(), m.cols()],
                        data: m.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            vocab: vocab.clone(),
            tokenizer,
            params,
        }
    }

    /// Rebuilds the model, checking version, shapes and vocabulary size.
    pub fn into_model(self) -> Result<(Model, Vocab, SubwordTokenizer)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let mut params = Params::default();
        for (name, entry) in self.params {
            let [rows, cols] = entry.shape;
            let m = Matrix::new(rows, cols, entry.data)
                .map_err(|_| Error::Checkpoint(format!("parameter {name} does not match its shape")))?;
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
            }
            params.insert(name, m);
        }
        let model = Model::from_parts(self.config, params)?;
        Ok((model, self.vocab, self.tokenizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        serde_json::from_reader(r).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
