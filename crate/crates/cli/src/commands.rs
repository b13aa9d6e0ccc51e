//! The four subcommands, callable without going through the binary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use synloc_core::checkpoint::Checkpoint;
use synloc_core::conllu::{group_by_record, read_conllu};
use synloc_core::data::{read_jsonl, write_jsonl, DatasetRecord};
use synloc_core::model::Model;
use synloc_core::pipeline::{prepare_input, preprocess_record};
use synloc_core::synmask::{KeySelection, MaskArtifact, RelationStrategy};
use synloc_core::text::{detokenize, SubwordTokenizer, Vocab};
use synloc_core::toy::{self, fixtures_conllu, ToySource, ToyTrainer};
use synloc_core::{Error, Result};

use crate::config::RunConfig;

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// File-system-safe artifact name for a record id.
pub fn artifact_path(dir: &Path, id: &str) -> PathBuf {
    let name: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    dir.join(format!("{name}.json"))
}

pub fn read_artifact(dir: &Path, id: &str) -> Result<MaskArtifact> {
    let path = artifact_path(dir, id);
    if !path.exists() {
        return Err(Error::Lookup(format!("no artifact for {id} at {}", path.display())));
    }
    let artifact: MaskArtifact = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
    if artifact.example_id != id {
        return Err(Error::Lookup(format!(
            "{} holds the artifact of {}, not {id}",
            path.display(),
            artifact.example_id
        )));
    }
    Ok(artifact)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TripleCounts {
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PreprocessReport {
    pub strategy: RelationStrategy,
    pub records: usize,
    pub written: usize,
    pub containment: usize,
    pub rouge_fallback: usize,
    /// Triple counts of the written records under every strategy.
    pub triples: BTreeMap<RelationStrategy, TripleCounts>,
    pub skipped: Vec<SkippedRecord>,
}

/// Writes `<out>/<id>.json` per record and `<out>/report.json`.
pub fn cmd_preprocess(data: &Path, parses: &Path, out: &Path, config: &RunConfig) -> Result<PreprocessReport> {
    let records = read_records(data)?;
    let parses = group_by_record(read_conllu(BufReader::new(File::open(parses)?))?);
    let tokenizer = SubwordTokenizer::default();
    fs::create_dir_all(out)?;

    let mut report = PreprocessReport {
        strategy: config.strategy,
        records: records.len(),
        written: 0,
        containment: 0,
        rouge_fallback: 0,
        triples: RelationStrategy::ALL.iter().map(|&s| (s, TripleCounts::default())).collect(),
        skipped: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for record in &records {
        let mut skip = |reason: String| {
            warn!("skipping {}: {reason}", record.id);
            report.skipped.push(SkippedRecord {
                id: record.id.clone(),
                reason,
            });
        };
        if !seen.insert(artifact_path(out, &record.id)) {
            skip("duplicate id".into());
            continue;
        }
        let Some(parse) = parses.get(&record.id) else {
            skip("no parse".into());
            continue;
        };
        let pre = match preprocess_record(record, parse, config.strategy, &tokenizer) {
            Ok(p) => p,
            Err(e) if e.is_input_error() => {
                skip(e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        for s in RelationStrategy::ALL {
            let kept = if s == config.strategy {
                pre.triples_kept
            } else {
                preprocess_record(record, parse, s, &tokenizer)?.triples_kept
            };
            let c = report.triples.get_mut(&s).expect("all strategies present");
            c.kept += kept;
            c.dropped += pre.triples_total - kept;
        }
        match pre.selection {
            KeySelection::Containment => report.containment += 1,
            KeySelection::RougeFallback => report.rouge_fallback += 1,
        }
        write_json(&artifact_path(out, &record.id), &pre.artifact)?;
        report.written += 1;
    }
    write_json(&out.join("report.json"), &report)?;
    info!(
        "preprocessed {} of {} records into {}",
        report.written,
        report.records,
        out.display()
    );
    Ok(report)
}

/// Model, vocabulary and tokenizer from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocab, SubwordTokenizer)> {
    Checkpoint::load(path)?.into_model()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DumpFormat {
    #[default]
    Json,
    Csv,
}

pub struct InspectRequest<'a> {
    pub id: &'a str,
    pub data: &'a Path,
    pub artifacts: &'a Path,
    pub checkpoint: Option<&'a Path>,
    /// Query row for the weight dump; defaults to the first answer token.
    pub row: Option<usize>,
    pub format: DumpFormat,
}

/// Per-layer, per-head Gaussian bias, visibility mask and the attention
/// weights of one query row.
pub fn cmd_inspect_bias(req: &InspectRequest<'_>, config: &RunConfig) -> Result<String> {
    let record = read_records(req.data)?
        .into_iter()
        .find(|r| r.id == req.id)
        .ok_or_else(|| Error::Lookup(format!("no record with id {}", req.id)))?;
    let artifact = read_artifact(req.artifacts, req.id)?;
    let (model, vocab, tokenizer) = match req.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let tokenizer = SubwordTokenizer::default();
            let prepared = prepare_input(&record, &artifact, &tokenizer)?;
            let vocab = Vocab::from(prepared.tokens.clone());
            let model_config = config.model_config(vocab.len(), prepared.tokens.len())?;
            (Model::new(model_config, config.seed)?, vocab, tokenizer)
        }
    };
    let prepared = prepare_input(&record, &artifact, &tokenizer)?;
    let input = prepared.encoder_input(&vocab);
    let len = input.tokens.len();
    let row = req.row.unwrap_or(input.span.start);
    if row >= len {
        return Err(Error::Lookup(format!("row {row} outside the {len} input tokens")));
    }
    let probe = model.probe(&input)?;
    let mask = &prepared.mask;

    match req.format {
        DumpFormat::Json => {
            let mask_rows: Vec<Vec<u8>> = (0..len)
                .map(|i| (0..len).map(|j| u8::from(mask.is_visible(i, j))).collect())
                .collect();
            let layers: Vec<_> = probe
                .iter()
                .map(|layer| {
                    let heads: Vec<_> = layer
                        .heads
                        .iter()
                        .enumerate()
                        .map(|(h, head)| {
                            json!({
                                "head": h,
                                "gaussian": head.gaussian.as_ref().map(|g| (0..len).map(|i| g.row(i).to_vec()).collect::<Vec<_>>()),
                                "window": head.windows,
                                "center": head.centers,
                                "weights": head.local_weights.row(row),
                                "mask_weights": head.mask_weights.as_ref().map(|w| w.row(row).to_vec()),
                            })
                        })
                        .collect();
                    json!({ "layer": layer.layer, "heads": heads })
                })
                .collect();
            let dump = json!({
                "id": req.id,
                "tokens": prepared.tokens,
                "answer_span": [input.span.start, input.span.end],
                "row": row,
                "mask": mask_rows,
                "layers": layers,
            });
            Ok(serde_json::to_string_pretty(&dump)? + "\n")
        }
        DumpFormat::Csv => {
            let mut out = String::from("layer,head,kind,row,col,value\n");
            let mut push = |layer: &str, head: &str, kind: &str, i: usize, j: usize, v: f64| {
                out.push_str(&format!("{layer},{head},{kind},{i},{j},{v}\n"));
            };
            for i in 0..len {
                for j in 0..len {
                    push("", "", "mask", i, j, f64::from(u8::from(mask.is_visible(i, j))));
                }
            }
            for layer in &probe {
                let l = layer.layer.to_string();
                for (h, head) in layer.heads.iter().enumerate() {
                    let h = h.to_string();
                    if let Some(g) = &head.gaussian {
                        for i in 0..len {
                            for (j, &v) in g.row(i).iter().enumerate() {
                                push(&l, &h, "gaussian", i, j, v);
                            }
                        }
                    }
                    for (j, &v) in head.local_weights.row(row).iter().enumerate() {
                        push(&l, &h, "weights", row, j, v);
                    }
                    if let Some(w) = &head.mask_weights {
                        for (j, &v) in w.row(row).iter().enumerate() {
                            push(&l, &h, "mask_weights", row, j, v);
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_token_acc: f64,
    pub checkpoint: PathBuf,
}

/// Trains on the synthetic task and writes `metrics.jsonl`,
/// `checkpoint.json` and the fixed example set (`examples.jsonl`,
/// `parses.conllu`) into `out`.
///
/// Window mass and token accuracy are measured on the fixed set after
/// every epoch. With `resample` each epoch trains on freshly drawn
/// examples; otherwise the fixed set is also the training set. On
/// divergence the last good checkpoint is still written before the error
/// is returned.
pub fn cmd_train_toy(out: &Path, config: &RunConfig) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let mut fixed = ToySource::new(config.task, config.examples, config.strategy, config.seed, 2);
    let (fixtures, eval) = fixed.draw()?;
    let (vocab, tokenizer) = (fixed.vocab().clone(), fixed.tokenizer());
    let records: Vec<DatasetRecord> = fixtures.iter().map(|f| f.record.clone()).collect();
    write_jsonl(BufWriter::new(File::create(out.join("examples.jsonl"))?), &records)?;
    fs::write(out.join("parses.conllu"), fixtures_conllu(&fixtures))?;

    let mut fresh = ToySource::new(config.task, config.examples, config.strategy, config.seed, 3);
    let model = Model::new(config.toy_model_config()?, config.seed)?;
    let mut trainer = ToyTrainer::new(model, eval.clone(), config.train_config())?;

    let checkpoint = out.join("checkpoint.json");
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut last = None;
    for epoch in 1..=config.epochs {
        let step = if config.resample {
            fresh.draw().and_then(|(_, batches)| trainer.set_batches(batches))
        } else {
            Ok(())
        };
        match step.and_then(|()| trainer.run_epoch(epoch, &eval, None)) {
            Ok(m) => {
                serde_json::to_writer(&mut metrics, &m)?;
                metrics.write_all(b"\n")?;
                metrics.flush()?;
                info!("epoch {epoch}: loss {:.4} window mass {:.4} token acc {:.3}", m.loss, m.window_mass, m.token_acc);
                last = Some(m);
            }
            Err(e) => {
                warn!("training stopped in epoch {epoch}: {e}; saving the last good parameters");
                Checkpoint::new(trainer.model(), &vocab, tokenizer).save(&checkpoint)?;
                return Err(e);
            }
        }
    }
    Checkpoint::new(trainer.model(), &vocab, tokenizer).save(&checkpoint)?;
    let (final_loss, final_token_acc) = match last {
        Some(m) => (m.loss, m.token_acc),
        None => (
            toy::mean_loss(trainer.model(), &eval)?,
            toy::teacher_forced_accuracy(trainer.model(), &eval)?,
        ),
    };
    Ok(TrainSummary {
        epochs: config.epochs,
        final_loss,
        final_token_acc,
        checkpoint,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Greedy predictions, one `{id, prediction}` line per record that has an
/// artifact.
pub fn cmd_generate(
    data: &Path,
    artifacts: &Path,
    checkpoint: &Path,
    out: &Path,
    max_len: usize,
) -> Result<GenerateSummary> {
    let records = read_records(data)?;
    let (model, vocab, tokenizer) = load_checkpoint(checkpoint)?;
    let mut w = BufWriter::new(File::create(out)?);
    let mut summary = GenerateSummary { written: 0, skipped: 0 };
    for record in &records {
        let artifact = match read_artifact(artifacts, &record.id) {
            Ok(a) => a,
            Err(e) => {
                warn!("skipping {}: {e}", record.id);
                summary.skipped += 1;
                continue;
            }
        };
        let prepared = prepare_input(record, &artifact, &tokenizer)?;
        let ids = model.generate(&prepared.encoder_input(&vocab), max_len)?;
        let prediction = Prediction {
            id: record.id.clone(),
            prediction: detokenize(&vocab.decode(&ids)?),
        };
        serde_json::to_writer(&mut w, &prediction)?;
        w.write_all(b"\n")?;
        summary.written += 1;
    }
    w.flush()?;
    Ok(summary)
}
