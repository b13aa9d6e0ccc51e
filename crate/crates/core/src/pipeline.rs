//! Per-record preprocessing: key sentence, filtered triples and the mask
//! artifact, plus the inverse step that turns a record and its artifact
//! back into model input.

use crate::conllu::ParsedSentence;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::keysent::{locate_key_sentence, SentenceSplit};
use crate::localness::AnswerSpan;
use crate::synmask::{build_mask, filter_triples, KeySelection, MaskArtifact, RelationStrategy, VisibilityMask};
use crate::model::EncoderInput;
use crate::text::{align_forms, layout_input, SubwordTokenizer, TokenizedExample, Vocab, EOS};

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub artifact: MaskArtifact,
    pub example: TokenizedExample,
    pub selection: KeySelection,
    pub triples_total: usize,
    pub triples_kept: usize,
}

/// Picks the parse of the key sentence: a single parsed sentence is taken to
/// be the key sentence; otherwise there must be one parse per sentence.
fn key_parse(parses: &[ParsedSentence], key_index: usize, sentence_count: usize) -> Result<&ParsedSentence> {
    match parses.len() {
        1 => Ok(&parses[0]),
        n if n == sentence_count => Ok(&parses[key_index]),
        n => Err(Error::Alignment(format!(
            "{n} parsed sentences for a passage of {sentence_count} sentences"
        ))),
    }
}

pub fn preprocess_record(
    record: &DatasetRecord,
    parses: &[ParsedSentence],
    strategy: RelationStrategy,
    tokenizer: &SubwordTokenizer,
) -> Result<Preprocessed> {
    record.validate()?;
    let split = SentenceSplit::split(&record.passage);
    let key = locate_key_sentence(&split, &record.answer, record.answer_offset())?;
    let parse = key_parse(parses, key.index, split.len())?;
    let sentence = &split.sentences[key.index];

    let (tokens, segmented, offset, span) =
        layout_input(tokenizer, &record.passage, &record.answer, record.answer_offset())?;
    let forms = parse.forms();
    let key_alignment = align_forms(
        &record.passage,
        &segmented,
        sentence.start..sentence.end,
        &forms,
        offset,
    )?;
    let overlapping: Vec<usize> = segmented
        .piece_chars
        .iter()
        .enumerate()
        .filter(|(_, r)| r.start < sentence.end && sentence.start < r.end)
        .map(|(i, _)| i + offset)
        .collect();
    let key_tokens = match (overlapping.first(), overlapping.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => offset..offset,
    };

    let all = parse.triples();
    let kept = filter_triples(&all, strategy);
    let mask = build_mask(&kept, forms.len(), &key_alignment, tokens.len())?;

    let triples_kept = kept.len();
    let mut artifact = MaskArtifact::new(record.id.clone(), &mask, kept, strategy);
    artifact.answer_span = Some([span.0, span.1]);
    artifact.key_sentence = Some(key.index);
    artifact.selection = Some(key.selection);

    Ok(Preprocessed {
        artifact,
        example: TokenizedExample {
            tokens,
            passage_offset: offset,
            answer_span: span,
            key_tokens,
            key_alignment,
        },
        selection: key.selection,
        triples_total: all.len(),
        triples_kept,
    })
}

/// Model-ready view of a record: pieces, answer span and visibility mask.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub tokens: Vec<String>,
    pub span: AnswerSpan,
    pub mask: VisibilityMask,
}

impl PreparedInput {
    /// Token ids; pieces outside the vocabulary map to `[UNK]`.
    pub fn encoder_input(&self, vocab: &Vocab) -> EncoderInput {
        EncoderInput {
            tokens: vocab.encode(&self.tokens),
            span: self.span,
            mask: Some(self.mask.clone()),
        }
    }
}

/// Target ids for a question: its pieces followed by `[EOS]`.
pub fn target_ids(question: &str, tokenizer: &SubwordTokenizer, vocab: &Vocab) -> Vec<usize> {
    let mut ids = vocab.encode(&tokenizer.segment(question).pieces);
    ids.push(EOS);
    ids
}

/// Re-tokenizes `record` and checks it against its artifact.
pub fn prepare_input(
    record: &DatasetRecord,
    artifact: &MaskArtifact,
    tokenizer: &SubwordTokenizer,
) -> Result<PreparedInput> {
    let (tokens, _, offset, span) =
        layout_input(tokenizer, &record.passage, &record.answer, record.answer_offset())?;
    if artifact.size != tokens.len() {
        return Err(Error::Alignment(format!(
            "artifact for {} has I = {} but the record tokenizes to {}",
            record.id,
            artifact.size,
            tokens.len()
        )));
    }
    let (s, e) = artifact.answer_span.map_or(span, |[s, e]| (s, e));
    Ok(PreparedInput {
        span: AnswerSpan::new(s, e, tokens.len(), offset)?,
        mask: artifact.mask()?,
        tokens,
    })
}
