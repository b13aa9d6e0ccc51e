//! Word splitting, a vocabulary-free subword segmenter and the token-id
//! vocabulary used by the model.
//!
//! Segmentation never depends on the vocabulary, so mask artifacts built
//! before training stay aligned with whatever checkpoint later reads them.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[BOS]", "[EOS]", "[SEP]", "[UNK]"];

const CONTINUATION: &str = "##";

/// A word of the source text as a half-open char range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Splits on whitespace; every punctuation char becomes its own word.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let flush = |current: &mut Option<(usize, String)>, words: &mut Vec<Word>, end: usize| {
        if let Some((start, text)) = current.take() {
            words.push(Word { start, end, text });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, &mut words, i);
        } else if c.is_alphanumeric() {
            current.get_or_insert_with(|| (i, String::new())).1.push(c);
        } else {
            flush(&mut current, &mut words, i);
            words.push(Word {
                start: i,
                end: i + 1,
                text: c.to_string(),
            });
        }
    }
    let n = text.chars().count();
    flush(&mut current, &mut words, n);
    words
}

/// Result of segmenting a text into subword pieces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmented {
    pub pieces: Vec<String>,
    /// Char range of each piece in the source text.
    pub piece_chars: Vec<Range<usize>>,
    pub words: Vec<Word>,
    /// Piece range of each word.
    pub word_pieces: Vec<Range<usize>>,
}

/// Lowercases words and cuts them into pieces of at most `max_piece_chars`
/// chars; continuation pieces carry a `##` prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordTokenizer {
    pub max_piece_chars: usize,
}

impl Default for SubwordTokenizer {
    fn default() -> Self {
        Self { max_piece_chars: 8 }
    }
}

impl SubwordTokenizer {
    pub fn segment(&self, text: &str) -> Segmented {
        let words = split_words(text);
        let mut out = Segmented {
            pieces: Vec::new(),
            piece_chars: Vec::new(),
            words: Vec::new(),
            word_pieces: Vec::new(),
        };
        let step = self.max_piece_chars.max(1);
        for w in words {
            let chars: Vec<char> = w.text.to_lowercase().chars().collect();
            // lowercasing can change the char count (e.g. 'İ'); keep offsets on the source
            let same_len = chars.len() == w.end - w.start;
            let first = out.pieces.len();
            for (k, chunk) in chars.chunks(step).enumerate() {
                let mut piece = String::new();
                if k > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(chunk);
                let range = if same_len {
                    w.start + k * step..w.start + k * step + chunk.len()
                } else {
                    w.start..w.end
                };
                out.pieces.push(piece);
                out.piece_chars.push(range);
            }
            out.word_pieces.push(first..out.pieces.len());
            out.words.push(w);
        }
        out
    }
}

/// Joins pieces back into space-separated words.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for p in pieces {
        let p = p.as_ref();
        if let Some(rest) = p.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(p);
        }
    }
    out
}

/// Bidirectional token/id map whose first entries are [`SPECIAL_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from(Vec::<String>::new())
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(tokens) {
            v.insert(&t);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, pieces: &[S]) -> Vec<usize> {
        pieces.iter().map(|p| self.id(p.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Lookup(format!("token id {id} outside vocabulary")))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Model input laid out as `answer [SEP] passage`, with the bookkeeping the
/// mask and localness construction need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub tokens: Vec<String>,
    /// Index of the first passage token.
    pub passage_offset: usize,
    /// Inclusive token span of the answer inside the passage segment.
    pub answer_span: (usize, usize),
    /// Token range of the key sentence.
    pub key_tokens: Range<usize>,
    /// Token range of each parsed key-sentence word.
    pub key_alignment: Vec<Range<usize>>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lays out `answer [SEP] passage` and locates the answer span.
///
/// The answer occurrence is the one at `answer_start` when that offset
/// really holds the answer text; otherwise the first exact occurrence of
/// the answer's pieces inside the passage.
pub fn layout_input(
    tokenizer: &SubwordTokenizer,
    passage: &str,
    answer: &str,
    answer_start: Option<usize>,
) -> Result<(Vec<String>, Segmented, usize, (usize, usize))> {
    let answer_seg = tokenizer.segment(answer);
    if answer_seg.pieces.is_empty() {
        return Err(Error::Alignment("answer has no tokens".into()));
    }
    let passage_seg = tokenizer.segment(passage);
    let offset = answer_seg.pieces.len() + 1;

    let passage_chars: Vec<char> = passage.chars().collect();
    let answer_chars: Vec<char> = answer.chars().collect();
    let by_offset = answer_start.and_then(|start| {
        let end = start + answer_chars.len();
        if passage_chars.get(start..end) != Some(&answer_chars[..]) {
            return None;
        }
        let hit: Vec<usize> = passage_seg
            .piece_chars
            .iter()
            .enumerate()
            .filter(|(_, r)| r.start < end && start < r.end)
            .map(|(i, _)| i)
            .collect();
        Some((*hit.first()?, *hit.last()?))
    });
    let span = match by_offset {
        Some(span) => span,
        None => {
            let needle = &answer_seg.pieces;
            let hay = &passage_seg.pieces;
            let first = (0..hay.len().saturating_sub(needle.len() - 1))
                .find(|&i| hay[i..i + needle.len()] == needle[..])
                .ok_or_else(|| Error::Alignment(format!("answer {answer:?} not found in passage")))?;
            (first, first + needle.len() - 1)
        }
    };

    let mut tokens = answer_seg.pieces.clone();
    tokens.push(SPECIAL_TOKENS[SEP].to_string());
    tokens.extend(passage_seg.pieces.iter().cloned());
    Ok((tokens, passage_seg, offset, (span.0 + offset, span.1 + offset)))
}

/// Maps parsed word forms of the key sentence (char range `sentence`) onto
/// passage pieces. Each form is searched for left to right; a piece
/// belongs to the first form that overlaps it.
pub fn align_forms(
    passage: &str,
    segmented: &Segmented,
    sentence: Range<usize>,
    forms: &[&str],
    offset: usize,
) -> Result<Vec<Range<usize>>> {
    let chars: Vec<char> = passage.chars().collect();
    let mut cursor = sentence.start;
    let mut taken = vec![false; segmented.pieces.len()];
    let mut out = Vec::with_capacity(forms.len());
    for (w, form) in forms.iter().enumerate() {
        let needle: Vec<char> = form.chars().collect();
        let start = crate::keysent::find_chars(&chars[..sentence.end], &needle, cursor)
            .ok_or_else(|| Error::Alignment(format!("word {w} ({form:?}) not found in key sentence")))?;
        let end = start + needle.len();
        cursor = end;
        let pieces: Vec<usize> = segmented
            .piece_chars
            .iter()
            .enumerate()
            .filter(|&(i, r)| !taken[i] && r.start < end && start < r.end)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (pieces.first(), pieces.last()) else {
            return Err(Error::Alignment(format!("word {w} ({form:?}) has no free subword")));
        };
        if last - first + 1 != pieces.len() {
            return Err(Error::Alignment(format!("word {w} ({form:?}) maps to non-contiguous subwords")));
        }
        for &p in &pieces {
            taken[p] = true;
        }
        out.push(first + offset..last + 1 + offset);
    }
    Ok(out)
}
