//! Key-sentence selection: the sentence that fully contains the answer, or
//! failing that the sentence with the best ROUGE-L F1 against the answer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synmask::KeySelection;

/// One sentence as a half-open char range of the passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Ordered, non-overlapping sentences of a passage. Offsets count chars,
/// not bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplit {
    pub sentences: Vec<Sentence>,
}

impl SentenceSplit {
    /// Lines are sentences when the passage has line breaks; otherwise a
    /// sentence ends after a run of `.`, `!` or `?` followed by whitespace.
    pub fn split(passage: &str) -> Self {
        let chars: Vec<char> = passage.chars().collect();
        let mut bounds = Vec::new();
        if chars.contains(&'\n') {
            let mut start = 0;
            for (i, &c) in chars.iter().enumerate() {
                if c == '\n' {
                    bounds.push((start, i));
                    start = i + 1;
                }
            }
            bounds.push((start, chars.len()));
        } else {
            let mut start = 0;
            let mut i = 0;
            while i < chars.len() {
                if matches!(chars[i], '.' | '!' | '?') {
                    let mut j = i;
                    while j < chars.len() && matches!(chars[j], '.' | '!' | '?') {
                        j += 1;
                    }
                    if j == chars.len() || chars[j].is_whitespace() {
                        bounds.push((start, j));
                        start = j;
                    }
                    i = j;
                } else {
                    i += 1;
                }
            }
            bounds.push((start, chars.len()));
        }
        let sentences = bounds
            .into_iter()
            .filter_map(|(s, e)| trim_span(&chars, s, e))
            .map(|(start, end)| Sentence {
                start,
                end,
                text: chars[start..end].iter().collect(),
            })
            .collect();
        Self { sentences }
    }

    /// Uses caller-provided sentence texts, locating each in order.
    pub fn from_sentences(passage: &str, sentences: &[&str]) -> Result<Self> {
        let chars: Vec<char> = passage.chars().collect();
        let mut cursor = 0;
        let mut out = Vec::with_capacity(sentences.len());
        for s in sentences {
            let needle: Vec<char> = s.chars().collect();
            let start = find_chars(&chars, &needle, cursor).ok_or_else(|| {
                Error::Alignment(format!("sentence {s:?} not found in passage"))
            })?;
            let end = start + needle.len();
            out.push(Sentence {
                start,
                end,
                text: s.to_string(),
            });
            cursor = end;
        }
        Ok(Self { sentences: out })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn trim_span(chars: &[char], mut s: usize, mut e: usize) -> Option<(usize, usize)> {
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    (s < e).then_some((s, e))
}

pub(crate) fn find_chars(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    (from..=haystack.len().saturating_sub(needle.len()))
        .find(|&i| haystack.get(i..i + needle.len()) == Some(needle))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeLScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercased alphanumeric runs; punctuation and whitespace separate tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence, in O(|a| * |b|) time and
/// O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with `beta = 1`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeLScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeLScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeLScore {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySentence {
    pub index: usize,
    pub selection: KeySelection,
}

pub fn locate_key_sentence(
    passage: &SentenceSplit,
    answer: &str,
    answer_start: Option<usize>,
) -> Result<KeySentence> {
    locate_key_sentence_with(passage, answer, answer_start, rouge_l)
}

/// [`locate_key_sentence`] with an injectable similarity, used to observe
/// when the fallback runs.
pub fn locate_key_sentence_with<F>(
    passage: &SentenceSplit,
    answer: &str,
    answer_start: Option<usize>,
    mut score: F,
) -> Result<KeySentence>
where
    F: FnMut(&[String], &[String]) -> RougeLScore,
{
    if passage.is_empty() {
        return Err(Error::NoSentence);
    }
    if let Some(start) = answer_start {
        let end = start + answer.chars().count();
        if let Some(index) = passage
            .sentences
            .iter()
            .position(|s| s.start <= start && end <= s.end)
        {
            return Ok(KeySentence {
                index,
                selection: KeySelection::Containment,
            });
        }
    }
    let reference = rouge_tokens(answer);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in passage.sentences.iter().enumerate() {
        let f1 = score(&rouge_tokens(&s.text), &reference).f1;
        if f1 > best.1 {
            best = (i, f1);
        }
    }
    Ok(KeySentence {
        index: best.0,
        selection: KeySelection::RougeFallback,
    })
}
