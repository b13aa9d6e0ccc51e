//! Dependency-triple filtering and the subword-level visibility mask.
//!
//! A triple `(head, dep, rel)` makes every subword of `head` and every
//! subword of `dep` mutually visible. Subwords of one word always see each
//! other and every token sees itself; everything else is blinded.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionBias;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, NEG_INF};

/// Word-level dependency triple; indices address words of the key sentence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DependencyTriple {
    #[serde(rename = "head")]
    pub head_word: usize,
    #[serde(rename = "dep")]
    pub dep_word: usize,
    #[serde(rename = "rel")]
    pub relation: String,
}

impl DependencyTriple {
    pub fn new(head_word: usize, dep_word: usize, relation: impl Into<String>) -> Self {
        Self {
            head_word,
            dep_word,
            relation: relation.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationStrategy {
    AllRelations,
    #[default]
    CoreArguments,
    CoreNominal,
}

/// Core argument relations. `pred` never occurs in UD output but is kept.
pub const CORE_ARGUMENTS: &[&str] = &[
    "pred", "subj", "nsubj", "nsubjpass", "csubj", "csubjpass", "obj", "dobj", "iobj", "xcomp",
];

pub const CORE_NOMINAL: &[&str] = &["subj", "nsubj", "nsubjpass", "obj", "dobj", "iobj"];

impl RelationStrategy {
    pub const ALL: [RelationStrategy; 3] = [
        RelationStrategy::AllRelations,
        RelationStrategy::CoreArguments,
        RelationStrategy::CoreNominal,
    ];

    /// Label set kept by this strategy, or `None` when every label is kept.
    pub fn labels(self) -> Option<&'static [&'static str]> {
        match self {
            RelationStrategy::AllRelations => None,
            RelationStrategy::CoreArguments => Some(CORE_ARGUMENTS),
            RelationStrategy::CoreNominal => Some(CORE_NOMINAL),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationStrategy::AllRelations => "all_relations",
            RelationStrategy::CoreArguments => "core_arguments",
            RelationStrategy::CoreNominal => "core_nominal",
        }
    }

    pub fn keeps(self, relation: &str) -> bool {
        match self.labels() {
            None => true,
            Some(set) => {
                let label = normalize_relation(relation);
                set.contains(&label.as_str())
            }
        }
    }
}

impl fmt::Display for RelationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationStrategy::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown relation strategy {s:?}")))
    }
}

/// Lowercases a label and maps parser spelling variants onto one name.
pub fn normalize_relation(relation: &str) -> String {
    let lower = relation.to_ascii_lowercase();
    match lower.as_str() {
        "dobj" => "obj".to_string(),
        "nsubj:pass" => "nsubjpass".to_string(),
        "csubj:pass" => "csubjpass".to_string(),
        _ => lower,
    }
}

/// Triples that survived relation filtering, in parse order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TripleSet(pub Vec<DependencyTriple>);

impl TripleSet {
    pub fn iter(&self) -> impl Iterator<Item = &DependencyTriple> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn filter_triples(parse: &[DependencyTriple], strategy: RelationStrategy) -> TripleSet {
    TripleSet(
        parse
            .iter()
            .filter(|t| strategy.keeps(&t.relation))
            .cloned()
            .collect(),
    )
}

/// Symmetric, reflexive token-visibility relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    size: usize,
    visible: Vec<bool>,
}

impl VisibilityMask {
    /// Diagonal-only mask: every token sees only itself.
    pub fn identity(size: usize) -> Self {
        let mut visible = vec![false; size * size];
        for i in 0..size {
            visible[i * size + i] = true;
        }
        Self { size, visible }
    }

    pub fn all_visible(size: usize) -> Self {
        Self {
            size,
            visible: vec![true; size * size],
        }
    }

    /// Rebuilds a mask from off-diagonal pairs; order inside a pair is irrelevant.
    pub fn from_pairs(size: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::identity(size);
        for &(i, j) in pairs {
            if i >= size || j >= size {
                return Err(Error::Alignment(format!(
                    "visible pair ({i}, {j}) outside a {size}-token mask"
                )));
            }
            mask.make_visible(i, j);
        }
        Ok(mask)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.size + j]
    }

    pub fn make_visible(&mut self, i: usize, j: usize) {
        self.visible[i * self.size + j] = true;
        self.visible[j * self.size + i] = true;
    }

    /// Off-diagonal visible pairs `(i, j)` with `i < j`, row-major order.
    pub fn visible_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.size {
            for j in i + 1..self.size {
                if self.is_visible(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Subword token ranges of each key-sentence word inside the full input.
pub type WordAlignment = [Range<usize>];

pub fn build_mask(
    triples: &TripleSet,
    word_count: usize,
    alignment: &WordAlignment,
    size: usize,
) -> Result<VisibilityMask> {
    if alignment.len() != word_count {
        return Err(Error::Alignment(format!(
            "{} word spans for {word_count} words",
            alignment.len()
        )));
    }
    let mut covered = BTreeSet::new();
    for (w, span) in alignment.iter().enumerate() {
        if span.end > size || span.is_empty() {
            return Err(Error::Alignment(format!(
                "word {w} maps to subwords {span:?} outside [0, {size})"
            )));
        }
        for p in span.clone() {
            if !covered.insert(p) {
                return Err(Error::Alignment(format!("subword {p} belongs to two words")));
            }
        }
    }

    let mut mask = VisibilityMask::identity(size);
    for span in alignment {
        for p in span.clone() {
            for q in span.clone() {
                mask.make_visible(p, q);
            }
        }
    }
    for t in triples.iter() {
        if t.head_word >= word_count || t.dep_word >= word_count {
            return Err(Error::Alignment(format!(
                "triple ({}, {}, {}) references a word beyond {word_count}",
                t.head_word, t.dep_word, t.relation
            )));
        }
        for p in alignment[t.head_word].clone() {
            for q in alignment[t.dep_word].clone() {
                mask.make_visible(p, q);
            }
        }
    }
    Ok(mask)
}

/// Visible pairs become `0`, blinded pairs [`NEG_INF`].
pub fn mask_to_bias(mask: &VisibilityMask) -> AttentionBias {
    let n = mask.size();
    let data = mask
        .visible
        .iter()
        .map(|&v| if v { 0.0 } else { NEG_INF })
        .collect();
    let m = Matrix::new(n, n, data).expect("square mask");
    AttentionBias::mask(m).expect("mask entries are 0 or NEG_INF")
}

/// How the key sentence was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySelection {
    Containment,
    RougeFallback,
}

/// On-disk mask artifact, one JSON object per example.
///
/// `visible_pairs` lists off-diagonal pairs with `i < j`; the diagonal is
/// implied. The remaining fields record where the answer and key sentence
/// sit in the tokenized input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub example_id: String,
    #[serde(rename = "I")]
    pub size: usize,
    pub visible_pairs: Vec<[usize; 2]>,
    pub triples: TripleSet,
    pub strategy: RelationStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_sentence: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<KeySelection>,
}

impl MaskArtifact {
    pub fn new(
        example_id: impl Into<String>,
        mask: &VisibilityMask,
        triples: TripleSet,
        strategy: RelationStrategy,
    ) -> Self {
        Self {
            example_id: example_id.into(),
            size: mask.size(),
            visible_pairs: mask.visible_pairs().into_iter().map(|(i, j)| [i, j]).collect(),
            triples,
            strategy,
            answer_span: None,
            key_sentence: None,
            selection: None,
        }
    }

    pub fn mask(&self) -> Result<VisibilityMask> {
        let pairs: Vec<(usize, usize)> = self.visible_pairs.iter().map(|p| (p[0], p[1])).collect();
        VisibilityMask::from_pairs(self.size, &pairs)
    }
}
