//! Dataset schema, JSONL parsing, and candidate linking.
//!
//! One dataset record per line. Token offsets in mention annotations are
//! global over the concatenation of the instance's passages, so a mention
//! never needs re-indexing after passages are joined for encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    // Sources are not embedded in the messages; callers print the chain.
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("record {index}: malformed json")]
    Malformed {
        index: usize,
        source: serde_json::Error,
    },
    #[error("record {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionKind {
    Entity,
    Pronoun,
}

/// Which split a file is being read as. Train and dev splits must be
/// nonempty; a test split may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Tokens plus the start offset of each passage. `passage_boundaries[0]` is
/// always 0 and boundaries are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub passage_boundaries: Vec<usize>,
}

impl TokenSequence {
    pub fn single(tokens: Vec<String>) -> Self {
        TokenSequence {
            tokens,
            passage_boundaries: vec![0],
        }
    }

    pub fn from_passages(passages: &[Vec<String>]) -> Self {
        let mut tokens = Vec::new();
        let mut passage_boundaries = Vec::with_capacity(passages.len());
        for p in passages {
            passage_boundaries.push(tokens.len());
            tokens.extend(p.iter().cloned());
        }
        TokenSequence {
            tokens,
            passage_boundaries,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn passage_count(&self) -> usize {
        self.passage_boundaries.len()
    }

    /// Index of the passage containing global token position `pos`.
    pub fn passage_of(&self, pos: usize) -> usize {
        match self.passage_boundaries.binary_search(&pos) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Split back into per-passage token lists.
    pub fn passages(&self) -> Vec<Vec<String>> {
        let mut out = Vec::with_capacity(self.passage_count());
        for (i, &start) in self.passage_boundaries.iter().enumerate() {
            let end = self
                .passage_boundaries
                .get(i + 1)
                .copied()
                .unwrap_or(self.tokens.len());
            out.push(self.tokens[start..end].to_vec());
        }
        out
    }
}

/// A mention span over the concatenated passage tokens, inclusive on both
/// ends, tagged with its coreference chain and kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub chain: String,
    pub kind: MentionKind,
}

/// Optional generator bookkeeping carried through serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMeta {
    /// Number of facts that must be composed to justify the answer.
    pub hops: usize,
    /// Expected subject-to-answer distance on the full evidence graph.
    pub graph_hops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub question: TokenSequence,
    pub subject_chain: String,
    pub text: TokenSequence,
    pub mentions: Vec<Mention>,
    pub candidates: Vec<String>,
    pub answer: usize,
    pub meta: Option<GoldMeta>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

// ---- wire format ----

#[derive(Serialize, Deserialize)]
struct WireMention {
    start: usize,
    end: usize,
    chain: String,
    kind: MentionKind,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    question: Vec<String>,
    subject_chain: String,
    passages: Vec<Vec<String>>,
    mentions: Vec<WireMention>,
    candidates: Vec<String>,
    answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<GoldMeta>,
}

fn invalid(index: usize, reason: impl Into<String>) -> DataError {
    DataError::Invalid {
        index,
        reason: reason.into(),
    }
}

impl Instance {
    fn from_wire(rec: WireRecord, index: usize) -> Result<Self, DataError> {
        if rec.question.is_empty() {
            return Err(invalid(index, "empty question"));
        }
        if rec.candidates.is_empty() {
            return Err(invalid(index, "empty candidate list"));
        }
        if rec.answer >= rec.candidates.len() {
            return Err(invalid(
                index,
                format!(
                    "answer index {} out of range for {} candidates",
                    rec.answer,
                    rec.candidates.len()
                ),
            ));
        }
        if rec.passages.is_empty() || rec.passages.iter().all(|p| p.is_empty()) {
            return Err(invalid(index, "no passage tokens"));
        }
        if rec.subject_chain.is_empty() {
            return Err(invalid(index, "empty subject chain id"));
        }
        let text = TokenSequence::from_passages(&rec.passages);
        let total = text.len();

        let mut span_chain: BTreeMap<(usize, usize), &str> = BTreeMap::new();
        for (mi, m) in rec.mentions.iter().enumerate() {
            if m.start > m.end || m.end >= total {
                return Err(invalid(
                    index,
                    format!(
                        "mention {} span [{}, {}] invalid for {} tokens",
                        mi, m.start, m.end, total
                    ),
                ));
            }
            if text.passage_of(m.start) != text.passage_of(m.end) {
                return Err(invalid(
                    index,
                    format!("mention {} crosses a passage boundary", mi),
                ));
            }
            if m.chain.is_empty() {
                return Err(invalid(index, format!("mention {} has empty chain id", mi)));
            }
            if let Some(prev) = span_chain.insert((m.start, m.end), &m.chain) {
                if prev != m.chain {
                    return Err(invalid(
                        index,
                        format!(
                            "mentions with identical span [{}, {}] disagree on chain ({:?} vs {:?})",
                            m.start, m.end, prev, m.chain
                        ),
                    ));
                }
            }
        }
        Ok(Instance {
            question: TokenSequence::single(rec.question),
            subject_chain: rec.subject_chain,
            text,
            mentions: rec
                .mentions
                .into_iter()
                .map(|m| Mention {
                    start: m.start,
                    end: m.end,
                    chain: m.chain,
                    kind: m.kind,
                })
                .collect(),
            candidates: rec.candidates,
            answer: rec.answer,
            meta: rec.meta,
        })
    }

    fn to_wire(&self) -> WireRecord {
        WireRecord {
            question: self.question.tokens.clone(),
            subject_chain: self.subject_chain.clone(),
            passages: self.text.passages(),
            mentions: self
                .mentions
                .iter()
                .map(|m| WireMention {
                    start: m.start,
                    end: m.end,
                    chain: m.chain.clone(),
                    kind: m.kind,
                })
                .collect(),
            candidates: self.candidates.clone(),
            answer: self.answer,
            meta: self.meta.clone(),
        }
    }

    /// Tokens covered by a mention span.
    pub fn mention_tokens(&self, m: &Mention) -> &[String] {
        &self.text.tokens[m.start..=m.end]
    }

    /// Passage index of a mention.
    pub fn mention_passage(&self, m: &Mention) -> usize {
        self.text.passage_of(m.start)
    }
}

/// Lowercased, whitespace-collapsed surface form used for string matching.
pub fn normalize(tokens: &[String]) -> String {
    tokens
        .iter()
        .flat_map(|t| t.split_whitespace())
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Map every mention to the candidate it names, if any.
///
/// Entity mentions link when their normalized surface equals a normalized
/// candidate string. Pronouns inherit a link from the entity mentions on
/// their chain, but only when those agree on a single candidate.
pub fn link_candidates(instance: &Instance) -> Vec<Option<usize>> {
    let cand_index: BTreeMap<String, usize> = instance
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let toks: Vec<String> = c.split_whitespace().map(String::from).collect();
            (normalize(&toks), i)
        })
        .collect();

    let mut links: Vec<Option<usize>> = instance
        .mentions
        .iter()
        .map(|m| match m.kind {
            MentionKind::Entity => cand_index
                .get(&normalize(instance.mention_tokens(m)))
                .copied(),
            MentionKind::Pronoun => None,
        })
        .collect();

    // chain id -> candidate set contributed by linked entity mentions
    let mut chain_cands: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (m, link) in instance.mentions.iter().zip(&links) {
        if m.kind == MentionKind::Entity {
            if let Some(c) = link {
                let set = chain_cands.entry(m.chain.as_str()).or_default();
                if !set.contains(c) {
                    set.push(*c);
                }
            }
        }
    }
    for (i, m) in instance.mentions.iter().enumerate() {
        if m.kind == MentionKind::Pronoun {
            if let Some(cands) = chain_cands.get(m.chain.as_str()) {
                if cands.len() == 1 {
                    links[i] = Some(cands[0]);
                }
            }
        }
    }
    links
}

/// Mention indices that link to the answer candidate.
pub fn answer_mentions(instance: &Instance) -> Vec<usize> {
    link_candidates(instance)
        .iter()
        .enumerate()
        .filter_map(|(i, link)| (*link == Some(instance.answer)).then_some(i))
        .collect()
}

pub fn parse_dataset<R: Read>(reader: R, split: Split) -> Result<Dataset, DataError> {
    let reader = BufReader::new(reader);
    let mut instances = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WireRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Malformed { index, source })?;
        instances.push(Instance::from_wire(rec, index)?);
    }
    if instances.is_empty() && split != Split::Test {
        return Err(DataError::Empty);
    }
    Ok(Dataset { instances })
}

pub fn parse_dataset_file(path: &Path, split: Split) -> Result<Dataset, DataError> {
    parse_dataset(File::open(path)?, split)
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> Result<(), DataError> {
    for inst in &dataset.instances {
        let line = serde_json::to_string(&inst.to_wire()).expect("record serialization");
        writeln!(writer, "{}", line)?;
    }
    Ok(())
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    write_dataset(dataset, File::create(path)?)
}
