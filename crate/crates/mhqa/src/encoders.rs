//! Token embeddings and recurrent sequence encoders.
//!
//! Both directions of every encoder share one cell routine. A chain LSTM is
//! the special case of the DAG cell with a single predecessor; the DAG
//! variant additionally receives coreference edges that jump from the end of
//! a chain's previous occurrence to the start of the next one, so pronouns
//! read the state of their antecedents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BoundParams, Tape, Tensor, TensorId};
use crate::data::{Dataset, Instance};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("embedding file line {line}: {reason}")]
    EmbeddingFile { line: usize, reason: String },
    #[error("dag edge {from} -> {to} violates forward token order")]
    EdgeOrder { from: usize, to: usize },
}

/// Candidate-update nonlinearity inside recurrent cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

// ---- vocabulary and embeddings ----

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<'a>(tokens: impl Iterator<Item = &'a str>) -> Self {
        let mut index = BTreeMap::new();
        for t in tokens {
            let next = index.len();
            index.entry(t.to_string()).or_insert(next);
        }
        Vocab { index }
    }

    /// Vocabulary over every question and passage token in the dataset.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Vocab::from_tokens(
            dataset
                .instances
                .iter()
                .flat_map(|i| i.question.tokens.iter().chain(i.text.tokens.iter()))
                .map(String::as_str),
        )
    }

    /// Number of known tokens, excluding the unknown-token row.
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.index.len()
    }

    /// Row for a token; unknown tokens map to the shared trailing row.
    pub fn lookup(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.unk_id())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Rebuild from tokens listed in index order (checkpoint layout).
    pub fn from_indexed(tokens: Vec<String>) -> Self {
        let index = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        Vocab { index }
    }

    /// Tokens listed in index order, inverse of `from_indexed`.
    pub fn by_index(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.index.len()];
        for (t, &i) in &self.index {
            out[i] = t.clone();
        }
        out
    }
}

/// Embedding rows for the vocabulary plus one trailing unknown-token row.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub table: Tensor,
    pub dim: usize,
    /// When true the table is registered as a parameter and receives
    /// gradient updates; otherwise rows enter the tape as constants.
    pub trainable: bool,
}

fn seeded_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-0.1, 0.1);
    Tensor::from_fn(&[rows, dim], |_| dist.sample(&mut rng))
}

impl EmbeddingTable {
    /// Random initialization, uniform in [-0.1, 0.1].
    pub fn seeded(vocab: Vocab, dim: usize, seed: u64) -> Self {
        let table = seeded_rows(vocab.len() + 1, dim, seed);
        EmbeddingTable {
            vocab,
            table,
            dim,
            trainable: false,
        }
    }

    /// Load pretrained vectors in the plain text layout `token v1 .. vd`.
    /// Tokens absent from the file keep their random rows; file tokens
    /// outside the vocabulary are skipped.
    pub fn from_text_file(
        path: &Path,
        vocab: Vocab,
        dim: usize,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let mut out = EmbeddingTable::seeded(vocab, dim, seed);
        let reader = BufReader::new(File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().ok_or_else(|| EncoderError::EmbeddingFile {
                line: lineno,
                reason: "missing token".into(),
            })?;
            let values: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| EncoderError::EmbeddingFile {
                line: lineno,
                reason: format!("bad float: {}", e),
            })?;
            if values.len() != dim {
                return Err(EncoderError::EmbeddingFile {
                    line: lineno,
                    reason: format!("expected {} values, got {}", dim, values.len()),
                });
            }
            if let Some(&row) = out.vocab.index.get(token) {
                let cols = out.dim;
                out.table.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(&values);
            }
        }
        Ok(out)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.lookup(t)).collect()
    }

    /// Push one embedding vector per token id. With a bound table the rows
    /// stay differentiable; otherwise they are constants.
    pub fn embed(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        bound_table: Option<TensorId>,
    ) -> Vec<TensorId> {
        match bound_table {
            Some(table) => token_ids.iter().map(|&id| tape.row(table, id)).collect(),
            None => token_ids
                .iter()
                .map(|&id| tape.leaf(Tensor::vector(self.table.row(id).to_vec())))
                .collect(),
        }
    }
}

// ---- recurrent cells ----

/// Tape handles for one direction's gate parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_i: TensorId,
    pub u_i: TensorId,
    pub b_i: TensorId,
    pub w_f: TensorId,
    pub u_f: TensorId,
    pub b_f: TensorId,
    pub w_o: TensorId,
    pub u_o: TensorId,
    pub b_o: TensorId,
    pub w_u: TensorId,
    pub u_u: TensorId,
    pub b_u: TensorId,
}

pub const LSTM_PART_NAMES: [&str; 12] = [
    "w_i", "u_i", "b_i", "w_f", "u_f", "b_f", "w_o", "u_o", "b_o", "w_u", "u_u", "b_u",
];

impl LstmWeights {
    /// Pull the twelve `{prefix}.{part}` parameters off a bound store.
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        let get = |part: &str| bound.get(&format!("{}.{}", prefix, part));
        LstmWeights {
            w_i: get("w_i"),
            u_i: get("u_i"),
            b_i: get("b_i"),
            w_f: get("w_f"),
            u_f: get("u_f"),
            b_f: get("b_f"),
            w_o: get("w_o"),
            u_o: get("u_o"),
            b_o: get("b_o"),
            w_u: get("w_u"),
            u_u: get("u_u"),
            b_u: get("b_u"),
        }
    }
}

/// One cell evaluation with an arbitrary predecessor set.
///
/// Input, output, and candidate gates read the sum of predecessor hidden
/// states; each predecessor gets its own forget gate against its own hidden
/// state, and the new cell is `i*u` plus the forget-weighted predecessor
/// cells. With no predecessors the sums are zero vectors.
fn cell_step(
    tape: &mut Tape,
    w: &LstmWeights,
    x: TensorId,
    preds: &[(TensorId, TensorId)],
    zero: TensorId,
    candidate: Activation,
) -> (TensorId, TensorId) {
    let h_sum = match preds.len() {
        0 => zero,
        1 => preds[0].0,
        _ => {
            let hs: Vec<TensorId> = preds.iter().map(|&(h, _)| h).collect();
            tape.add_n(&hs)
        }
    };
    let gate = |tape: &mut Tape, wx: TensorId, u: TensorId, b: TensorId| {
        let uh = tape.matmul(u, h_sum);
        tape.add_n(&[wx, uh, b])
    };
    let wx_i = tape.matmul(w.w_i, x);
    let pre_i = gate(tape, wx_i, w.u_i, w.b_i);
    let i = tape.sigmoid(pre_i);
    let wx_o = tape.matmul(w.w_o, x);
    let pre_o = gate(tape, wx_o, w.u_o, w.b_o);
    let o = tape.sigmoid(pre_o);
    let wx_u = tape.matmul(w.w_u, x);
    let pre_u = gate(tape, wx_u, w.u_u, w.b_u);
    let u = candidate.apply(tape, pre_u);

    let mut cell_terms = vec![tape.mul(i, u)];
    if !preds.is_empty() {
        let wx_f = tape.matmul(w.w_f, x);
        for &(h_p, c_p) in preds {
            let uf = tape.matmul(w.u_f, h_p);
            let pre_f = tape.add_n(&[wx_f, uf, w.b_f]);
            let f = tape.sigmoid(pre_f);
            cell_terms.push(tape.mul(f, c_p));
        }
    }
    let c = tape.add_n(&cell_terms);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Hidden states per position for both directions. `fw[i]` saw positions
/// `0..=i`, `bw[i]` saw positions `i..`.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub fw: Vec<TensorId>,
    pub bw: Vec<TensorId>,
}

fn hidden_size(tape: &Tape, w: &LstmWeights) -> usize {
    tape.value(w.b_i).len()
}

/// Unidirectional chain LSTM; `reverse` walks the sequence right to left
/// while returning states indexed by original position.
pub fn chain_lstm(
    tape: &mut Tape,
    w: &LstmWeights,
    xs: &[TensorId],
    candidate: Activation,
    reverse: bool,
) -> Vec<TensorId> {
    let n = xs.len();
    let zero = tape.zeros(hidden_size(tape, w));
    let mut states: Vec<Option<TensorId>> = vec![None; n];
    let mut prev: Option<(TensorId, TensorId)> = None;
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for j in order {
        let preds: Vec<(TensorId, TensorId)> = prev.into_iter().collect();
        let (h, c) = cell_step(tape, w, xs[j], &preds, zero, candidate);
        states[j] = Some(h);
        prev = Some((h, c));
    }
    states.into_iter().map(|s| s.unwrap()).collect()
}

pub fn bilstm_encode(
    tape: &mut Tape,
    fw: &LstmWeights,
    bw: &LstmWeights,
    xs: &[TensorId],
    candidate: Activation,
) -> EncodedSequence {
    EncodedSequence {
        fw: chain_lstm(tape, fw, xs, candidate, false),
        bw: chain_lstm(tape, bw, xs, candidate, true),
    }
}

// ---- DAG over tokens ----

/// Forward-direction predecessor lists: `preds[j]` are token positions with
/// an edge into `j`, all strictly less than `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDag {
    pub preds: Vec<Vec<usize>>,
}

impl TokenDag {
    /// Plain sequential order: each position follows its predecessor.
    pub fn sequential(n: usize) -> Self {
        TokenDag {
            preds: (0..n)
                .map(|j| if j == 0 { vec![] } else { vec![j - 1] })
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), EncoderError> {
        for (j, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                if p >= j {
                    return Err(EncoderError::EdgeOrder { from: p, to: j });
                }
            }
        }
        Ok(())
    }

    /// Successor lists, which are the predecessors of the reversed DAG.
    fn succs(&self) -> Vec<Vec<usize>> {
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); self.preds.len()];
        for (j, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                succs[p].push(j);
            }
        }
        succs
    }
}

/// Sequential edges plus coreference jumps: for each chain, an edge from the
/// end token of one occurrence to the start token of the next (by span
/// order). Occurrences that overlap their successor produce no jump, keeping
/// every edge forward.
pub fn build_coref_dag(instance: &Instance) -> TokenDag {
    let mut dag = TokenDag::sequential(instance.text.len());
    let mut chains: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for m in &instance.mentions {
        chains
            .entry(m.chain.as_str())
            .or_default()
            .push((m.start, m.end));
    }
    for occurrences in chains.values_mut() {
        occurrences.sort_unstable();
        occurrences.dedup();
        for pair in occurrences.windows(2) {
            let (_, prev_end) = pair[0];
            let (cur_start, _) = pair[1];
            if prev_end < cur_start && !dag.preds[cur_start].contains(&prev_end) {
                dag.preds[cur_start].push(prev_end);
            }
        }
    }
    dag
}

/// Bidirectional DAG LSTM. The backward direction reverses every edge and
/// walks positions right to left.
pub fn dag_lstm_encode(
    tape: &mut Tape,
    fw: &LstmWeights,
    bw: &LstmWeights,
    xs: &[TensorId],
    dag: &TokenDag,
    candidate: Activation,
) -> Result<EncodedSequence, EncoderError> {
    assert_eq!(
        xs.len(),
        dag.preds.len(),
        "dag over {} positions given {} inputs",
        dag.preds.len(),
        xs.len()
    );
    dag.validate()?;
    let n = xs.len();

    let run = |tape: &mut Tape, w: &LstmWeights, edges: &[Vec<usize>], forward: bool| {
        let zero = tape.zeros(hidden_size(tape, w));
        let mut hidden: Vec<Option<(TensorId, TensorId)>> = vec![None; n];
        let order: Vec<usize> = if forward {
            (0..n).collect()
        } else {
            (0..n).rev().collect()
        };
        for j in order {
            let preds: Vec<(TensorId, TensorId)> =
                edges[j].iter().map(|&p| hidden[p].unwrap()).collect();
            let hc = cell_step(tape, w, xs[j], &preds, zero, candidate);
            hidden[j] = Some(hc);
        }
        hidden.into_iter().map(|s| s.unwrap().0).collect::<Vec<_>>()
    };

    let fw_states = run(tape, fw, &dag.preds, true);
    let bw_states = run(tape, bw, &dag.succs(), false);
    Ok(EncodedSequence {
        fw: fw_states,
        bw: bw_states,
    })
}
