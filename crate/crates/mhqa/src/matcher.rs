//! Mention and question representations, attention scoring, and the merge
//! from mention scores to a candidate distribution.
//!
//! A span is represented by an affine map over the concatenation
//! `[bw(start); fw(start); bw(end); fw(end)]` of the encoder states at its
//! boundary tokens; the question uses its first and last tokens. Each scorer
//! head is additive attention against the question representation, one head
//! per source of node features. Head scores are combined linearly, softmaxed
//! over the mentions that belong to some candidate, and summed per candidate,
//! so a candidate mentioned twice collects both shares of the mass.

use thiserror::Error;

use crate::autodiff::{BoundParams, Tape, TensorId};
use crate::encoders::EncodedSequence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("no mention belongs to any candidate")]
    NoScorableCandidates,
}

/// Affine extractors for mention and question representations.
#[derive(Debug, Clone, Copy)]
pub struct ExtractWeights {
    pub w_mention: TensorId,
    pub b_mention: TensorId,
    pub w_question: TensorId,
    pub b_question: TensorId,
}

impl ExtractWeights {
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        let get = |part: &str| bound.get(&format!("{}.{}", prefix, part));
        ExtractWeights {
            w_mention: get("w_mention"),
            b_mention: get("b_mention"),
            w_question: get("w_question"),
            b_question: get("b_question"),
        }
    }
}

/// Boundary-state span representation, `W [bw(s); fw(s); bw(e); fw(e)] + b`.
pub fn span_rep(
    tape: &mut Tape,
    w: TensorId,
    b: TensorId,
    enc: &EncodedSequence,
    start: usize,
    end: usize,
) -> TensorId {
    assert!(
        start <= end && end < enc.fw.len(),
        "span {}..={} out of range",
        start,
        end
    );
    let cat = tape.concat(&[enc.bw[start], enc.fw[start], enc.bw[end], enc.fw[end]]);
    tape.affine(w, cat, b)
}

/// Whole-question representation over its first and last tokens.
pub fn question_rep(tape: &mut Tape, w: ExtractWeights, enc: &EncodedSequence) -> TensorId {
    span_rep(tape, w.w_question, w.b_question, enc, 0, enc.fw.len() - 1)
}

/// One additive-attention scorer head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub v: TensorId,
    pub w: TensorId,
    pub u: TensorId,
    pub b: TensorId,
}

pub const ATTENTION_PART_NAMES: [&str; 4] = ["v", "w", "u", "b"];

impl AttentionHead {
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        let get = |part: &str| bound.get(&format!("{}.{}", prefix, part));
        AttentionHead {
            v: get("v"),
            w: get("w"),
            u: get("u"),
            b: get("b"),
        }
    }
}

/// Head score `v . tanh(W rep + U q + b)`, a shape-[1] tensor.
pub fn head_score(
    tape: &mut Tape,
    head: &AttentionHead,
    rep: TensorId,
    question: TensorId,
) -> TensorId {
    let wr = tape.matmul(head.w, rep);
    let uq = tape.matmul(head.u, question);
    let pre = tape.add_n(&[wr, uq, head.b]);
    let t = tape.tanh(pre);
    tape.dot(head.v, t)
}

/// Linear combination of per-head scores.
#[derive(Debug, Clone, Copy)]
pub struct CombineWeights {
    pub w: TensorId,
    pub b: TensorId,
}

impl CombineWeights {
    pub fn resolve(bound: &BoundParams, prefix: &str) -> Self {
        CombineWeights {
            w: bound.get(&format!("{}.w", prefix)),
            b: bound.get(&format!("{}.b", prefix)),
        }
    }
}

/// Final scalar score for one mention given its per-head scores.
pub fn combine_scores(tape: &mut Tape, w: CombineWeights, head_scores: &[TensorId]) -> TensorId {
    let cat = tape.concat(head_scores);
    let dot = tape.dot(w.w, cat);
    tape.add(dot, w.b)
}

/// Softmax the scores of candidate-linked mentions and merge occurrences.
///
/// Returns the candidate probability vector plus the mention indices that
/// entered the softmax, in order. Candidates without any linked mention get
/// probability exactly zero; if no mention links anywhere the instance is
/// unscorable.
pub fn candidate_distribution(
    tape: &mut Tape,
    mention_scores: &[TensorId],
    links: &[Option<usize>],
    candidate_count: usize,
) -> Result<(TensorId, Vec<usize>), MatchError> {
    assert_eq!(
        mention_scores.len(),
        links.len(),
        "score/link length mismatch"
    );
    let scored: Vec<usize> = (0..links.len()).filter(|&j| links[j].is_some()).collect();
    if scored.is_empty() {
        return Err(MatchError::NoScorableCandidates);
    }
    let score_vec: Vec<TensorId> = scored.iter().map(|&j| mention_scores[j]).collect();
    let cat = tape.concat(&score_vec);
    let probs = tape.softmax(cat);
    let per_candidate: Vec<TensorId> = (0..candidate_count)
        .map(|c| {
            let positions: Vec<usize> = scored
                .iter()
                .enumerate()
                .filter(|&(_, &j)| links[j] == Some(c))
                .map(|(pos, _)| pos)
                .collect();
            tape.sum_selected(probs, &positions)
        })
        .collect();
    Ok((tape.concat(&per_candidate), scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scores(tape: &mut Tape, values: &[f64]) -> Vec<TensorId> {
        values
            .iter()
            .map(|&v| tape.leaf(Tensor::scalar(v)))
            .collect()
    }

    #[test]
    fn equal_scores_merge_by_occurrence_count() {
        // Three linked mentions with equal scores; candidate 0 owns two of
        // them, so the mass splits exactly 2/3 vs 1/3.
        let mut tape = Tape::new(0);
        let s = scores(&mut tape, &[1.5, 1.5, 1.5]);
        let links = vec![Some(0), Some(1), Some(0)];
        let (probs, scored) = candidate_distribution(&mut tape, &s, &links, 2).unwrap();
        assert_eq!(scored, vec![0, 1, 2]);
        let p = tape.value(probs).data();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shifting_every_score_leaves_the_distribution_unchanged() {
        let mut tape = Tape::new(0);
        let s = scores(&mut tape, &[0.3, -1.2, 2.0, 0.0]);
        let shifted = scores(&mut tape, &[0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0, 0.0 + 7.0]);
        let links = vec![Some(0), Some(1), Some(1), None];
        let (p1, _) = candidate_distribution(&mut tape, &s, &links, 2).unwrap();
        let (p2, _) = candidate_distribution(&mut tape, &shifted, &links, 2).unwrap();
        let d = tape.value(p1).max_abs_diff(tape.value(p2));
        assert!(d <= 1e-12, "shift moved distribution by {}", d);
    }

    #[test]
    fn unlinked_mentions_carry_no_mass_and_totals_reach_one() {
        let mut tape = Tape::new(0);
        // The unlinked mention has a huge score; it must still be ignored.
        let s = scores(&mut tape, &[0.1, 50.0, 0.4]);
        let links = vec![Some(1), None, Some(0)];
        let (probs, scored) = candidate_distribution(&mut tape, &s, &links, 3).unwrap();
        assert_eq!(scored, vec![0, 2]);
        let p = tape.value(probs).data();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0, "candidate without mentions keeps zero");
        assert!(p[0] > 0.0 && p[1] > 0.0);
    }

    #[test]
    fn all_unlinked_is_an_error() {
        let mut tape = Tape::new(0);
        let s = scores(&mut tape, &[0.1, 0.2]);
        let links = vec![None, None];
        let err = candidate_distribution(&mut tape, &s, &links, 2).unwrap_err();
        assert_eq!(err, MatchError::NoScorableCandidates);
    }

    #[test]
    fn higher_scores_win_mass() {
        let mut tape = Tape::new(0);
        let s = scores(&mut tape, &[2.0, 0.0]);
        let links = vec![Some(0), Some(1)];
        let (probs, _) = candidate_distribution(&mut tape, &s, &links, 2).unwrap();
        let p = tape.value(probs).data();
        assert!(p[0] > p[1]);
        let expected = (2.0f64).exp() / ((2.0f64).exp() + 1.0);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn head_score_matches_hand_computation() {
        let mut tape = Tape::new(0);
        let head = AttentionHead {
            v: tape.leaf(Tensor::vector(vec![1.0, -2.0])),
            w: tape.leaf(Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5])),
            u: tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])),
            b: tape.leaf(Tensor::vector(vec![0.1, -0.1])),
        };
        let rep = tape.leaf(Tensor::vector(vec![0.4, 0.8]));
        let q = tape.leaf(Tensor::vector(vec![-0.3, 0.2]));
        let e = head_score(&mut tape, &head, rep, q);
        // pre = [0.2 - 0.3 + 0.1, 0.4 + 0.2 - 0.1] = [0.0, 0.5]
        let expected = 1.0 * 0.0f64.tanh() - 2.0 * 0.5f64.tanh();
        assert!((tape.value(e).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn combine_is_affine_in_head_scores() {
        let mut tape = Tape::new(0);
        let w = CombineWeights {
            w: tape.leaf(Tensor::vector(vec![1.0, 0.0, 3.0])),
            b: tape.leaf(Tensor::scalar(0.25)),
        };
        let heads = scores(&mut tape, &[2.0, 100.0, -1.0]);
        let out = combine_scores(&mut tape, w, &heads);
        assert!((tape.value(out).item() - (2.0 - 3.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn span_rep_concatenates_boundary_states() {
        let mut tape = Tape::new(0);
        let enc = EncodedSequence {
            fw: vec![
                tape.leaf(Tensor::vector(vec![1.0])),
                tape.leaf(Tensor::vector(vec![2.0])),
                tape.leaf(Tensor::vector(vec![3.0])),
            ],
            bw: vec![
                tape.leaf(Tensor::vector(vec![10.0])),
                tape.leaf(Tensor::vector(vec![20.0])),
                tape.leaf(Tensor::vector(vec![30.0])),
            ],
        };
        // Identity-ish W picks out [bw(s), fw(s), bw(e), fw(e)] = [20,2,30,3].
        let w = tape.leaf(Tensor::matrix(
            4,
            4,
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        ));
        let b = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let rep = span_rep(&mut tape, w, b, &enc, 1, 2);
        assert_eq!(tape.value(rep).data(), &[20.0, 2.0, 30.0, 3.0]);
    }
}
