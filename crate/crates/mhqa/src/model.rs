//! Model assembly: the five variants, parameter initialization, the
//! per-instance forward pass, and the training loss.
//!
//! All variants share the same reading pipeline: embed tokens, encode the
//! passages and the question, extract mention and question representations,
//! score each candidate-linked mention against the question, and merge
//! mention probabilities per candidate. Graph variants additionally run
//! message passing over the mention graph and give every step its own
//! attention head. A graph variant with zero steps therefore computes
//! exactly the local baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    grad_check, GradCheckError, GradCheckReport, ParamStore, Tape, Tensor, TensorId,
};
use crate::data::{answer_mentions, link_candidates, Instance};
use crate::encoders::{
    bilstm_encode, build_coref_dag, dag_lstm_encode, Activation, EmbeddingTable, EncoderError,
    LstmWeights, TokenDag, Vocab, LSTM_PART_NAMES,
};
use crate::graph::{build_graph_filtered, EdgeFilter, EdgeType, GraphConfig};
use crate::graph_encoders::{
    init_states, run_gcn, run_grn, GcnWeights, GrnWeights, GRN_PART_NAMES,
};
use crate::matcher::{
    candidate_distribution, combine_scores, head_score, question_rep, span_rep, AttentionHead,
    CombineWeights, ExtractWeights, MatchError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("answer candidate has no linked mention")]
    AnswerUnlinked,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("answer probability underflowed to zero")]
    AnswerProbabilityUnderflow,
}

/// Which reading architecture to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Chain encoder, matching only.
    Local,
    /// Token-level DAG encoder with coreference jumps, matching only.
    CorefLstm,
    /// Chain encoder plus gated message passing over coreference edges.
    CorefGrn,
    /// Chain encoder plus gated message passing over the full graph.
    MhqaGrn,
    /// Chain encoder plus convolutional message passing over the full graph.
    MhqaGcn,
}

impl Variant {
    pub fn uses_token_dag(self) -> bool {
        matches!(self, Variant::CorefLstm)
    }

    pub fn graph_kind(self) -> Option<GraphKind> {
        match self {
            Variant::Local | Variant::CorefLstm => None,
            Variant::CorefGrn | Variant::MhqaGrn => Some(GraphKind::Grn),
            Variant::MhqaGcn => Some(GraphKind::Gcn),
        }
    }

    pub const ALL: [Variant; 5] = [
        Variant::Local,
        Variant::CorefLstm,
        Variant::CorefGrn,
        Variant::MhqaGrn,
        Variant::MhqaGcn,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Grn,
    Gcn,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::Local => "local",
            Variant::CorefLstm => "coref-lstm",
            Variant::CorefGrn => "coref-grn",
            Variant::MhqaGrn => "mhqa-grn",
            Variant::MhqaGcn => "mhqa-gcn",
        };
        write!(f, "{}", name)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Variant::Local),
            "coref-lstm" => Ok(Variant::CorefLstm),
            "coref-grn" => Ok(Variant::CorefGrn),
            "mhqa-grn" => Ok(Variant::MhqaGrn),
            "mhqa-gcn" => Ok(Variant::MhqaGcn),
            other => Err(format!(
                "unknown model '{}', expected one of local, coref-lstm, coref-grn, mhqa-grn, mhqa-gcn",
                other
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub emb_dim: usize,
    /// Per-direction encoder width; also the representation, graph state,
    /// and attention inner sizes.
    pub hidden: usize,
    /// Message-passing rounds for graph variants; ignored otherwise.
    pub steps: usize,
    pub edge_filter: EdgeFilter,
    pub graph: GraphConfig,
    /// Candidate nonlinearity for the DAG and graph cells. The chain
    /// encoder always uses tanh so that zero weights yield zero states.
    pub candidate: Activation,
    pub self_loop: bool,
    pub per_step_params: bool,
    pub trainable_embeddings: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            emb_dim: 300,
            hidden: 300,
            steps: if variant.graph_kind().is_some() { 3 } else { 0 },
            edge_filter: EdgeFilter::all(),
            graph: GraphConfig::default(),
            candidate: Activation::Sigmoid,
            self_loop: false,
            per_step_params: false,
            trainable_embeddings: false,
            init_seed: 0,
        }
    }

    /// Rounds of message passing this configuration actually runs.
    pub fn graph_steps(&self) -> usize {
        if self.variant.graph_kind().is_some() {
            self.steps
        } else {
            0
        }
    }

    /// Edge types visible to this variant. The coreference-only variant
    /// pins its filter regardless of the configured one.
    pub fn effective_filter(&self) -> EdgeFilter {
        match self.variant {
            Variant::CorefGrn => EdgeFilter::only(EdgeType::Coref),
            _ => self.edge_filter,
        }
    }
}

/// Every parameter is seeded by its own name, so two models initialize a
/// shared parameter identically no matter which other parameters exist.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    crate::derive_seed(seed, name)
}

fn xavier(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| dist.sample(&mut rng))
}

fn xavier_vector(n: usize, seed: u64) -> Tensor {
    let m = xavier(n, 1, seed);
    Tensor::vector(m.data().to_vec())
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embeddings: EmbeddingTable,
}

fn insert_lstm(store: &mut ParamStore, prefix: &str, hidden: usize, input: usize, seed: u64) {
    for part in LSTM_PART_NAMES {
        let name = format!("{}.{}", prefix, part);
        let tensor = match part.as_bytes()[0] {
            b'w' => xavier(hidden, input, param_seed(seed, &name)),
            b'u' => xavier(hidden, hidden, param_seed(seed, &name)),
            _ => Tensor::zeros(&[hidden]),
        };
        store.insert(&name, tensor);
    }
}

impl Model {
    /// Fresh model over the vocabulary. Matrices get fan-balanced uniform
    /// init, biases start at zero, the head combiner starts at all ones so
    /// every step contributes from the first update, and attention probes
    /// start random so their heads receive gradient.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Model {
        let seed = config.init_seed;
        let h = config.hidden;
        let mut params = ParamStore::new();

        let mut embeddings =
            EmbeddingTable::seeded(vocab, config.emb_dim, param_seed(seed, "emb.table"));
        embeddings.trainable = config.trainable_embeddings;
        if config.trainable_embeddings {
            params.insert("emb.table", embeddings.table.clone());
        }

        insert_lstm(&mut params, "passage.fwd", h, config.emb_dim, seed);
        insert_lstm(&mut params, "passage.bwd", h, config.emb_dim, seed);
        insert_lstm(&mut params, "question.fwd", h, config.emb_dim, seed);
        insert_lstm(&mut params, "question.bwd", h, config.emb_dim, seed);

        for side in ["mention", "question"] {
            let w_name = format!("extract.w_{}", side);
            params.insert(&w_name, xavier(h, 4 * h, param_seed(seed, &w_name)));
            params.insert(&format!("extract.b_{}", side), Tensor::zeros(&[h]));
        }

        let steps = config.graph_steps();
        if steps >= 1 {
            let name = "graph.w_init";
            params.insert(name, xavier(h, 2 * h, param_seed(seed, name)));
            params.insert("graph.b_init", Tensor::zeros(&[h]));
            let kind = config.variant.graph_kind().expect("graph variant");
            let prefixes: Vec<String> = if config.per_step_params {
                (0..steps)
                    .map(|t| match kind {
                        GraphKind::Grn => format!("grn.step{}", t),
                        GraphKind::Gcn => format!("gcn.step{}", t),
                    })
                    .collect()
            } else {
                vec![match kind {
                    GraphKind::Grn => "grn".to_string(),
                    GraphKind::Gcn => "gcn".to_string(),
                }]
            };
            for prefix in prefixes {
                match kind {
                    GraphKind::Grn => {
                        for part in GRN_PART_NAMES {
                            let name = format!("{}.{}", prefix, part);
                            let tensor = if part.starts_with('w') {
                                xavier(h, h, param_seed(seed, &name))
                            } else {
                                Tensor::zeros(&[h])
                            };
                            params.insert(&name, tensor);
                        }
                    }
                    GraphKind::Gcn => {
                        let w_name = format!("{}.w", prefix);
                        params.insert(&w_name, xavier(h, h, param_seed(seed, &w_name)));
                        params.insert(&format!("{}.b", prefix), Tensor::zeros(&[h]));
                    }
                }
            }
        }

        for t in 0..=steps {
            let prefix = format!("attn.step{}", t);
            let v_name = format!("{}.v", prefix);
            params.insert(&v_name, xavier_vector(h, param_seed(seed, &v_name)));
            for part in ["w", "u"] {
                let name = format!("{}.{}", prefix, part);
                params.insert(&name, xavier(h, h, param_seed(seed, &name)));
            }
            params.insert(&format!("{}.b", prefix), Tensor::zeros(&[h]));
        }
        params.insert("combine.w", Tensor::from_fn(&[steps + 1], |_| 1.0));
        params.insert("combine.b", Tensor::zeros(&[1]));

        Model {
            config,
            params,
            embeddings,
        }
    }
}

/// Everything the forward pass needs from one instance, computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub passage_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub dag: Option<TokenDag>,
    /// Untyped deduplicated neighbor lists after capping and filtering.
    pub adjacency: Vec<Vec<usize>>,
    pub links: Vec<Option<usize>>,
    pub candidate_count: usize,
    pub answer: usize,
    pub answer_linked: bool,
}

pub struct ForwardOut {
    /// Per-candidate probability vector.
    pub probs: TensorId,
    /// Mention indices that entered the softmax.
    pub scored: Vec<usize>,
}

impl Model {
    pub fn prepare(&self, instance: &Instance) -> Prepared {
        let links = link_candidates(instance);
        let answer_linked = !answer_mentions(instance).is_empty();
        let dag = self
            .config
            .variant
            .uses_token_dag()
            .then(|| build_coref_dag(instance));
        let adjacency = if self.config.graph_steps() >= 1 {
            let graph =
                build_graph_filtered(instance, &self.config.graph, self.config.effective_filter());
            graph
                .adjacency
                .iter()
                .map(|nbrs| {
                    let mut seen: Vec<usize> = Vec::with_capacity(nbrs.len());
                    for &(n, _) in nbrs {
                        if !seen.contains(&n) {
                            seen.push(n);
                        }
                    }
                    seen
                })
                .collect()
        } else {
            Vec::new()
        };
        Prepared {
            passage_ids: self.embeddings.ids(&instance.text.tokens),
            question_ids: self.embeddings.ids(&instance.question.tokens),
            spans: instance.mentions.iter().map(|m| (m.start, m.end)).collect(),
            dag,
            adjacency,
            links,
            candidate_count: instance.candidates.len(),
            answer: instance.answer,
            answer_linked,
        }
    }

    /// Candidate distribution for one instance. `dropout` is the training
    /// rate; evaluation passes 0, which makes the pass deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        dropout: f64,
    ) -> Result<ForwardOut, ModelError> {
        let bound = self.params.bind_all(tape);
        let emb_param = self
            .config
            .trainable_embeddings
            .then(|| bound.get("emb.table"));

        let drop_all = |tape: &mut Tape, xs: Vec<TensorId>| -> Vec<TensorId> {
            xs.into_iter().map(|x| tape.dropout(x, dropout)).collect()
        };
        let xs = self.embeddings.embed(tape, &prep.passage_ids, emb_param);
        let xs = drop_all(tape, xs);
        let qs = self.embeddings.embed(tape, &prep.question_ids, emb_param);
        let qs = drop_all(tape, qs);

        let p_fw = LstmWeights::resolve(&bound, "passage.fwd");
        let p_bw = LstmWeights::resolve(&bound, "passage.bwd");
        let enc = match &prep.dag {
            Some(dag) => dag_lstm_encode(tape, &p_fw, &p_bw, &xs, dag, self.config.candidate)?,
            None => bilstm_encode(tape, &p_fw, &p_bw, &xs, Activation::Tanh),
        };
        let q_fw = LstmWeights::resolve(&bound, "question.fwd");
        let q_bw = LstmWeights::resolve(&bound, "question.bwd");
        let q_enc = bilstm_encode(tape, &q_fw, &q_bw, &qs, Activation::Tanh);

        let ew = ExtractWeights::resolve(&bound, "extract");
        let h_q = question_rep(tape, ew, &q_enc);
        let h_q = tape.dropout(h_q, dropout);
        let reps: Vec<TensorId> = prep
            .spans
            .iter()
            .map(|&(s, e)| {
                let r = span_rep(tape, ew.w_mention, ew.b_mention, &enc, s, e);
                tape.dropout(r, dropout)
            })
            .collect();

        let steps = self.config.graph_steps();
        let mut per_step: Vec<Vec<TensorId>> = vec![reps.clone()];
        if steps >= 1 {
            let w_init = bound.get("graph.w_init");
            let b_init = bound.get("graph.b_init");
            let s0 = init_states(tape, w_init, b_init, &reps, h_q);
            let kind = self.config.variant.graph_kind().expect("graph variant");
            let trajectory = match kind {
                GraphKind::Grn => {
                    let weights: Vec<GrnWeights> = if self.config.per_step_params {
                        (0..steps)
                            .map(|t| GrnWeights::resolve(&bound, &format!("grn.step{}", t)))
                            .collect()
                    } else {
                        vec![GrnWeights::resolve(&bound, "grn")]
                    };
                    run_grn(
                        tape,
                        &weights,
                        &prep.adjacency,
                        &s0,
                        steps,
                        self.config.self_loop,
                        self.config.candidate,
                    )
                }
                GraphKind::Gcn => {
                    let weights: Vec<GcnWeights> = if self.config.per_step_params {
                        (0..steps)
                            .map(|t| GcnWeights::resolve(&bound, &format!("gcn.step{}", t)))
                            .collect()
                    } else {
                        vec![GcnWeights::resolve(&bound, "gcn")]
                    };
                    run_gcn(
                        tape,
                        &weights,
                        &prep.adjacency,
                        &s0,
                        steps,
                        self.config.self_loop,
                    )
                }
            };
            per_step.extend(trajectory.into_iter().skip(1));
        }

        let heads: Vec<AttentionHead> = (0..=steps)
            .map(|t| AttentionHead::resolve(&bound, &format!("attn.step{}", t)))
            .collect();
        let cw = CombineWeights::resolve(&bound, "combine");
        let combined: Vec<TensorId> = (0..prep.spans.len())
            .map(|j| {
                let scores: Vec<TensorId> = (0..=steps)
                    .map(|t| head_score(tape, &heads[t], per_step[t][j], h_q))
                    .collect();
                combine_scores(tape, cw, &scores)
            })
            .collect();

        let (probs, scored) =
            candidate_distribution(tape, &combined, &prep.links, prep.candidate_count)?;
        Ok(ForwardOut { probs, scored })
    }

    /// Negative log probability of the answer plus the L2 penalty over all
    /// parameters, built on-tape so both terms receive gradients.
    pub fn loss(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        dropout: f64,
        l2: f64,
    ) -> Result<TensorId, ModelError> {
        if !prep.answer_linked {
            return Err(ModelError::AnswerUnlinked);
        }
        let out = self.forward(tape, prep, dropout)?;
        let p_ans = tape.sum_selected(out.probs, &[prep.answer]);
        if tape.value(p_ans).item() <= 0.0 {
            return Err(ModelError::AnswerProbabilityUnderflow);
        }
        let lp = tape.ln(p_ans);
        let mut total = tape.scale(lp, -1.0);
        if l2 > 0.0 {
            let ids: Vec<TensorId> = tape.bound().iter().map(|&(_, id)| id).collect();
            let squares: Vec<TensorId> = ids.into_iter().map(|id| tape.sum_squares(id)).collect();
            let l2_sum = tape.add_n(&squares);
            let penalty = tape.scale(l2_sum, l2);
            total = tape.add(total, penalty);
        }
        Ok(total)
    }

    /// Inference-mode candidate probabilities.
    pub fn predict(&self, instance: &Instance) -> Result<Vec<f64>, ModelError> {
        let prep = self.prepare(instance);
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &prep, 0.0)?;
        Ok(tape.value(out.probs).data().to_vec())
    }
}

/// Finite-difference audit of the loss gradient, instance by instance, over
/// every parameter coordinate. Instances must have scorable answers. Returns
/// the total coordinate count and the worst relative error seen.
pub fn check_loss_gradients(
    model: &mut Model,
    instances: &[Instance],
    epsilon: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let config = model.config.clone();
    let embeddings = model.embeddings.clone();
    let mut merged = GradCheckReport {
        coords: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for instance in instances {
        let prep = model.prepare(instance);
        assert!(prep.answer_linked, "gradient audit needs a linked answer");
        let report = grad_check(&mut model.params, epsilon, |store| {
            let shadow = Model {
                config: config.clone(),
                params: store.clone(),
                embeddings: embeddings.clone(),
            };
            let mut tape = Tape::new(0);
            let loss = shadow
                .loss(&mut tape, &prep, 0.0, 0.0)
                .expect("linked answers score");
            (tape, loss)
        })?;
        merged.coords += report.coords;
        if report.max_rel_err > merged.max_rel_err {
            merged.max_rel_err = report.max_rel_err;
            merged.worst = report.worst;
        }
    }
    Ok(merged)
}
