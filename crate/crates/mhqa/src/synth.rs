//! Deterministic generator for synthetic multi-hop completion instances.
//!
//! Each instance lays out `candidates` parallel relation chains, one fact per
//! passage. A chain walks root -> bridge -> ... -> tail through `hops` facts,
//! and all chains share one relation sequence, so only the root named in the
//! question identifies the gold tail. Bridge entities repeat across passage
//! boundaries, which is what surface-match edges pick up; an optional pronoun
//! rendering turns some of those repeats into coreference hops, and an
//! optional alias sentence plants a two-edge graph route from root to tail
//! that never repeats the candidate's surface. Distractor facts over fresh
//! entities pad the layout.
//!
//! Passage order is retried until same-chain mentions in different passages
//! sit at least `min_gap` tokens apart, so the sequence encoder cannot read a
//! bridge's far context off the adjacent tape.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, GoldMeta, Instance, Mention, MentionKind, TokenSequence};
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(
        "instance {index}: no passage order kept repeated chains {min_gap} tokens apart after {attempts} shuffles"
    )]
    Infeasible {
        index: usize,
        min_gap: usize,
        attempts: usize,
    },
}

/// Shuffles tried per instance before the layout is declared infeasible.
const LAYOUT_ATTEMPTS: usize = 1000;
const PRONOUN_SURFACE: &str = "it";

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub instances: usize,
    /// Facts composed between the question subject and the answer.
    pub hops: usize,
    /// Candidate count; every candidate tails its own chain.
    pub candidates: usize,
    /// Extra facts over fresh entities, disconnected from every chain.
    pub distractor_facts: usize,
    /// Global entity pool; instances draw distinct entities from it.
    pub entity_vocab: usize,
    pub relation_vocab: usize,
    /// Minimum token distance between same-chain mentions in different
    /// passages.
    pub min_gap: usize,
    /// Chance that a bridge's second occurrence is written as a pronoun.
    pub pronoun_fraction: f64,
    /// Chance that an instance appends an alias of each chain's tail to the
    /// chain's first fact.
    pub alias_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            instances: 0,
            hops: 2,
            candidates: 4,
            distractor_facts: 10,
            entity_vocab: 60,
            relation_vocab: 8,
            min_gap: 24,
            pronoun_fraction: 0.2,
            alias_fraction: 0.0,
        }
    }
}

impl GenConfig {
    pub fn new(instances: usize, seed: u64) -> Self {
        GenConfig {
            seed,
            instances,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |reason: String| Err(GenError::Invalid(reason));
        if self.hops < 1 {
            return fail("hops must be at least 1".into());
        }
        if self.candidates < 2 {
            return fail("need at least 2 candidates".into());
        }
        if self.relation_vocab < self.hops {
            return fail(format!(
                "{} relations cannot fill {} distinct hops",
                self.relation_vocab, self.hops
            ));
        }
        // Worst case an instance draws chain nodes, one alias per chain, and
        // two entities per distractor, all distinct.
        let needed = self.candidates * (self.hops + 2) + 2 * self.distractor_facts;
        if self.entity_vocab < needed {
            return fail(format!(
                "entity vocab {} is smaller than the {} distinct entities an instance may need",
                self.entity_vocab, needed
            ));
        }
        for (name, p) in [
            ("pronoun_fraction", self.pronoun_fraction),
            ("alias_fraction", self.alias_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} is not a probability"));
            }
        }
        Ok(())
    }
}

/// One passage before layout: tokens plus single-token mentions as
/// (local offset, chain id, kind).
struct Draft {
    tokens: Vec<String>,
    mentions: Vec<(usize, String, MentionKind)>,
}

pub fn generate(config: &GenConfig) -> Result<Dataset, GenError> {
    config.validate()?;
    let mut instances = Vec::with_capacity(config.instances);
    for index in 0..config.instances {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("instance.{index}")));
        instances.push(generate_instance(config, index, &mut rng)?);
    }
    Ok(Dataset { instances })
}

fn generate_instance(
    config: &GenConfig,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Instance, GenError> {
    let k = config.candidates;
    let h = config.hops;

    let gold = rng.gen_range(0..k);
    let alias = rng.gen_bool(config.alias_fraction);

    // Distinct entities for the whole instance: h+1 chain nodes per chain,
    // then one alias per chain when leaking, then distractor pairs.
    let alias_count = if alias { k } else { 0 };
    let total = k * (h + 1) + alias_count + 2 * config.distractor_facts;
    let picks = rand::seq::index::sample(rng, config.entity_vocab, total).into_vec();
    let entity = |slot: usize| format!("e{}", picks[slot]);
    // Chain c's nodes sit at slots c*(h+1)..(c+1)*(h+1): root, bridges, tail.
    let node = |chain: usize, pos: usize| entity(chain * (h + 1) + pos);
    let alias_of = |chain: usize| entity(k * (h + 1) + chain);
    let distractor_entity =
        |fact: usize, side: usize| entity(k * (h + 1) + alias_count + 2 * fact + side);

    let relations: Vec<String> = rand::seq::index::sample(rng, config.relation_vocab, h)
        .into_vec()
        .into_iter()
        .map(|r| format!("r{r}"))
        .collect();

    let mut drafts: Vec<Draft> = Vec::with_capacity(k * h + config.distractor_facts);
    for chain in 0..k {
        for (fact, relation) in relations.iter().enumerate() {
            let subj = node(chain, fact);
            let obj = node(chain, fact + 1);
            let pronoun = fact > 0 && rng.gen_bool(config.pronoun_fraction);
            let (subj_token, subj_kind) = if pronoun {
                (PRONOUN_SURFACE.to_string(), MentionKind::Pronoun)
            } else {
                (subj.clone(), MentionKind::Entity)
            };
            let mut tokens = vec![subj_token, relation.clone(), obj.clone(), ".".into()];
            let mut mentions = vec![(0, subj, subj_kind), (2, obj, MentionKind::Entity)];
            if alias && fact == 0 {
                // The alias corefs the chain's tail but shows a fresh
                // surface, so it links to no candidate.
                tokens.push(alias_of(chain));
                mentions.push((4, node(chain, h), MentionKind::Entity));
            }
            drafts.push(Draft { tokens, mentions });
        }
    }
    for fact in 0..config.distractor_facts {
        let a = distractor_entity(fact, 0);
        let b = distractor_entity(fact, 1);
        let rel = format!("r{}", rng.gen_range(0..config.relation_vocab));
        drafts.push(Draft {
            tokens: vec![a.clone(), rel, b.clone(), ".".into()],
            mentions: vec![(0, a, MentionKind::Entity), (2, b, MentionKind::Entity)],
        });
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let candidates: Vec<String> = order.iter().map(|&c| node(c, h)).collect();
    let answer = order
        .iter()
        .position(|&c| c == gold)
        .expect("gold chain listed");

    let mut passage_order: Vec<usize> = (0..drafts.len()).collect();
    for _ in 0..LAYOUT_ATTEMPTS {
        passage_order.shuffle(rng);
        if let Some((passages, mentions)) = assemble(&drafts, &passage_order, config.min_gap) {
            let graph_hops = if alias && h >= 2 { 2 } else { 2 * h - 1 };
            return Ok(Instance {
                question: TokenSequence::single(vec![
                    node(gold, 0),
                    relations[h - 1].clone(),
                    "?".into(),
                ]),
                subject_chain: node(gold, 0),
                text: TokenSequence::from_passages(&passages),
                mentions,
                candidates,
                answer,
                meta: Some(GoldMeta {
                    hops: h,
                    graph_hops,
                }),
            });
        }
    }
    Err(GenError::Infeasible {
        index,
        min_gap: config.min_gap,
        attempts: LAYOUT_ATTEMPTS,
    })
}

/// Concatenate drafts in the given order; None when two same-chain mentions
/// in different passages land closer than `min_gap` tokens.
fn assemble(
    drafts: &[Draft],
    order: &[usize],
    min_gap: usize,
) -> Option<(Vec<Vec<String>>, Vec<Mention>)> {
    let mut passages = Vec::with_capacity(order.len());
    let mut placed: Vec<(usize, &str, MentionKind, usize)> = Vec::new();
    let mut offset = 0;
    for &draft_index in order {
        let draft = &drafts[draft_index];
        for (local, chain, kind) in &draft.mentions {
            placed.push((offset + local, chain.as_str(), *kind, passages.len()));
        }
        offset += draft.tokens.len();
        passages.push(draft.tokens.clone());
    }
    for (i, a) in placed.iter().enumerate() {
        for b in &placed[i + 1..] {
            if a.1 == b.1 && a.3 != b.3 && a.0.abs_diff(b.0) < min_gap {
                return None;
            }
        }
    }
    let mentions = placed
        .into_iter()
        .map(|(start, chain, kind, _)| Mention {
            start,
            end: start,
            chain: chain.to_string(),
            kind,
        })
        .collect();
    Some((passages, mentions))
}
