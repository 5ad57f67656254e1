//! Evidence graph construction over mention annotations.
//!
//! Nodes are the instance's mentions, in annotation order. For an unordered
//! mention pair, each edge rule is evaluated independently and a qualifying
//! rule emits one directed edge in each direction:
//!
//! * Same: two entity mentions with equal normalized surfaces, either in
//!   different passages or further apart than `tau_long` tokens in the same
//!   passage. Nearby repetitions are left to the sequence encoder.
//! * Coref: two mentions on the same coreference chain, unless both are
//!   entity mentions with equal surfaces (those are Same's business when far
//!   apart, and sequential context's when close).
//! * Window: two mentions of different chains in the same passage at most
//!   `tau_window` tokens apart.
//!
//! Distances are measured between span starts. Self loops never appear.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{answer_mentions, normalize, Dataset, Instance, MentionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeType {
    Same,
    Coref,
    Window,
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeType::Same => write!(f, "same"),
            EdgeType::Coref => write!(f, "coref"),
            EdgeType::Window => write!(f, "window"),
        }
    }
}

/// Which edge types participate in a build or a traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFilter {
    pub same: bool,
    pub coref: bool,
    pub window: bool,
}

impl EdgeFilter {
    pub fn all() -> Self {
        EdgeFilter {
            same: true,
            coref: true,
            window: true,
        }
    }

    pub fn none() -> Self {
        EdgeFilter {
            same: false,
            coref: false,
            window: false,
        }
    }

    pub fn only(kind: EdgeType) -> Self {
        let mut f = EdgeFilter::none();
        f.set(kind, true);
        f
    }

    pub fn without(kind: EdgeType) -> Self {
        let mut f = EdgeFilter::all();
        f.set(kind, false);
        f
    }

    pub fn set(&mut self, kind: EdgeType, on: bool) {
        match kind {
            EdgeType::Same => self.same = on,
            EdgeType::Coref => self.coref = on,
            EdgeType::Window => self.window = on,
        }
    }

    pub fn allows(&self, kind: EdgeType) -> bool {
        match kind {
            EdgeType::Same => self.same,
            EdgeType::Coref => self.coref,
            EdgeType::Window => self.window,
        }
    }

    /// Parse "all", "none", or a comma list of type names.
    pub fn parse(spec: &str) -> Result<Self, String> {
        match spec.trim() {
            "all" => return Ok(EdgeFilter::all()),
            "none" => return Ok(EdgeFilter::none()),
            _ => {}
        }
        let mut f = EdgeFilter::none();
        for part in spec.split(',') {
            match part.trim() {
                "same" => f.same = true,
                "coref" => f.coref = true,
                "window" => f.window = true,
                other => return Err(format!("unknown edge type {:?}", other)),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for EdgeFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.same {
            names.push("same");
        }
        if self.coref {
            names.push("coref");
        }
        if self.window {
            names.push("window");
        }
        if names.is_empty() {
            write!(f, "none")
        } else if names.len() == 3 {
            write!(f, "all")
        } else {
            write!(f, "{}", names.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Same-passage distance above which a repeated surface still gets a
    /// Same edge.
    pub tau_long: usize,
    /// Maximum same-passage distance for a Window edge.
    pub tau_window: usize,
    /// Per-node cap on kept neighbors.
    pub neighbor_cap: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            tau_long: 200,
            tau_window: 20,
            neighbor_cap: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub tgt: usize,
    pub kind: EdgeType,
}

/// Built evidence graph. `edges` holds every directed typed edge before
/// capping; `adjacency` is the per-node neighbor list after capping and is
/// what message passing consumes. Distance analytics run on `edges` so that
/// adding edge types can never lengthen a path.
#[derive(Debug, Clone)]
pub struct EvidenceGraph {
    pub node_count: usize,
    pub edges: Vec<Edge>,
    pub adjacency: Vec<Vec<(usize, EdgeType)>>,
}

fn span_distance(a: usize, b: usize) -> usize {
    a.max(b) - a.min(b)
}

/// Evaluate the edge rules for one unordered pair. Returns the qualifying
/// types in a fixed order.
fn pair_edges(
    instance: &Instance,
    surfaces: &[String],
    u: usize,
    v: usize,
    config: &GraphConfig,
    filter: EdgeFilter,
) -> Vec<EdgeType> {
    let (mu, mv) = (&instance.mentions[u], &instance.mentions[v]);
    let same_passage = instance.mention_passage(mu) == instance.mention_passage(mv);
    let dist = span_distance(mu.start, mv.start);
    let both_entities = mu.kind == MentionKind::Entity && mv.kind == MentionKind::Entity;
    let same_surface = surfaces[u] == surfaces[v];
    let same_chain = mu.chain == mv.chain;

    let mut kinds = Vec::new();
    if filter.same && both_entities && same_surface && (!same_passage || dist > config.tau_long) {
        kinds.push(EdgeType::Same);
    }
    if filter.coref && same_chain && !(both_entities && same_surface) {
        kinds.push(EdgeType::Coref);
    }
    if filter.window && !same_chain && same_passage && dist <= config.tau_window {
        kinds.push(EdgeType::Window);
    }
    kinds
}

/// Keep at most `neighbor_cap` neighbors per node. Same and Coref neighbors
/// are kept ahead of Window neighbors; within a class, closer span starts
/// win, and remaining ties go to the lower node index. The procedure is a
/// sort plus truncate, so reapplying it changes nothing.
pub fn cap_neighbors(
    instance: &Instance,
    node_count: usize,
    edges: &[Edge],
    config: &GraphConfig,
) -> Vec<Vec<(usize, EdgeType)>> {
    let mut adjacency: Vec<Vec<(usize, EdgeType)>> = vec![Vec::new(); node_count];
    for e in edges {
        adjacency[e.src].push((e.tgt, e.kind));
    }
    let class = |kind: EdgeType| match kind {
        EdgeType::Same | EdgeType::Coref => 0usize,
        EdgeType::Window => 1usize,
    };
    for (node, nbrs) in adjacency.iter_mut().enumerate() {
        let start = instance.mentions[node].start;
        nbrs.sort_by_key(|&(n, kind)| {
            (
                class(kind),
                span_distance(start, instance.mentions[n].start),
                n,
            )
        });
        nbrs.truncate(config.neighbor_cap);
    }
    adjacency
}

/// Build the typed evidence graph restricted to the filtered edge types.
pub fn build_graph_filtered(
    instance: &Instance,
    config: &GraphConfig,
    filter: EdgeFilter,
) -> EvidenceGraph {
    let n = instance.mentions.len();
    let surfaces: Vec<String> = instance
        .mentions
        .iter()
        .map(|m| normalize(instance.mention_tokens(m)))
        .collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            for kind in pair_edges(instance, &surfaces, u, v, config, filter) {
                edges.push(Edge {
                    src: u,
                    tgt: v,
                    kind,
                });
                edges.push(Edge {
                    src: v,
                    tgt: u,
                    kind,
                });
            }
        }
    }
    let adjacency = cap_neighbors(instance, n, &edges, config);
    EvidenceGraph {
        node_count: n,
        edges,
        adjacency,
    }
}

pub fn build_graph(instance: &Instance, config: &GraphConfig) -> EvidenceGraph {
    build_graph_filtered(instance, config, EdgeFilter::all())
}

impl EvidenceGraph {
    pub fn edge_counts(&self) -> BTreeMap<EdgeType, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.edges {
            *counts.entry(e.kind).or_insert(0) += 1;
        }
        counts
    }

    /// Untyped neighbor sets over the uncapped edge list, optionally
    /// restricted by `filter`, deduplicated.
    pub fn neighbor_sets(&self, filter: EdgeFilter) -> Vec<Vec<usize>> {
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            if filter.allows(e.kind) && !sets[e.src].contains(&e.tgt) {
                sets[e.src].push(e.tgt);
            }
        }
        sets
    }
}

/// Fewest edges between any subject-chain mention and any answer-linked
/// mention, treating edges as untyped and undirected and ignoring the
/// neighbor cap. None when either side is empty or no path exists.
pub fn question_answer_distance(
    instance: &Instance,
    graph: &EvidenceGraph,
    filter: EdgeFilter,
) -> Option<usize> {
    let sources: Vec<usize> = instance
        .mentions
        .iter()
        .enumerate()
        .filter_map(|(i, m)| (m.chain == instance.subject_chain).then_some(i))
        .collect();
    let targets = answer_mentions(instance);
    if sources.is_empty() || targets.is_empty() {
        return None;
    }
    let is_target = {
        let mut mask = vec![false; graph.node_count];
        for t in &targets {
            mask[*t] = true;
        }
        mask
    };
    let neighbors = graph.neighbor_sets(filter);

    let mut dist: Vec<Option<usize>> = vec![None; graph.node_count];
    let mut queue = VecDeque::new();
    for s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap();
        if is_target[u] {
            return Some(d);
        }
        for &v in &neighbors[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Distribution of question-to-answer distances over a dataset. Fractions
/// over all instances; unreachable (or unlocatable) instances land in the
/// `unreachable` bucket, so the masses sum to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceHistogram {
    pub buckets: BTreeMap<usize, f64>,
    pub unreachable: f64,
    pub instances: usize,
}

pub fn distance_histogram(
    dataset: &Dataset,
    config: &GraphConfig,
    filter: EdgeFilter,
) -> DistanceHistogram {
    let total = dataset.instances.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unreachable = 0usize;
    for inst in &dataset.instances {
        let graph = build_graph_filtered(inst, config, filter);
        match question_answer_distance(inst, &graph, filter) {
            Some(d) => *counts.entry(d).or_insert(0) += 1,
            None => unreachable += 1,
        }
    }
    let frac = |c: usize| c as f64 / total.max(1) as f64;
    DistanceHistogram {
        buckets: counts.into_iter().map(|(d, c)| (d, frac(c))).collect(),
        unreachable: frac(unreachable),
        instances: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset_file, Mention, Split, TokenSequence};

    fn fixture() -> Instance {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/gardens.jsonl");
        parse_dataset_file(&path, Split::Train)
            .unwrap()
            .instances
            .remove(0)
    }

    /// Instance with one mention per (surface, passage-relative position)
    /// triple; surfaces double as chain ids unless overridden.
    fn make_instance(
        passages: Vec<Vec<&str>>,
        mentions: Vec<(usize, usize, &str, MentionKind)>,
        candidates: Vec<&str>,
        answer: usize,
        subject_chain: &str,
    ) -> Instance {
        let passages: Vec<Vec<String>> = passages
            .into_iter()
            .map(|p| p.into_iter().map(String::from).collect())
            .collect();
        Instance {
            question: TokenSequence::single(vec!["q".into()]),
            subject_chain: subject_chain.to_string(),
            text: TokenSequence::from_passages(&passages),
            mentions: mentions
                .into_iter()
                .map(|(start, end, chain, kind)| Mention {
                    start,
                    end,
                    chain: chain.to_string(),
                    kind,
                })
                .collect(),
            candidates: candidates.into_iter().map(String::from).collect(),
            answer,
            meta: None,
        }
    }

    fn has_edge(g: &EvidenceGraph, u: usize, v: usize, kind: EdgeType) -> bool {
        g.edges
            .iter()
            .any(|e| e.src == u && e.tgt == v && e.kind == kind)
    }

    #[test]
    fn fixture_edge_inventory() {
        let inst = fixture();
        let g = build_graph(&inst, &GraphConfig::default());
        assert_eq!(g.node_count, 13);

        // Cross-passage surface repetitions.
        assert!(has_edge(&g, 1, 4, EdgeType::Same), "Mumbai / Mumbai");
        assert!(has_edge(&g, 4, 1, EdgeType::Same), "reverse direction");
        assert!(has_edge(&g, 3, 8, EdgeType::Same), "Arabian Sea pair");
        assert!(has_edge(&g, 7, 12, EdgeType::Same), "India pair");

        // Chain edges, including the differing-surface alias pair.
        assert!(has_edge(&g, 0, 2, EdgeType::Coref), "They -> gardens");
        assert!(has_edge(&g, 1, 5, EdgeType::Coref), "Bombay alias");
        assert!(has_edge(&g, 1, 6, EdgeType::Coref), "It across passages");
        assert!(
            !has_edge(&g, 1, 4, EdgeType::Coref),
            "equal-surface entity pair is not coref"
        );

        // Window inside passages only.
        assert!(has_edge(&g, 0, 1, EdgeType::Window));
        assert!(has_edge(&g, 6, 7, EdgeType::Window), "It near India");
        assert!(has_edge(&g, 9, 12, EdgeType::Window), "distance 20 kept");
        assert!(!has_edge(&g, 4, 7, EdgeType::Window), "distance 31 dropped");
        assert!(!has_edge(&g, 0, 2, EdgeType::Window), "same chain excluded");

        let counts = g.edge_counts();
        assert_eq!(counts[&EdgeType::Same], 6);
        assert_eq!(counts[&EdgeType::Coref], 12);
        assert_eq!(counts[&EdgeType::Window], 26);

        // Every edge has its reverse before capping; no self loops.
        for e in &g.edges {
            assert_ne!(e.src, e.tgt);
            assert!(has_edge(&g, e.tgt, e.src, e.kind));
        }
    }

    #[test]
    fn fixture_distances_per_edge_subset() {
        let inst = fixture();
        let cfg = GraphConfig::default();
        let g = build_graph(&inst, &cfg);
        let full = question_answer_distance(&inst, &g, EdgeFilter::all());
        assert_eq!(full, Some(3), "gardens to India through Mumbai and It");

        let coref_only = build_graph_filtered(&inst, &cfg, EdgeFilter::only(EdgeType::Coref));
        assert_eq!(
            question_answer_distance(&inst, &coref_only, EdgeFilter::only(EdgeType::Coref)),
            None,
            "chains alone never leave the subject's component"
        );

        for kind in [EdgeType::Same, EdgeType::Coref, EdgeType::Window] {
            let sub = build_graph_filtered(&inst, &cfg, EdgeFilter::only(kind));
            let d = question_answer_distance(&inst, &sub, EdgeFilter::only(kind));
            assert!(
                d.is_none() || d >= full,
                "subset {:?} must not beat the full graph",
                kind
            );
        }
    }

    #[test]
    fn same_needs_strictly_more_than_tau_long_within_passage() {
        let mut tokens = vec!["pad"; 26];
        tokens[0] = "mumbai";
        tokens[10] = "mumbai";
        tokens[25] = "mumbai";
        let inst = make_instance(
            vec![tokens],
            vec![
                (0, 0, "a", MentionKind::Entity),
                (10, 10, "b", MentionKind::Entity),
                (25, 25, "c", MentionKind::Entity),
            ],
            vec!["mumbai"],
            0,
            "a",
        );
        let cfg = GraphConfig {
            tau_long: 10,
            tau_window: 2,
            neighbor_cap: 200,
        };
        let g = build_graph(&inst, &cfg);
        assert!(
            !has_edge(&g, 0, 1, EdgeType::Same),
            "distance 10 equals tau_long, no edge"
        );
        assert!(has_edge(&g, 1, 2, EdgeType::Same), "distance 15 qualifies");
        assert!(has_edge(&g, 0, 2, EdgeType::Same), "distance 25 qualifies");
    }

    #[test]
    fn window_is_inclusive_at_tau_and_same_passage_only() {
        let inst = make_instance(
            vec![vec!["a", "x", "x", "b"], vec!["c"]],
            vec![
                (0, 0, "a", MentionKind::Entity),
                (3, 3, "b", MentionKind::Entity),
                (4, 4, "c", MentionKind::Entity),
            ],
            vec!["b"],
            0,
            "a",
        );
        let at = |tau| {
            let cfg = GraphConfig {
                tau_long: 200,
                tau_window: tau,
                neighbor_cap: 200,
            };
            build_graph(&inst, &cfg)
        };
        assert!(
            has_edge(&at(3), 0, 1, EdgeType::Window),
            "distance 3 at tau 3"
        );
        assert!(
            !has_edge(&at(2), 0, 1, EdgeType::Window),
            "distance 3 at tau 2"
        );
        // b and c are one token apart but in different passages.
        assert!(!has_edge(&at(3), 1, 2, EdgeType::Window));
    }

    #[test]
    fn raising_tau_window_only_adds_edges() {
        let inst = fixture();
        let narrow = build_graph(
            &inst,
            &GraphConfig {
                tau_window: 5,
                ..GraphConfig::default()
            },
        );
        let wide = build_graph(
            &inst,
            &GraphConfig {
                tau_window: 25,
                ..GraphConfig::default()
            },
        );
        for e in &narrow.edges {
            assert!(
                wide.edges.contains(e),
                "edge {:?} lost when widening the window",
                e
            );
        }
        assert!(wide.edges.len() > narrow.edges.len());
    }

    #[test]
    fn raising_tau_long_never_adds_same_edges() {
        let inst = fixture();
        let count_same = |tau| {
            build_graph(
                &inst,
                &GraphConfig {
                    tau_long: tau,
                    ..GraphConfig::default()
                },
            )
            .edge_counts()
            .get(&EdgeType::Same)
            .copied()
            .unwrap_or(0)
        };
        assert!(count_same(5) >= count_same(50));
        assert!(count_same(50) >= count_same(500));
    }

    #[test]
    fn capping_order_and_truncation() {
        // Node 0 at position 0 sees: window neighbors at distances 1 and 2,
        // a coref neighbor at distance 3, and a same neighbor at distance 30
        // in the next passage.
        let mut p1 = vec!["hub"; 10];
        p1[1] = "w1";
        p1[2] = "w2";
        p1[3] = "it";
        let p2 = {
            let mut p = vec!["pad"; 25];
            p[20] = "hub";
            p
        };
        let inst = make_instance(
            vec![p1, p2],
            vec![
                (0, 0, "h", MentionKind::Entity),
                (1, 1, "w1", MentionKind::Entity),
                (2, 2, "w2", MentionKind::Entity),
                (3, 3, "h", MentionKind::Pronoun),
                (30, 30, "h", MentionKind::Entity),
            ],
            vec!["hub"],
            0,
            "h",
        );
        let cfg_for = |cap| GraphConfig {
            tau_long: 200,
            tau_window: 5,
            neighbor_cap: cap,
        };
        let g = build_graph(&inst, &cfg_for(200));
        let order: Vec<usize> = g.adjacency[0].iter().map(|&(n, _)| n).collect();
        // coref at d3 and same at d30 share the priority class and sort by
        // distance; the window pair follows by distance.
        assert_eq!(order, vec![3, 4, 1, 2]);

        let capped = build_graph(&inst, &cfg_for(2));
        let kept: Vec<usize> = capped.adjacency[0].iter().map(|&(n, _)| n).collect();
        assert_eq!(kept, vec![3, 4], "window neighbors dropped first");

        // Reapplying the cap to already-capped adjacency changes nothing.
        let recapped = cap_neighbors(&inst, g.node_count, &capped.edges, &cfg_for(2));
        assert_eq!(recapped, capped.adjacency);
    }

    #[test]
    fn bfs_handles_missing_endpoints() {
        let inst = make_instance(
            vec![vec!["a", "b"]],
            vec![(0, 0, "a", MentionKind::Entity)],
            vec!["zzz"],
            0,
            "a",
        );
        let g = build_graph(&inst, &GraphConfig::default());
        assert_eq!(
            question_answer_distance(&inst, &g, EdgeFilter::all()),
            None,
            "answer never mentioned"
        );

        let inst2 = make_instance(
            vec![vec!["a", "b"]],
            vec![(1, 1, "b", MentionKind::Entity)],
            vec!["b"],
            0,
            "missing-chain",
        );
        let g2 = build_graph(&inst2, &GraphConfig::default());
        assert_eq!(
            question_answer_distance(&inst2, &g2, EdgeFilter::all()),
            None
        );
    }

    #[test]
    fn subject_mention_that_is_the_answer_has_distance_zero() {
        let inst = make_instance(
            vec![vec!["delhi", "x"]],
            vec![(0, 0, "d", MentionKind::Entity)],
            vec!["delhi"],
            0,
            "d",
        );
        let g = build_graph(&inst, &GraphConfig::default());
        assert_eq!(
            question_answer_distance(&inst, &g, EdgeFilter::all()),
            Some(0)
        );
    }

    #[test]
    fn histogram_of_single_instance_concentrates() {
        let inst = fixture();
        let ds = Dataset {
            instances: vec![inst],
        };
        let h = distance_histogram(&ds, &GraphConfig::default(), EdgeFilter::all());
        assert_eq!(h.buckets.get(&3), Some(&1.0));
        assert_eq!(h.unreachable, 0.0);
        let mass: f64 = h.buckets.values().sum::<f64>() + h.unreachable;
        assert!((mass - 1.0).abs() < 1e-12);

        let coref = distance_histogram(
            &ds,
            &GraphConfig::default(),
            EdgeFilter::only(EdgeType::Coref),
        );
        assert_eq!(coref.unreachable, 1.0);
    }

    #[test]
    fn edge_filter_parse_and_display() {
        assert_eq!(EdgeFilter::parse("all").unwrap(), EdgeFilter::all());
        assert_eq!(
            EdgeFilter::parse("same,window").unwrap(),
            EdgeFilter {
                same: true,
                coref: false,
                window: true
            }
        );
        assert!(EdgeFilter::parse("sideways").is_err());
        assert_eq!(EdgeFilter::all().to_string(), "all");
        assert_eq!(EdgeFilter::only(EdgeType::Coref).to_string(), "coref");
    }
}
