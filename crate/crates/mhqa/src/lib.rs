//! Multi-hop question answering over multiple passages.
//!
//! Candidate answers are scored by encoding the concatenated passages with
//! recurrent encoders, connecting entity mentions into an evidence graph
//! (same-string, coreference, and window edges), propagating mention states
//! over that graph, and matching every candidate-linked mention against the
//! question. Everything trains end to end through a small reverse-mode
//! autodiff tape.

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod graph;
pub mod graph_encoders;
pub mod matcher;
pub mod model;
pub mod synth;
pub mod train;

/// Derive an independent stream seed from a base seed and a tag (FNV-1a).
/// Used for per-parameter init, per-epoch shuffles, per-instance dropout
/// masks, and per-instance generation, so streams never alias.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
