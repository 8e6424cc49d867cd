use std::collections::HashMap;

use qshape_core::envs::EnvSchema;
use qshape_core::qlearn::{GuidanceSet, GuidanceTriple};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sanitized {
    pub set: GuidanceSet,
    /// Out-of-range ids or non-finite values.
    pub dropped: usize,
    pub clamped: usize,
    /// Earlier triples replaced by a later one at the same pair.
    pub duplicates: usize,
    /// Nothing usable survived.
    pub all_dropped: bool,
}

/// Drops unusable triples, clamps values to `[-cap, cap]` and keeps only
/// the last triple per pair, in order of that last occurrence.
pub fn sanitize_guidance(dg: &GuidanceSet, schema: &EnvSchema, cap: f64) -> Sanitized {
    let mut dropped = 0;
    let mut clamped = 0;
    let mut kept: Vec<GuidanceTriple> = Vec::with_capacity(dg.triples.len());
    for t in &dg.triples {
        if t.state >= schema.n_states || t.action >= schema.n_actions || !t.q_value.is_finite() {
            dropped += 1;
            continue;
        }
        let q = t.q_value.clamp(-cap, cap);
        if q != t.q_value {
            clamped += 1;
        }
        kept.push(GuidanceTriple::new(t.state, t.action, q));
    }
    let mut last: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, t) in kept.iter().enumerate() {
        last.insert((t.state, t.action), i);
    }
    let duplicates = kept.len() - last.len();
    let triples: Vec<GuidanceTriple> = kept
        .iter()
        .enumerate()
        .filter(|(i, t)| last[&(t.state, t.action)] == *i)
        .map(|(_, t)| *t)
        .collect();
    let all_dropped = triples.is_empty();
    if all_dropped && !dg.triples.is_empty() {
        tracing::warn!(guidance_id = dg.id, dropped, "every guidance triple was dropped");
    }
    Sanitized {
        set: GuidanceSet { triples, ..dg.clone() },
        dropped,
        clamped,
        duplicates,
        all_dropped,
    }
}
