use std::collections::HashMap;

use super::louvain::{louvain_partition, WeightedGraph};
use super::{SpanInteractionSet, SpanPairScore, TokenInteractionSet, TokenSpan};
use crate::error::{Error, Result};

/// Maximal runs of consecutive positions in a sorted list.
fn contiguous_runs(sorted: &[usize]) -> Vec<TokenSpan> {
    let mut runs: Vec<TokenSpan> = Vec::new();
    for &p in sorted {
        match runs.last_mut() {
            Some(r) if r.end == p => r.end += 1,
            _ => runs.push(TokenSpan::new(p, p + 1)),
        }
    }
    runs
}

/// Group token interactions into span pairs. The interaction scores weight a token
/// graph, Louvain finds communities, each community's tokens are cut into maximal
/// contiguous spans per input part, and every (part-A span, part-B span) pair inside a
/// community is scored by the mean of its constituent pair scores.
pub fn span_interactions(
    interactions: &TokenInteractionSet,
    boundary: usize,
) -> Result<SpanInteractionSet> {
    if interactions.entries.is_empty() {
        return Err(Error::Empty("token interaction set".into()));
    }
    let n = interactions.tokens;
    let mut graph = WeightedGraph::new(n);
    let mut score: HashMap<(usize, usize), f64> = HashMap::new();
    for e in &interactions.entries {
        if e.i >= n || e.j >= n {
            return Err(Error::IndexOutOfRange {
                index: e.i.max(e.j),
                len: n,
            });
        }
        graph.add_edge(e.i, e.j, e.score.max(0.0));
        score.insert((e.i.min(e.j), e.i.max(e.j)), e.score);
    }

    let communities = louvain_partition(&graph).communities();
    Ok(SpanInteractionSet {
        entries: pairs_within_communities(&communities, boundary, &score),
    })
}

/// Cross-part span pairs inside each community. Communities confined to one part yield nothing.
fn pairs_within_communities(
    communities: &[Vec<usize>],
    boundary: usize,
    score: &HashMap<(usize, usize), f64>,
) -> Vec<SpanPairScore> {
    let mut entries = Vec::new();
    for community in communities {
        let (a, b): (Vec<usize>, Vec<usize>) = community.iter().partition(|&&t| t < boundary);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        for span_a in contiguous_runs(&a) {
            for span_b in contiguous_runs(&b) {
                let scores: Vec<f64> = span_a
                    .positions()
                    .flat_map(|i| span_b.positions().map(move |j| (i, j)))
                    .filter_map(|k| score.get(&k).copied())
                    .collect();
                if scores.is_empty() {
                    continue;
                }
                entries.push(SpanPairScore {
                    span_a,
                    span_b,
                    score: scores.iter().sum::<f64>() / scores.len() as f64,
                });
            }
        }
    }
    entries
}
