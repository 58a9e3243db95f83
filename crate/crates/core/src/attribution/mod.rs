//! Highlight explanations from captured attention: head selection, token importance,
//! cross-part token interactions and span interactions.

mod louvain;
mod spans;

pub use louvain::{louvain_partition, modularity, Partition, WeightedGraph};
pub use spans::span_interactions;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-4;

/// Which attention block a snapshot was captured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Final encoder layer self-attention, queries are input tokens (square matrices).
    #[default]
    EncoderSelf,
    /// Final decoder layer cross-attention at the label step, one query row per decoded step.
    DecoderCross,
}

/// Per-head attention over the input tokens of one instance plus the sign of each
/// token's contribution to the predicted label logit.
///
/// `weights` is row-major `[head][query][token]`, `contributions` is `[head][token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub instance_id: String,
    #[serde(default)]
    pub source: AttentionSource,
    pub heads: usize,
    pub queries: usize,
    pub tokens: usize,
    pub boundary: usize,
    pub weights: Vec<f64>,
    pub contributions: Vec<i8>,
}

impl AttentionSnapshot {
    /// Build a square (self-attention) snapshot from nested `[head][query][token]` rows.
    pub fn from_heads(
        instance_id: impl Into<String>,
        boundary: usize,
        heads: &[Vec<Vec<f64>>],
        contributions: &[Vec<i8>],
    ) -> Result<Self> {
        let n_heads = heads.len();
        let queries = heads.first().map_or(0, |h| h.len());
        let tokens = heads.first().and_then(|h| h.first()).map_or(0, |r| r.len());
        let snap = Self {
            instance_id: instance_id.into(),
            source: if queries == tokens {
                AttentionSource::EncoderSelf
            } else {
                AttentionSource::DecoderCross
            },
            heads: n_heads,
            queries,
            tokens,
            boundary,
            weights: heads.iter().flatten().flatten().copied().collect(),
            contributions: contributions.iter().flatten().copied().collect(),
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSnapshot(m));
        if self.heads == 0 {
            return bad("head count must be at least 1".into());
        }
        if self.tokens == 0 || self.queries == 0 {
            return bad("empty attention matrix".into());
        }
        if self.source == AttentionSource::EncoderSelf && self.queries != self.tokens {
            return bad(format!(
                "self-attention snapshot must be square, got {}x{}",
                self.queries, self.tokens
            ));
        }
        if self.weights.len() != self.heads * self.queries * self.tokens {
            return bad(format!(
                "expected {} weights, found {}",
                self.heads * self.queries * self.tokens,
                self.weights.len()
            ));
        }
        if self.contributions.len() != self.heads * self.tokens {
            return bad(format!(
                "expected {} contribution signs, found {}",
                self.heads * self.tokens,
                self.contributions.len()
            ));
        }
        if self.boundary == 0 || self.boundary > self.tokens {
            return bad(format!(
                "boundary {} outside 1..={}",
                self.boundary, self.tokens
            ));
        }
        for (r, row) in self.weights.chunks(self.tokens).enumerate() {
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("row {r} sums to {sum}"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, head: usize, query: usize, token: usize) -> f64 {
        self.weights[(head * self.queries + query) * self.tokens + token]
    }

    #[inline]
    pub fn contribution(&self, head: usize, token: usize) -> i8 {
        self.contributions[head * self.tokens + token]
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads {
            return Err(Error::IndexOutOfRange {
                index: head,
                len: self.heads,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let snap: Self = serde_json::from_slice(&bytes)?;
        snap.validate()?;
        Ok(snap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSelection {
    pub head: usize,
    pub score: f64,
    /// Set when no head has a positively contributing token.
    pub degenerate: bool,
}

/// Pick the head whose positively contributing tokens receive the most attention:
/// `S_h = sum over tokens k with c[h][k] > 0 of mean_q w[h][q][k]`. Ties go to the lowest head.
pub fn select_head(snapshot: &AttentionSnapshot) -> HeadSelection {
    let q = snapshot.queries as f64;
    let mut best = HeadSelection {
        head: 0,
        score: f64::NEG_INFINITY,
        degenerate: false,
    };
    for h in 0..snapshot.heads {
        let score: f64 = (0..snapshot.tokens)
            .filter(|&k| snapshot.contribution(h, k) > 0)
            .map(|k| {
                (0..snapshot.queries)
                    .map(|qi| snapshot.weight(h, qi, k))
                    .sum::<f64>()
                    / q
            })
            .sum();
        if score > best.score {
            best = HeadSelection {
                head: h,
                score,
                degenerate: false,
            };
        }
    }
    if best.score <= 0.0 {
        log::debug!(
            "{}: no positively contributing tokens, falling back to head 0",
            snapshot.instance_id
        );
        best = HeadSelection {
            head: 0,
            score: 0.0,
            degenerate: true,
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HighlightTokenSet {
    pub entries: Vec<TokenScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Scores for every (part-A token, part-B token) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInteractionSet {
    pub tokens: usize,
    pub boundary: usize,
    pub entries: Vec<PairScore>,
}

/// Half-open range of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPairScore {
    pub span_a: TokenSpan,
    pub span_b: TokenSpan,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpanInteractionSet {
    pub entries: Vec<SpanPairScore>,
}

/// Importance of each input token: the mean attention it receives from every other
/// query position. Cross-attention snapshots average over all decoder queries.
pub fn token_importance(snapshot: &AttentionSnapshot, head: usize) -> Result<HighlightTokenSet> {
    snapshot.check_head(head)?;
    let square = snapshot.source == AttentionSource::EncoderSelf;
    if square && snapshot.tokens < 2 {
        return Err(Error::InvalidSnapshot(
            "token importance needs at least two tokens".into(),
        ));
    }
    let entries = (0..snapshot.tokens)
        .map(|i| {
            let (sum, count) = (0..snapshot.queries)
                .filter(|&q| !square || q != i)
                .fold((0.0, 0usize), |(s, c), q| {
                    (s + snapshot.weight(head, q, i), c + 1)
                });
            TokenScore {
                index: i,
                score: sum / count as f64,
            }
        })
        .collect();
    Ok(HighlightTokenSet { entries })
}

/// Interaction score of every cross-part pair: the mean of the two directed weights.
pub fn token_interactions(
    snapshot: &AttentionSnapshot,
    head: usize,
) -> Result<TokenInteractionSet> {
    snapshot.check_head(head)?;
    if snapshot.source != AttentionSource::EncoderSelf {
        return Err(Error::InvalidSnapshot(
            "token interactions need token-to-token (self) attention".into(),
        ));
    }
    let m = snapshot.boundary;
    if m >= snapshot.tokens {
        return Err(Error::InvalidSnapshot(format!(
            "part B is empty (boundary {m}, {} tokens)",
            snapshot.tokens
        )));
    }
    let mut entries = Vec::with_capacity(m * (snapshot.tokens - m));
    for i in 0..m {
        for j in m..snapshot.tokens {
            let score = 0.5 * (snapshot.weight(head, i, j) + snapshot.weight(head, j, i));
            entries.push(PairScore { i, j, score });
        }
    }
    Ok(TokenInteractionSet {
        tokens: snapshot.tokens,
        boundary: m,
        entries,
    })
}
