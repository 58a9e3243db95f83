use crate::error::{Error, Result};

use super::lexical::rouge_tokenize;

/// Maps a token to a vector. Implementations may wrap a contextual encoder; the
/// default is [`HashedTrigramEmbedder`].
pub trait TokenEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Bag of hashed character trigrams of `#token#`, L2-normalised. Deterministic and
/// dependency-free; morphologically related words land close together.
#[derive(Debug, Clone, Copy)]
pub struct HashedTrigramEmbedder {
    pub dim: usize,
}

impl Default for HashedTrigramEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TokenEmbedder for HashedTrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens
            .iter()
            .map(|t| {
                let padded: Vec<char> = format!("#{t}#").chars().collect();
                let mut v = vec![0.0; self.dim];
                for w in padded.windows(3.min(padded.len())) {
                    let s: String = w.iter().collect();
                    v[(fnv1a(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching F-score between two texts: each token is matched to its most
/// similar counterpart, precision and recall are the mean best similarities.
pub fn greedy_match_f1(hyp: &str, reference: &str, embedder: &dyn TokenEmbedder) -> Result<f64> {
    let h = embedder.embed(&rouge_tokenize(hyp))?;
    let r = embedder.embed(&rouge_tokenize(reference))?;
    if h.is_empty() || r.is_empty() {
        return Ok(0.0);
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter()
            .map(|x| to.iter().map(|y| cosine(x, y)).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&h, &r);
    let rc = best(&r, &h);
    if p + rc <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * p * rc / (p + rc)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScore {
    pub score: f64,
    /// Hypotheses with no scorable tokens; each contributes 0.
    pub empty_hypotheses: usize,
}

/// Mean over instances of the best greedy-matching F-score against any reference.
pub fn semantic_similarity(
    generated: &[String],
    references: &[Vec<String>],
    embedder: &dyn TokenEmbedder,
) -> Result<SemanticScore> {
    if generated.is_empty() {
        return Err(Error::Empty("hypothesis list".into()));
    }
    if generated.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypotheses for {} reference sets",
            generated.len(),
            references.len()
        )));
    }
    let mut total = 0.0;
    let mut empty = 0;
    for (h, refs) in generated.iter().zip(references) {
        if rouge_tokenize(h).is_empty() {
            empty += 1;
            continue;
        }
        let mut best = 0.0f64;
        for r in refs {
            best = best.max(greedy_match_f1(h, r, embedder)?);
        }
        total += best;
    }
    Ok(SemanticScore {
        score: total / generated.len() as f64,
        empty_hypotheses: empty,
    })
}
