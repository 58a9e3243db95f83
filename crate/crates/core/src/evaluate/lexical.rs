use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Mixed-case tokenization in the style of the `13a` scheme: punctuation becomes its
/// own token except for `.` and `,` between digits.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut spaced = String::with_capacity(text.len() * 2);
    for (i, &c) in chars.iter().enumerate() {
        let numeric_sep = matches!(c, '.' | ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_ascii_punctuation() && !numeric_sep {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_shapes(generated: &[String], references: &[Vec<String>]) -> Result<()> {
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
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Empty(format!("reference set {i}")));
    }
    Ok(())
}

/// Corpus BLEU on a 0–100 scale with exponential smoothing of zero n-gram counts and
/// the closest-reference-length brevity penalty.
pub fn corpus_bleu(generated: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_shapes(generated, references)?;
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in generated.iter().zip(references) {
        let hyp = bleu_tokenize(hyp);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| bleu_tokenize(r)).collect();
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let hyp_counts = ngram_counts(&hyp, n);
            correct[n - 1] += hyp_counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if correct[0] == 0 {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            return Ok(0.0);
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((bp * (log_sum / MAX_ORDER as f64).exp()).min(100.0))
}

/// Lowercase alphanumeric tokenization used by the ROUGE scores.
pub fn rouge_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn f1(overlap: usize, hyp: usize, reference: usize) -> f64 {
    if overlap == 0 || hyp == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge1_f1(hyp: &str, reference: &str) -> f64 {
    let h = rouge_tokenize(hyp);
    let r = rouge_tokenize(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &h {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap, h.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l_f1(hyp: &str, reference: &str) -> f64 {
    let h = rouge_tokenize(hyp);
    let r = rouge_tokenize(reference);
    f1(lcs_len(&h, &r), h.len(), r.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalScores {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
}

/// Corpus BLEU plus per-instance ROUGE-1 / ROUGE-L F1 (best reference), averaged.
pub fn lexical_similarity(
    generated: &[String],
    references: &[Vec<String>],
) -> Result<LexicalScores> {
    let bleu = corpus_bleu(generated, references)?;
    let best = |f: fn(&str, &str) -> f64| -> f64 {
        generated
            .iter()
            .zip(references)
            .map(|(h, refs)| refs.iter().map(|r| f(h, r)).fold(0.0, f64::max))
            .sum::<f64>()
            / generated.len() as f64
    };
    Ok(LexicalScores {
        bleu,
        rouge1: best(rouge1_f1),
        rouge_l: best(rouge_l_f1),
    })
}
