//! A small synthetic two-part NLI corpus whose labels and explanations follow from the
//! input by simple rules, for smoke-testing the whole pipeline on a toy model.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    reformulate, tokenize_instance, RawRecord, Task, TokenizedInstance, WordPieceTokenizer,
};
use crate::error::Result;

const SUBJECTS: [&str; 8] = ["man", "woman", "dog", "cat", "child", "boy", "girl", "bird"];
const VERBS: [&str; 6] = ["runs", "sleeps", "eats", "sits", "plays", "waits"];
const PLACES: [&str; 6] = ["park", "house", "street", "beach", "garden", "kitchen"];
const COMPANIONS: [&str; 4] = ["friend", "teacher", "dog", "family"];

pub const TOY_VOCAB_LIMIT: usize = 200;

/// `n` raw NLI records (before reformulation), balanced over the three labels.
pub fn synthetic_nli(n: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subject = *SUBJECTS.choose(&mut rng).expect("non-empty");
            let verb = *VERBS.choose(&mut rng).expect("non-empty");
            let place = *PLACES.choose(&mut rng).expect("non-empty");
            let premise = format!("A {subject} {verb} in the {place}.");
            let (label, hypothesis, nle) = match i % 3 {
                0 => (
                    "entailment",
                    format!("A {subject} {verb}."),
                    format!("the {subject} {verb} in the {place}."),
                ),
                1 => {
                    let other = loop {
                        let v = VERBS[rng.random_range(0..VERBS.len())];
                        if v != verb {
                            break v;
                        }
                    };
                    (
                        "contradiction",
                        format!("A {subject} {other}."),
                        format!("the {subject} {verb}, it never {other}."),
                    )
                }
                _ => {
                    let companion = *COMPANIONS.choose(&mut rng).expect("non-empty");
                    (
                        "neutral",
                        format!("A {subject} {verb} with a {companion}."),
                        format!("not every {subject} {verb} with a {companion}."),
                    )
                }
            };
            RawRecord {
                id: format!("syn-{i:04}"),
                part_a: premise,
                part_b: hypothesis,
                gold_label: label.to_string(),
                gold_nle: vec![nle],
            }
        })
        .collect()
}

/// Reformulated records, a tokenizer built from them and the tokenized instances.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub records: Vec<RawRecord>,
    pub tokenizer: WordPieceTokenizer,
    pub instances: Vec<TokenizedInstance>,
}

pub fn toy_corpus(n: usize, seed: u64) -> Result<ToyCorpus> {
    let records = synthetic_nli(n, seed)
        .iter()
        .map(|r| reformulate(r, Task::Nli))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = ["Entailment", "Neutral", "Contradiction"]
        .map(String::from)
        .to_vec();
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| [r.part_a.clone(), r.part_b.clone(), r.gold_nle[0].clone()])
        .collect();
    let tokenizer =
        WordPieceTokenizer::build(texts.iter().map(String::as_str), &labels, TOY_VOCAB_LIMIT);
    let instances = records
        .iter()
        .map(|r| tokenize_instance(r, &tokenizer))
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyCorpus {
        records,
        tokenizer,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Segmenter, UNK};

    #[test]
    fn corpus_fits_toy_profile() {
        let c = toy_corpus(200, 0).unwrap();
        assert_eq!(c.instances.len(), 200);
        assert!(c.tokenizer.vocab_size() <= TOY_VOCAB_LIMIT);
        assert!(c.instances.iter().all(|i| i
            .token_ids
            .iter()
            .chain(&i.target_ids)
            .all(|&t| t != UNK)));
        let labels: std::collections::BTreeSet<_> =
            c.instances.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(synthetic_nli(10, 4), synthetic_nli(10, 4));
        assert_ne!(synthetic_nli(10, 4), synthetic_nli(10, 5));
    }
}
