//! Faithfulness under counterfactual adjective insertion, label accuracy, and lexical
//! and semantic similarity of generated explanations to human references.

mod faithfulness;
mod lexical;
mod perturb;
mod semantic;

pub use faithfulness::{
    compute_unfaithfulness, contains_word, read_prediction_log, records_from_log,
    run_counterfactual_test, write_prediction_log, FaithfulnessRecord, FaithfulnessReport,
    PerturbationOutcome, PerturberConfig, PredictionLogEntry, Rationalizer,
};
pub use lexical::{
    bleu_tokenize, corpus_bleu, lexical_similarity, rouge1_f1, rouge_l_f1, rouge_tokenize,
    LexicalScores,
};
pub use perturb::{
    perturb_instance, AdjectiveLexicon, InputPart, LexiconTagger, NounTagger, PerturbationSet,
    PerturbedInstance, ADJECTIVES_PER_POSITION, POSITIONS_PER_INSTANCE,
};
pub use semantic::{
    greedy_match_f1, semantic_similarity, HashedTrigramEmbedder, SemanticScore, TokenEmbedder,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Corpus BLEU, 0–100.
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
    /// Absent when no embedder was available.
    pub semantic: Option<f64>,
    pub empty_hypotheses: usize,
}

pub fn similarity_report(
    generated: &[String],
    references: &[Vec<String>],
    embedder: Option<&dyn TokenEmbedder>,
) -> Result<SimilarityReport> {
    let lex = lexical_similarity(generated, references)?;
    let (semantic, empty) = match embedder {
        Some(e) => match semantic_similarity(generated, references, e) {
            Ok(s) => (Some(s.score), s.empty_hypotheses),
            Err(err) => {
                log::warn!("semantic similarity omitted: {err}");
                (None, 0)
            }
        },
        None => (None, 0),
    };
    Ok(SimilarityReport {
        bleu: lex.bleu,
        rouge1: lex.rouge1,
        rouge_l: lex.rouge_l,
        semantic,
        empty_hypotheses: empty,
    })
}

/// Percentage of exact label matches.
pub fn label_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(label_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 100.0);
        assert_eq!(label_accuracy(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
        assert_eq!(
            label_accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(),
            75.0
        );
        assert!(label_accuracy(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn report_ranges() {
        let g = vec!["a dog runs".to_string(), "".to_string()];
        let r = vec![
            vec!["a dog runs fast".to_string()],
            vec!["cats sleep".to_string()],
        ];
        let e = HashedTrigramEmbedder::default();
        let rep = similarity_report(&g, &r, Some(&e)).unwrap();
        assert!((0.0..=100.0).contains(&rep.bleu));
        for v in [rep.rouge1, rep.rouge_l, rep.semantic.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(rep.empty_hypotheses, 1);
        assert_eq!(similarity_report(&g, &r, None).unwrap().semantic, None);
    }
}
