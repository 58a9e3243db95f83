use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::perturb::{perturb_instance, AdjectiveLexicon, NounTagger};
use crate::dataset::{split_words, RawRecord};
use crate::error::{Error, Result};
use crate::trainer::GenerationOutput;

/// Anything that maps an input record to a label and an explanation.
pub trait Rationalizer {
    fn rationalize(&mut self, record: &RawRecord) -> Result<GenerationOutput>;
}

pub struct PerturberConfig<'a> {
    pub tagger: &'a dyn NounTagger,
    pub lexicon: &'a AdjectiveLexicon,
    pub seed: u64,
}

/// One line of the replayable prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLogEntry {
    pub base_id: String,
    pub perturbation_id: String,
    pub original_label: String,
    pub inserted_word: String,
    pub new_label: Option<String>,
    pub new_nle: Option<String>,
    /// Generation failed or produced an unparsable output.
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub label_changed: bool,
    pub word_in_nle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub base_id: String,
    pub outcomes: Vec<PerturbationOutcome>,
    /// Perturbations excluded because generation failed.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub counter_unfaith: f64,
    pub total_unfaith: f64,
    pub n_total: usize,
    pub n_changed: usize,
    pub n_unfaithful: usize,
    /// Set when no instance changed its label; `counter_unfaith` is then 0.
    pub degenerate: bool,
    /// Instances without a single usable perturbation, left out of every count.
    pub n_untested: usize,
    pub failed_perturbations: usize,
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// Case-insensitive whole-word match after stripping punctuation.
pub fn contains_word(text: &str, word: &str) -> bool {
    let target = normalize_word(word);
    !target.is_empty()
        && split_words(text)
            .iter()
            .any(|(w, _)| normalize_word(w) == target)
}

impl PredictionLogEntry {
    pub fn outcome(&self) -> Option<PerturbationOutcome> {
        if self.failed {
            return None;
        }
        let label = self.new_label.as_deref()?;
        Some(PerturbationOutcome {
            label_changed: label.trim() != self.original_label.trim(),
            word_in_nle: contains_word(self.new_nle.as_deref().unwrap_or(""), &self.inserted_word),
        })
    }
}

/// Group log entries by base instance, in first-seen order.
pub fn records_from_log(log: &[PredictionLogEntry]) -> Vec<FaithfulnessRecord> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, FaithfulnessRecord> = BTreeMap::new();
    for e in log {
        let rec = by_id.entry(e.base_id.clone()).or_insert_with(|| {
            order.push(e.base_id.clone());
            FaithfulnessRecord {
                base_id: e.base_id.clone(),
                outcomes: Vec::new(),
                failures: 0,
            }
        });
        match e.outcome() {
            Some(o) => rec.outcomes.push(o),
            None => rec.failures += 1,
        }
    }
    order
        .into_iter()
        .filter_map(|id| by_id.remove(&id))
        .collect()
}

/// Perturb each instance, regenerate, and log whether the label moved and whether the
/// inserted adjective shows up in the new explanation. Instances whose original input
/// cannot be generated are logged with every perturbation marked failed.
pub fn run_counterfactual_test(
    model: &mut dyn Rationalizer,
    instances: &[RawRecord],
    config: &PerturberConfig,
) -> Result<Vec<PredictionLogEntry>> {
    let mut log = Vec::new();
    for record in instances {
        let set = perturb_instance(record, config.tagger, config.lexicon, config.seed);
        if set.skipped {
            log::debug!("{}: no nouns, skipped", record.id);
            continue;
        }
        let original = model.rationalize(record).ok().filter(|o| !o.flagged);
        for p in set.perturbations {
            let mut entry = PredictionLogEntry {
                base_id: record.id.clone(),
                perturbation_id: p.id(),
                original_label: original
                    .as_ref()
                    .map(|o| o.label.clone())
                    .unwrap_or_default(),
                inserted_word: p.adjective.clone(),
                new_label: None,
                new_nle: None,
                failed: true,
            };
            if original.is_some() {
                match model.rationalize(&p.record) {
                    Ok(out) if !out.flagged => {
                        entry.new_label = Some(out.label);
                        entry.new_nle = Some(out.nle);
                        entry.failed = false;
                    }
                    Ok(_) => log::warn!("{}: unparsable output", p.id()),
                    Err(e) => log::warn!("{}: generation failed: {e}", p.id()),
                }
            }
            log.push(entry);
        }
    }
    Ok(log)
}

/// Counter Unfaith is the share of label-changing instances that are unfaithful; Total
/// Unfaith divides the same count by all tested instances. An instance is unfaithful
/// when some perturbation changed its label without the new explanation mentioning
/// the inserted word.
pub fn compute_unfaithfulness(records: &[FaithfulnessRecord]) -> Result<FaithfulnessReport> {
    if records.is_empty() {
        return Err(Error::Empty("faithfulness records".into()));
    }
    let tested: Vec<&FaithfulnessRecord> =
        records.iter().filter(|r| !r.outcomes.is_empty()).collect();
    let n_total = tested.len();
    let n_changed = tested
        .iter()
        .filter(|r| r.outcomes.iter().any(|o| o.label_changed))
        .count();
    let n_unfaithful = tested
        .iter()
        .filter(|r| r.outcomes.iter().any(|o| o.label_changed && !o.word_in_nle))
        .count();
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    Ok(FaithfulnessReport {
        counter_unfaith: pct(n_unfaithful, n_changed),
        total_unfaith: pct(n_unfaithful, n_total),
        n_total,
        n_changed,
        n_unfaithful,
        degenerate: n_changed == 0,
        n_untested: records.len() - n_total,
        failed_perturbations: records.iter().map(|r| r.failures).sum(),
    })
}

pub fn write_prediction_log(path: impl AsRef<Path>, log: &[PredictionLogEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_prediction_log(path: impl AsRef<Path>) -> Result<Vec<PredictionLogEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut log = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        log.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(log)
}
