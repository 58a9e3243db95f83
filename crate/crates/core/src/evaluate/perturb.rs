use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_words, RawRecord};
use crate::error::{Error, Result};

pub const POSITIONS_PER_INSTANCE: usize = 4;
pub const ADJECTIVES_PER_POSITION: usize = 4;

const DEFAULT_ADJECTIVES: &str = include_str!("../../data/adjectives.txt");
const DEFAULT_NOUNS: &str = include_str!("../../data/nouns.txt");

/// Marks which words of a text are nouns. Input is the word sequence of
/// [`split_words`]; output is the indices of noun words.
pub trait NounTagger {
    fn noun_positions(&self, words: &[&str]) -> Vec<usize>;
}

/// Tags a word as a noun when its lowercase form is in a fixed list.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    nouns: HashSet<String>,
}

impl LexiconTagger {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(nouns: I) -> Self {
        Self {
            nouns: nouns
                .into_iter()
                .map(|n| n.as_ref().to_lowercase())
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(read_word_list(path.as_ref())?))
    }
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::new(parse_word_list(DEFAULT_NOUNS))
    }
}

impl NounTagger for LexiconTagger {
    fn noun_positions(&self, words: &[&str]) -> Vec<usize> {
        words
            .iter()
            .enumerate()
            .filter(|(_, w)| self.nouns.contains(&w.to_lowercase()))
            .map(|(i, _)| i)
            .collect()
    }
}

fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_word_list(&text))
}

/// Adjectives available for insertion, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjectiveLexicon {
    words: Vec<String>,
}

impl AdjectiveLexicon {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let words: Vec<String> = words
            .into_iter()
            .filter(|w| seen.insert(w.clone()))
            .collect();
        if words.len() < ADJECTIVES_PER_POSITION {
            return Err(Error::InvalidArgument(format!(
                "adjective lexicon needs at least {ADJECTIVES_PER_POSITION} distinct words, got {}",
                words.len()
            )));
        }
        Ok(Self { words })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_word_list(path.as_ref())?)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl Default for AdjectiveLexicon {
    fn default() -> Self {
        Self::new(parse_word_list(DEFAULT_ADJECTIVES)).expect("bundled lexicon is large enough")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPart {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedInstance {
    pub base_id: String,
    pub part: InputPart,
    /// Index of the noun among the words of its part.
    pub position: usize,
    pub adjective: String,
    pub record: RawRecord,
}

impl PerturbedInstance {
    pub fn id(&self) -> String {
        self.record.id.clone()
    }

    pub fn perturbed_text(&self) -> String {
        self.record.input_text()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub perturbations: Vec<PerturbedInstance>,
    /// No noun was found, so the instance cannot be tested.
    pub skipped: bool,
}

fn instance_seed(seed: u64, id: &str) -> u64 {
    id.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn insert_before(text: &str, word_index: usize, adjective: &str) -> String {
    let offset = split_words(text)[word_index].1.start;
    format!("{}{adjective} {}", &text[..offset], &text[offset..])
}

/// Insert adjectives before nouns: up to four noun positions, four distinct adjectives
/// each. The choice depends only on `seed`, the instance id and the inputs.
pub fn perturb_instance(
    record: &RawRecord,
    tagger: &dyn NounTagger,
    lexicon: &AdjectiveLexicon,
    seed: u64,
) -> PerturbationSet {
    let mut nouns: Vec<(InputPart, usize)> = Vec::new();
    for (part, text) in [
        (InputPart::A, &record.part_a),
        (InputPart::B, &record.part_b),
    ] {
        let words = split_words(text);
        let words: Vec<&str> = words.iter().map(|(w, _)| w.as_str()).collect();
        nouns.extend(tagger.noun_positions(&words).into_iter().map(|i| (part, i)));
    }
    if nouns.is_empty() {
        return PerturbationSet {
            perturbations: Vec::new(),
            skipped: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, &record.id));
    let mut chosen = sample(
        &mut rng,
        nouns.len(),
        POSITIONS_PER_INSTANCE.min(nouns.len()),
    )
    .into_vec();
    chosen.sort_unstable();
    let mut perturbations = Vec::with_capacity(chosen.len() * ADJECTIVES_PER_POSITION);
    for idx in chosen {
        let (part, position) = nouns[idx];
        for a in sample(&mut rng, lexicon.words.len(), ADJECTIVES_PER_POSITION) {
            let adjective = lexicon.words[a].clone();
            let mut perturbed = record.clone();
            perturbed.id = format!("{}#{}", record.id, perturbations.len());
            match part {
                InputPart::A => {
                    perturbed.part_a = insert_before(&record.part_a, position, &adjective)
                }
                InputPart::B => {
                    perturbed.part_b = insert_before(&record.part_b, position, &adjective)
                }
            }
            perturbations.push(PerturbedInstance {
                base_id: record.id.clone(),
                part,
                position,
                adjective,
                record: perturbed,
            });
        }
    }
    PerturbationSet {
        perturbations,
        skipped: false,
    }
}
