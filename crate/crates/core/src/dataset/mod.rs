//! Task records, the two-part text-to-text reformulation and tokenized instances.

mod instance;
mod tokenizer;

pub use instance::{
    read_instance_cache, split_words, tokenize_instance, tokenize_instance_with,
    write_instance_cache, TokenizedInstance, WordSpan,
};
pub use tokenizer::{decode_tokens, Segmenter, WordPieceTokenizer, BOS, EOS, PAD, UNK};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed first input part for every ComVE instance.
pub const COMVE_QUESTION: &str = "Which statement of the two is against common sense?";

const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nli,
    Comve,
    Ecqa,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nli" | "esnli" | "e-snli" => Ok(Task::Nli),
            "comve" => Ok(Task::Comve),
            "ecqa" => Ok(Task::Ecqa),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Nli => "nli",
            Task::Comve => "comve",
            Task::Ecqa => "ecqa",
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

fn one_or_many<'de, D>(deserializer: D) -> std::result::Result<Vec<String>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Ok(match OneOrMany::deserialize(deserializer)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

/// One task example. `gold_nle` keeps every reference explanation; training uses the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub part_a: String,
    pub part_b: String,
    pub gold_label: String,
    #[serde(deserialize_with = "one_or_many")]
    pub gold_nle: Vec<String>,
}

impl RawRecord {
    /// The full input text, part A followed by part B.
    pub fn input_text(&self) -> String {
        format!("{} {}", self.part_a, self.part_b)
    }

    /// The self-rationalization target, `"<label>. <explanation>"`.
    pub fn target_text(&self) -> String {
        match self.gold_nle.first().map(|s| s.trim()) {
            Some(nle) if !nle.is_empty() => format!("{}. {}", self.gold_label, nle),
            _ => format!("{}.", self.gold_label),
        }
    }
}

fn ecqa_choices(part_b: &str) -> Vec<String> {
    part_b
        .split([',', '|', ';', '\n'])
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn validate_label(record: &RawRecord, task: Task) -> Result<()> {
    let label = record.gold_label.trim();
    let ok = match task {
        Task::Nli => NLI_LABELS.iter().any(|l| l.eq_ignore_ascii_case(label)),
        Task::Comve => label == "1" || label == "2",
        Task::Ecqa => ecqa_choices(&record.part_b)
            .iter()
            .any(|c| c.eq_ignore_ascii_case(label)),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::UnknownLabel {
            id: record.id.clone(),
            label: record.gold_label.clone(),
            task: task.to_string(),
        })
    }
}

/// Read a line-delimited JSON record file. Blank lines are skipped; every other line must
/// parse as a [`RawRecord`] whose label belongs to `task`.
pub fn load_dataset(path: impl AsRef<Path>, task: Task) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        validate_label(&record, task).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn with_prefix(text: &str, prefix: &str) -> String {
    let text = text.trim();
    if text.starts_with(prefix) {
        text.to_string()
    } else {
        format!("{prefix}{text}")
    }
}

fn capitalize(label: &str) -> String {
    let lower = label.trim().to_lowercase();
    let mut chars = lower.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => lower,
    }
}

/// Rewrite a record into the two-part text-to-text format of its task. Idempotent.
pub fn reformulate(record: &RawRecord, task: Task) -> Result<RawRecord> {
    let mut out = record.clone();
    match task {
        Task::Nli => {
            out.part_a = with_prefix(&record.part_a, "Premise: ");
            out.part_b = with_prefix(&record.part_b, "Hypothesis: ");
            out.gold_label = capitalize(&record.gold_label);
        }
        Task::Comve => {
            if record.part_a.trim() != COMVE_QUESTION {
                out.part_a = COMVE_QUESTION.to_string();
                out.part_b = format!("1. {}\n2. {}", record.part_a.trim(), record.part_b.trim());
            }
            out.gold_label = record.gold_label.trim().to_string();
        }
        Task::Ecqa => {
            out.part_a = record.part_a.trim().to_string();
            out.part_b = ecqa_choices(&record.part_b).join(", ");
            out.gold_label = record.gold_label.trim().to_string();
        }
    }
    if out.part_a.is_empty() || out.part_b.is_empty() {
        return Err(Error::InvalidInstance {
            id: record.id.clone(),
            message: "empty input part after reformulation".into(),
        });
    }
    Ok(out)
}
