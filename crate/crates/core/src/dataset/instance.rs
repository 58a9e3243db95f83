use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::Segmenter;
use super::RawRecord;
use crate::error::{Error, Result};

/// Split text into words: whitespace-separated runs, with every ASCII punctuation
/// character as its own word. Returns each word with its byte range in `text`.
pub fn split_words(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push((text[s..i].to_string(), s..i));
            }
            if c.is_ascii_punctuation() {
                out.push((c.to_string(), i..i + 1));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_string(), s..text.len()));
    }
    out
}

/// A surface word and the half-open range of subtoken positions it occupies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// A two-part input segmented into subtokens. Positions are 0-based: part A occupies
/// `0..boundary`, part B `boundary..len()`. `target` starts with the single label token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedInstance {
    pub id: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub boundary: usize,
    pub word_map: Vec<WordSpan>,
    pub label: String,
    pub target: Vec<String>,
    pub target_ids: Vec<u32>,
}

impl TokenizedInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn part_b_len(&self) -> usize {
        self.tokens.len() - self.boundary
    }

    pub fn in_part_a(&self, position: usize) -> bool {
        position < self.boundary
    }

    /// The word containing subtoken `position`.
    pub fn word_at(&self, position: usize) -> Option<&WordSpan> {
        let idx = self.word_map.partition_point(|w| w.end <= position);
        self.word_map.get(idx).filter(|w| w.start <= position)
    }
}

fn segment_part<S: Segmenter + ?Sized>(
    text: &str,
    tokenizer: &S,
    offset: usize,
) -> (Vec<String>, Vec<WordSpan>) {
    let mut tokens = Vec::new();
    let mut words = Vec::new();
    for (word, _) in split_words(text) {
        let pieces = tokenizer.segment(&word);
        let start = offset + tokens.len();
        tokens.extend(pieces);
        words.push(WordSpan {
            word,
            start,
            end: offset + tokens.len(),
        });
    }
    (tokens, words)
}

fn truncate_words(words: &mut Vec<WordSpan>, limit: usize) {
    words.retain(|w| w.start < limit);
    if let Some(last) = words.last_mut() {
        last.end = last.end.min(limit);
    }
}

pub fn tokenize_instance<S: Segmenter + ?Sized>(
    record: &RawRecord,
    tokenizer: &S,
) -> Result<TokenizedInstance> {
    tokenize_instance_with(record, tokenizer, None)
}

/// Tokenize a reformulated record. With `max_len`, part B is truncated before part A and
/// neither part drops below one subtoken.
pub fn tokenize_instance_with<S: Segmenter + ?Sized>(
    record: &RawRecord,
    tokenizer: &S,
    max_len: Option<usize>,
) -> Result<TokenizedInstance> {
    let invalid = |message: &str| Error::InvalidInstance {
        id: record.id.clone(),
        message: message.to_string(),
    };
    let (mut a_tokens, mut a_words) = segment_part(&record.part_a, tokenizer, 0);
    if a_tokens.is_empty() {
        return Err(invalid("part A is empty after tokenization"));
    }
    let (mut b_tokens, mut b_words) = segment_part(&record.part_b, tokenizer, 0);
    if b_tokens.is_empty() {
        return Err(invalid("part B is empty after tokenization"));
    }
    if let Some(max) = max_len {
        if max < 2 {
            return Err(invalid("max_len must leave room for both parts"));
        }
        if a_tokens.len() + b_tokens.len() > max {
            let keep_a = a_tokens.len().min(max - 1);
            let keep_b = (max - keep_a).max(1);
            a_tokens.truncate(keep_a);
            truncate_words(&mut a_words, keep_a);
            b_tokens.truncate(keep_b);
            truncate_words(&mut b_words, keep_b);
        }
    }
    let boundary = a_tokens.len();
    for w in &mut b_words {
        w.start += boundary;
        w.end += boundary;
    }
    let mut tokens = a_tokens;
    tokens.extend(b_tokens);
    let mut word_map = a_words;
    word_map.extend(b_words);

    let label = record.gold_label.trim().to_string();
    if !tokenizer.contains(&label) {
        return Err(invalid(&format!(
            "label `{label}` is not a single vocabulary token"
        )));
    }
    let mut target = vec![label.clone()];
    let rest = &record.target_text()[record.gold_label.len()..];
    for (word, _) in split_words(rest) {
        target.extend(tokenizer.segment(&word));
    }

    let token_ids = tokens.iter().map(|t| tokenizer.token_id(t)).collect();
    let target_ids = target.iter().map(|t| tokenizer.token_id(t)).collect();
    Ok(TokenizedInstance {
        id: record.id.clone(),
        tokens,
        token_ids,
        boundary,
        word_map,
        label,
        target,
        target_ids,
    })
}

pub fn write_instance_cache(path: impl AsRef<Path>, instances: &[TokenizedInstance]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_instance_cache(path: impl AsRef<Path>) -> Result<Vec<TokenizedInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
