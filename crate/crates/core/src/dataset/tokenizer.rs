use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];
const CONTINUATION: &str = "##";

/// Splits a pre-tokenized word into subtokens and maps subtokens to ids.
///
/// Implementations must be deterministic for a fixed vocabulary.
pub trait Segmenter: Send + Sync {
    fn segment(&self, word: &str) -> Vec<String>;
    fn token_id(&self, token: &str) -> u32;
    fn token(&self, id: u32) -> &str;
    fn vocab_size(&self) -> usize;

    fn contains(&self, token: &str) -> bool {
        self.token_id(token) != UNK || token == SPECIALS[UNK as usize]
    }

    fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }
}

/// Greedy longest-match-first subword segmenter with `##` continuation pieces.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordPieceTokenizer {
    /// Build from an explicit token list. The four special tokens are always prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for t in tokens {
            let t = t.into();
            if !index.contains_key(&t) {
                index.insert(t.clone(), vocab.len() as u32);
                vocab.push(t);
            }
        }
        Self { vocab, index }
    }

    /// Build a vocabulary of at most `max_vocab` entries from a corpus.
    ///
    /// Order: specials, `atomic` words (labels must survive as single tokens), every
    /// character seen in both initial and continuation form, then whole words by
    /// descending frequency. Characters are dropped from the tail if the budget is
    /// too tight, in which case unseen words map to `[UNK]`.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        atomic: &[String],
        max_vocab: usize,
    ) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for (w, _) in super::split_words(text) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut chars: Vec<char> = freq.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();

        let mut words: Vec<(&String, &usize)> = freq.iter().collect();
        words.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));

        let budget = max_vocab.saturating_sub(SPECIALS.len());
        let mut tokens: Vec<String> = Vec::new();
        let push = |t: String, tokens: &mut Vec<String>| {
            if tokens.len() < budget && !tokens.contains(&t) {
                tokens.push(t);
            }
        };
        for a in atomic {
            push(a.clone(), &mut tokens);
        }
        for (w, _) in &words {
            if w.chars().count() > 1 {
                continue;
            }
            push((*w).clone(), &mut tokens);
        }
        let reserve_chars = chars.len() * 2;
        let word_budget = budget.saturating_sub(tokens.len() + reserve_chars);
        let mut n_words = 0;
        for (w, _) in &words {
            if n_words >= word_budget {
                break;
            }
            if w.chars().count() > 1 && !tokens.contains(w) {
                tokens.push((*w).clone());
                n_words += 1;
            }
        }
        for c in &chars {
            push(c.to_string(), &mut tokens);
            push(format!("{CONTINUATION}{c}"), &mut tokens);
        }
        Self::from_tokens(tokens)
    }

    /// One token per line, id = line number.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.vocab.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary must start with the special tokens".into(),
            });
        }
        Ok(Self::from_tokens(lines[SPECIALS.len()..].iter().copied()))
    }

    pub fn tokens(&self) -> &[String] {
        &self.vocab
    }
}

impl Segmenter for WordPieceTokenizer {
    fn segment(&self, word: &str) -> Vec<String> {
        if self.index.contains_key(word) {
            return vec![word.to_string()];
        }
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let from = chars[start].0;
                let to = chars.get(end).map_or(word.len(), |c| c.0);
                let piece = if start == 0 {
                    word[from..to].to_string()
                } else {
                    format!("{CONTINUATION}{}", &word[from..to])
                };
                if self.index.contains_key(&piece) {
                    found = Some(piece);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => return vec![SPECIALS[UNK as usize].to_string()],
            }
        }
        pieces
    }

    fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    fn token(&self, id: u32) -> &str {
        self.vocab
            .get(id as usize)
            .map_or(SPECIALS[UNK as usize], |s| s.as_str())
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

fn is_punct_token(t: &str) -> bool {
    let mut chars = t.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if c.is_ascii_punctuation())
}

/// Turn subtokens back into text: `##` pieces glue to the previous token, closing
/// punctuation attaches without a space, specials are dropped.
pub fn decode_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if SPECIALS.contains(&t) {
            continue;
        }
        if let Some(rest) = t.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else if is_punct_token(t) && !matches!(t, "(" | "[" | "\"") {
            out.push_str(t);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_unknown_word_into_pieces() {
        let tok = WordPieceTokenizer::from_tokens(["amar", "##anth", "##ine", "humidity"]);
        assert_eq!(tok.segment("amaranthine"), vec!["amar", "##anth", "##ine"]);
        assert_eq!(tok.segment("humidity"), vec!["humidity"]);
        assert_eq!(tok.segment("xyz"), vec!["[UNK]"]);
    }

    #[test]
    fn built_vocab_respects_budget_and_keeps_atomic_labels() {
        let corpus = ["the cat sat on the mat", "a dog sat on a log"];
        let tok = WordPieceTokenizer::build(corpus, &["Contradiction".into()], 60);
        assert!(tok.vocab_size() <= 60);
        assert_eq!(tok.segment("Contradiction"), vec!["Contradiction"]);
        assert_eq!(tok.segment("the"), vec!["the"]);
        // "cog" never occurs but is spelled from characters
        assert_eq!(tok.segment("cog"), vec!["c", "##o", "##g"]);
    }

    #[test]
    fn decode_glues_pieces_and_punctuation() {
        let toks = [
            "Contradiction",
            ".",
            "the",
            "amar",
            "##anth",
            "##ine",
            "cat",
            ",",
            "ok",
            ".",
        ];
        assert_eq!(
            decode_tokens(&toks),
            "Contradiction. the amaranthine cat, ok."
        );
    }

    #[test]
    fn vocab_file_round_trips() {
        let tok = WordPieceTokenizer::from_tokens(["a", "##b", "label"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        let back = WordPieceTokenizer::load(&p).unwrap();
        assert_eq!(back.tokens(), tok.tokens());
    }
}
