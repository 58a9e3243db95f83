use std::cmp::Ordering;
use std::collections::BTreeSet;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_tokens, RawRecord, Segmenter, TokenizedInstance, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graphbuild::{ExplanationGraph, ExplanationSelection};
use crate::model::Seq2Seq;

pub const PROMPT_PREFIX: &str = "The most important tokens are:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub instance_id: String,
    pub label: String,
    pub nle: String,
    pub text: String,
    /// The output was empty or had no `". "` delimiter.
    pub flagged: bool,
}

/// Split a decoded string into label and explanation at the first `". "`.
pub fn parse_output(instance_id: &str, text: &str) -> GenerationOutput {
    let text = text.trim();
    let (label, nle, flagged) = match text.find(". ") {
        Some(i) => (&text[..i], text[i + 2..].trim(), false),
        None => (text.strip_suffix('.').unwrap_or(text), "", true),
    };
    GenerationOutput {
        instance_id: instance_id.to_string(),
        label: label.trim().to_string(),
        nle: nle.to_string(),
        text: text.to_string(),
        flagged: flagged || label.trim().is_empty(),
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.score / (self.tokens.len() + 1) as f64
    }
}

/// Beam search over the decoder. Finished hypotheses are ranked by length-normalised
/// log-probability; search stops once `beam` hypotheses have finished.
pub fn beam_search(
    model: &Seq2Seq,
    input_ids: &[u32],
    graph: Option<&ExplanationGraph>,
    beam: usize,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::InvalidArgument(
            "beam width must be at least 1".into(),
        ));
    }
    match (model.is_graph_augmented(), graph) {
        (true, None) => return Err(Error::MissingGraph("<generation input>".into())),
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(
                "a graph was supplied to a model without a graph layer".into(),
            ))
        }
        _ => {}
    }
    let graphs: Option<Vec<&ExplanationGraph>> = graph.map(|g| vec![g]);
    let enc = model.encoder_batch(&[input_ids], graphs.as_deref())?;
    let memory = model.encode(&enc)?.hidden;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_new_tokens {
        let n = live.len();
        let mut rows = Vec::with_capacity(n * (step + 1));
        for h in &live {
            rows.push(BOS);
            rows.extend(&h.tokens);
        }
        let input = Tensor::from_vec(rows, (n, step + 1), model.device())?;
        let mem = memory.repeat((n, 1, 1))?;
        let bias = enc.key_bias.repeat((n, 1, 1, 1))?;
        let logits = model.decode(&mem, &bias, &input)?.logits;
        let last = logits.narrow(1, step, 1)?.squeeze(1)?;
        let logp = candle_nn::ops::log_softmax(&last.to_dtype(DType::F64)?, D::Minus1)?
            .to_vec2::<f64>()?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (i, row) in logp.iter().enumerate() {
            for (v, lp) in row.iter().enumerate() {
                let v = v as u32;
                if v == PAD || v == BOS {
                    continue;
                }
                candidates.push((live[i].score + lp, i, v));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for (score, i, v) in candidates.into_iter().take(2 * beam) {
            if v == EOS {
                finished.push(Hypothesis {
                    tokens: live[i].tokens.clone(),
                    score,
                });
            } else if next.len() < beam {
                let mut tokens = live[i].tokens.clone();
                tokens.push(v);
                next.push(Hypothesis { tokens, score });
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    if finished.is_empty() {
        finished = live;
    }
    let best = finished
        .into_iter()
        .reduce(|best, h| {
            if h.normalized() > best.normalized() {
                h
            } else {
                best
            }
        })
        .map(|h| h.tokens)
        .unwrap_or_default();
    Ok(best)
}

/// Decode one instance and split the output into label and explanation.
pub fn generate(
    model: &Seq2Seq,
    instance: &TokenizedInstance,
    graph: Option<&ExplanationGraph>,
    tokenizer: &dyn Segmenter,
    beam: usize,
    max_new_tokens: usize,
) -> Result<GenerationOutput> {
    let ids = beam_search(model, &instance.token_ids, graph, beam, max_new_tokens)?;
    let tokens: Vec<&str> = ids.iter().map(|&i| tokenizer.token(i)).collect();
    Ok(parse_output(&instance.id, &decode_tokens(&tokens)))
}

/// `"The most important tokens are: w1, w2"` over the whole words that contain the
/// selected subtokens, each listed once, in input order.
pub fn prompt_suffix(
    instance: &TokenizedInstance,
    selection: &ExplanationSelection,
) -> Result<String> {
    let positions = selection.positions();
    if positions.is_empty() {
        return Err(Error::Empty("explanation selection".into()));
    }
    let mut starts = BTreeSet::new();
    for p in positions {
        let w = instance.word_at(p).ok_or(Error::IndexOutOfRange {
            index: p,
            len: instance.len(),
        })?;
        starts.insert(w.start);
    }
    let words: Vec<&str> = instance
        .word_map
        .iter()
        .filter(|w| starts.contains(&w.start))
        .map(|w| w.word.as_str())
        .collect();
    Ok(format!("{PROMPT_PREFIX} {}", words.join(", ")))
}

/// The instance's input text followed by the prompt suffix.
pub fn format_prompt_baseline(
    instance: &TokenizedInstance,
    selection: &ExplanationSelection,
) -> Result<String> {
    let suffix = prompt_suffix(instance, selection)?;
    Ok(format!("{} {suffix}", decode_tokens(&instance.tokens)))
}

/// The record with the prompt suffix appended to its second part.
pub fn prompt_record(
    record: &RawRecord,
    instance: &TokenizedInstance,
    selection: &ExplanationSelection,
) -> Result<RawRecord> {
    let mut out = record.clone();
    out.part_b = format!("{} {}", record.part_b, prompt_suffix(instance, selection)?);
    Ok(out)
}
