//! Attention capture from a label-only model and the snapshot → graph pipeline.

use candle_core::{DType, Tensor, Var, D};

use crate::attribution::{
    select_head, span_interactions, token_importance, token_interactions, AttentionSnapshot,
    AttentionSource, HeadSelection,
};
use crate::dataset::{TokenizedInstance, BOS};
use crate::error::{Error, Result};
use crate::graphbuild::{
    build_graph, select_top_fraction, ExplanationGraph, ExplanationKind, ScoredExplanation,
};
use crate::model::Seq2Seq;

#[derive(Debug, Clone)]
pub struct Capture {
    pub snapshot: AttentionSnapshot,
    /// Token predicted at the first decoding step (the label position).
    pub predicted: u32,
}

/// Run the label-only model on one instance and record the attention of the chosen
/// source together with the sign of each token's gradient contribution to the
/// predicted label logit.
///
/// `candidates` restricts the label prediction to those token ids when non-empty.
pub fn capture_snapshot(
    model: &Seq2Seq,
    instance: &TokenizedInstance,
    source: AttentionSource,
    candidates: &[u32],
) -> Result<Capture> {
    if model.is_graph_augmented() {
        return Err(Error::InvalidArgument(
            "attention is captured from the label-only model, which has no graph layer".into(),
        ));
    }
    let enc = model.encoder_batch(&[&instance.token_ids], None)?;
    let dec_input = Tensor::new(&[[BOS]], model.device())?;
    let plain = model.encode(&enc)?;
    let (probs, logits) = match source {
        AttentionSource::EncoderSelf => {
            let layer = plain.attentions.len() - 1;
            let probs = Var::from_tensor(&plain.attentions[layer].detach())?;
            let memory = model.encode_with_attention(&enc, layer, probs.as_tensor())?;
            let out = model.decode(&memory.hidden, &enc.key_bias, &dec_input)?;
            (probs, out.logits)
        }
        AttentionSource::DecoderCross => {
            let first = model.decode(&plain.hidden, &enc.key_bias, &dec_input)?;
            let cross = first
                .cross_attentions
                .last()
                .ok_or_else(|| Error::InvalidArgument("model has no decoder layers".into()))?;
            let probs = Var::from_tensor(&cross.detach())?;
            let out = model.decode_with_cross_attention(
                &plain.hidden,
                &enc.key_bias,
                &dec_input,
                probs.as_tensor(),
            )?;
            (probs, out.logits)
        }
    };
    let step0 = logits.squeeze(0)?.squeeze(0)?;
    let scores = step0.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let predicted = argmax(&scores, candidates)?;
    let grads = step0.get(predicted as usize)?.backward()?;
    let grad = grads
        .get(probs.as_tensor())
        .ok_or_else(|| Error::InvalidArgument("attention weights received no gradient".into()))?;

    let p = probs.as_tensor().squeeze(0)?;
    let (heads, queries, tokens) = p.dims3()?;
    let weights = p.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let contributions = grad
        .squeeze(0)?
        .sum(D::Minus2)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|g| {
            if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect();
    let snapshot = AttentionSnapshot {
        instance_id: instance.id.clone(),
        source,
        heads,
        queries,
        tokens,
        boundary: instance.boundary,
        weights,
        contributions,
    };
    snapshot.validate()?;
    Ok(Capture {
        snapshot,
        predicted,
    })
}

fn argmax(scores: &[f64], candidates: &[u32]) -> Result<u32> {
    let pool: Vec<u32> = if candidates.is_empty() {
        (0..scores.len() as u32).collect()
    } else {
        candidates.to_vec()
    };
    let mut best: Option<(u32, f64)> = None;
    for id in pool {
        let s = *scores.get(id as usize).ok_or(Error::IndexOutOfRange {
            index: id as usize,
            len: scores.len(),
        })?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::Empty("label candidates".into()))
}

/// Scored explanations of one kind from the head chosen by [`select_head`].
pub fn explain(
    snapshot: &AttentionSnapshot,
    kind: ExplanationKind,
) -> Result<(HeadSelection, Vec<ScoredExplanation>)> {
    let head = select_head(snapshot);
    let scored = match kind {
        ExplanationKind::HighlightToken => token_importance(snapshot, head.head)?.scored(),
        ExplanationKind::TokenInteraction => token_interactions(snapshot, head.head)?.scored(),
        ExplanationKind::SpanInteraction => {
            let pairs = token_interactions(snapshot, head.head)?;
            span_interactions(&pairs, snapshot.boundary)?.scored()
        }
    };
    Ok((head, scored))
}

#[derive(Debug, Clone)]
pub struct GraphOutcome {
    pub graph: ExplanationGraph,
    pub head: HeadSelection,
    pub explanations: usize,
}

/// Snapshot → explanations → top-k% selection → graph. An instance without any
/// explanation of the requested kind gets an edgeless graph.
pub fn graph_from_snapshot(
    snapshot: &AttentionSnapshot,
    instance: &TokenizedInstance,
    kind: ExplanationKind,
    k_percent: f64,
) -> Result<GraphOutcome> {
    if snapshot.instance_id != instance.id || snapshot.tokens != instance.len() {
        return Err(Error::ShapeMismatch(format!(
            "snapshot {} ({} tokens) does not match instance {} ({} tokens)",
            snapshot.instance_id,
            snapshot.tokens,
            instance.id,
            instance.len()
        )));
    }
    let (head, scored) = explain(snapshot, kind)?;
    let graph = if scored.is_empty() {
        log::debug!("{}: no {kind} explanations, edgeless graph", instance.id);
        ExplanationGraph::new(instance.id.clone(), instance.len(), kind, k_percent)
    } else {
        build_graph(&select_top_fraction(&scored, k_percent)?, instance)?
    };
    Ok(GraphOutcome {
        graph,
        head,
        explanations: scored.len(),
    })
}
