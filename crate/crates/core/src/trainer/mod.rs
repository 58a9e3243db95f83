//! Fine-tuning with the summed token cross-entropy, per-epoch checkpoints selected by
//! dev BLEU, and beam-search generation.

mod generate;

pub use generate::{
    beam_search, format_prompt_baseline, generate, parse_output, prompt_record, prompt_suffix,
    GenerationOutput, PROMPT_PREFIX,
};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_tokens, Segmenter, TokenizedInstance};
use crate::error::{Error, Result};
use crate::evaluate::corpus_bleu;
use crate::gnn::GnnVariant;
use crate::graphbuild::{ExplanationGraph, ExplanationKind, DEFAULT_K_PERCENT};
use crate::model::{save_checkpoint, Seq2Seq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beam_width: usize,
    pub k_percent: f64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub variant: Option<GnnVariant>,
    pub explanation: ExplanationKind,
    /// Train on the label token alone (the attribution model).
    pub label_only: bool,
    pub max_new_tokens: usize,
    /// Cap on dev instances decoded per epoch for BLEU.
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beam_width: 3,
            k_percent: DEFAULT_K_PERCENT,
            epochs: None,
            batch_size: None,
            seed: 0,
            variant: None,
            explanation: ExplanationKind::TokenInteraction,
            label_only: false,
            max_new_tokens: 64,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.beam_width == 0 {
            problems.push("beam_width must be >= 1".to_string());
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            problems.push(format!(
                "k_percent must be in (0, 100], got {}",
                self.k_percent
            ));
        }
        if self.batch_size == Some(0) {
            problems.push("batch_size must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    fn require_schedule(&self) -> Result<(usize, usize)> {
        match (self.epochs, self.batch_size) {
            (Some(e), Some(b)) => Ok((e, b)),
            _ => Err(Error::InvalidArgument(
                "epochs and batch_size must be set before training".into(),
            )),
        }
    }
}

/// `-Σ_i ln p_i(y_i)` for one sequence given per-step probability distributions.
pub fn sequence_loss(step_probs: &[Vec<f64>], target: &[usize]) -> Result<f64> {
    if step_probs.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} distributions for {} target tokens",
            step_probs.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    for (dist, &y) in step_probs.iter().zip(target) {
        let p = *dist.get(y).ok_or(Error::IndexOutOfRange {
            index: y,
            len: dist.len(),
        })?;
        loss -= p.ln();
    }
    Ok(loss)
}

/// Masked cross-entropy summed over positions and averaged over the batch.
/// `logits` is `(B, T, V)`, `labels` `(B, T)` u32, `mask` `(B, T)` with 1 on real targets.
pub fn batch_sequence_loss(logits: &Tensor, labels: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, _) = logits.dims3()?;
    if labels.dims() != [b, t] || mask.dims() != [b, t] {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs labels {:?} / mask {:?}",
            logits.dims(),
            labels.dims(),
            mask.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&labels.unsqueeze(2)?, 2)?.squeeze(2)?;
    let nll = picked.neg()?.mul(&mask.to_dtype(picked.dtype())?)?;
    Ok((nll.sum_all()? / b as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub path: PathBuf,
    /// Mean per-instance training loss over the epoch.
    pub train_loss: f64,
    pub dev_bleu: f64,
}

/// The best checkpoint by dev BLEU; the earliest epoch wins ties.
pub fn select_checkpoint(series: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best = series
        .first()
        .ok_or_else(|| Error::Empty("checkpoint series".into()))?;
    for c in &series[1..] {
        if c.dev_bleu > best.dev_bleu {
            best = c;
        }
    }
    Ok(best)
}

/// Instances and, for a graph-augmented model, the graph of each instance by id.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub instances: &'a [TokenizedInstance],
    pub graphs: Option<&'a HashMap<String, ExplanationGraph>>,
}

impl<'a> TrainingData<'a> {
    pub fn new(instances: &'a [TokenizedInstance]) -> Self {
        Self {
            instances,
            graphs: None,
        }
    }

    pub fn with_graphs(mut self, graphs: &'a HashMap<String, ExplanationGraph>) -> Self {
        self.graphs = Some(graphs);
        self
    }

    pub fn graph(&self, model: &Seq2Seq, id: &str) -> Result<Option<&'a ExplanationGraph>> {
        if !model.is_graph_augmented() {
            return Ok(None);
        }
        self.graphs
            .and_then(|g| g.get(id))
            .map(Some)
            .ok_or_else(|| Error::MissingGraph(id.to_string()))
    }
}

fn target_of(instance: &TokenizedInstance, label_only: bool) -> &[u32] {
    if label_only {
        &instance.target_ids[..1.min(instance.target_ids.len())]
    } else {
        &instance.target_ids
    }
}

/// Loss of one batch as a differentiable scalar.
pub fn batch_loss(
    model: &Seq2Seq,
    data: &TrainingData,
    batch: &[&TokenizedInstance],
    label_only: bool,
) -> Result<Tensor> {
    let inputs: Vec<&[u32]> = batch.iter().map(|i| i.token_ids.as_slice()).collect();
    let graphs = if model.is_graph_augmented() {
        Some(
            batch
                .iter()
                .map(|i| data.graph(model, &i.id).map(|g| g.expect("graph model")))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let enc = model.encoder_batch(&inputs, graphs.as_deref())?;
    let targets: Vec<&[u32]> = batch.iter().map(|i| target_of(i, label_only)).collect();
    let dec = model.decoder_batch(&targets)?;
    let out = model.forward(&enc, &dec.input)?;
    batch_sequence_loss(&out.logits, &dec.labels, &dec.mask)
}

/// Sum of absolute gradients reaching the graph layer's parameters on one batch.
pub fn gnn_gradient_l1(
    model: &Seq2Seq,
    varmap: &VarMap,
    data: &TrainingData,
    batch: &[&TokenizedInstance],
) -> Result<f64> {
    let loss = batch_loss(model, data, batch, false)?;
    let grads = loss.backward()?;
    let vars = varmap.data().lock().expect("parameter store lock");
    let mut total = 0.0;
    for (name, var) in vars.iter() {
        if name.starts_with("gnn.") {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g
                    .abs()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
    }
    Ok(total)
}

/// Text the dev BLEU compares: the explanation, or the whole output for label-only runs.
fn bleu_text(out: &GenerationOutput, label_only: bool) -> String {
    if label_only {
        out.text.clone()
    } else {
        out.nle.clone()
    }
}

/// BLEU of generated against reference texts on (a prefix of) the dev set.
pub fn dev_bleu(
    model: &Seq2Seq,
    dev: &TrainingData,
    tokenizer: &dyn Segmenter,
    config: &TrainConfig,
) -> Result<f64> {
    let n = config
        .dev_limit
        .unwrap_or(dev.instances.len())
        .min(dev.instances.len());
    if n == 0 {
        return Ok(0.0);
    }
    let mut generated = Vec::with_capacity(n);
    let mut references = Vec::with_capacity(n);
    for inst in &dev.instances[..n] {
        let graph = dev.graph(model, &inst.id)?;
        let out = generate(
            model,
            inst,
            graph,
            tokenizer,
            config.beam_width,
            config.max_new_tokens,
        )?;
        generated.push(bleu_text(&out, config.label_only));
        let target: Vec<&str> = target_of(inst, config.label_only)
            .iter()
            .map(|&i| tokenizer.token(i))
            .collect();
        let reference = parse_output(&inst.id, &decode_tokens(&target));
        references.push(vec![bleu_text(&reference, config.label_only)]);
    }
    corpus_bleu(&generated, &references)
}

/// Train for `config.epochs` epochs, saving `epoch-<n>.safetensors` under `checkpoint_dir`
/// after each one and recording its mean training loss and dev BLEU.
pub fn fit(
    model: &Seq2Seq,
    varmap: &VarMap,
    train: TrainingData,
    dev: TrainingData,
    tokenizer: &dyn Segmenter,
    config: &TrainConfig,
    checkpoint_dir: &Path,
) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    let (epochs, batch_size) = config.require_schedule()?;
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if train.instances.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    for data in [&train, &dev] {
        for inst in data.instances {
            data.graph(model, &inst.id)?;
        }
    }
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    let mut opt = AdamW::new(
        varmap.all_vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.instances.len()).collect();
    let mut series = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&TokenizedInstance> =
                chunk.iter().map(|&i| &train.instances[i]).collect();
            let loss = batch_loss(model, &train, &batch, config.label_only)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ids: batch
                        .iter()
                        .map(|i| i.id.as_str())
                        .collect::<Vec<_>>()
                        .join(","),
                });
            }
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let train_loss = total / train.instances.len() as f64;
        let path = checkpoint_dir.join(format!("epoch-{epoch}.safetensors"));
        save_checkpoint(varmap, model.config(), &path)?;
        let bleu = dev_bleu(model, &dev, tokenizer, config)?;
        log::info!("epoch {epoch}: loss {train_loss:.4}, dev BLEU {bleu:.2}");
        series.push(Checkpoint {
            epoch,
            path,
            train_loss,
            dev_bleu: bleu,
        });
    }
    Ok(series)
}
