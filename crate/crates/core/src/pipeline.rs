//! Glue between the stages: graph construction from a label-only model and a
//! [`Rationalizer`] backed by a trained model, for counterfactual testing.

use crate::attribution::AttentionSource;
use crate::dataset::{
    reformulate, tokenize_instance, RawRecord, Segmenter, Task, TokenizedInstance,
};
use crate::error::{Error, Result};
use crate::evaluate::Rationalizer;
use crate::extract::{capture_snapshot, graph_from_snapshot, GraphOutcome};
use crate::graphbuild::ExplanationKind;
use crate::model::Seq2Seq;
use crate::trainer::{generate, GenerationOutput};

/// How explanation graphs are produced for unseen inputs.
pub struct GraphSource<'a> {
    pub base: &'a Seq2Seq,
    pub source: AttentionSource,
    pub kind: ExplanationKind,
    pub k_percent: f64,
    /// Label token ids the base model's first step is restricted to.
    pub candidates: Vec<u32>,
}

impl GraphSource<'_> {
    pub fn graph(&self, instance: &TokenizedInstance) -> Result<GraphOutcome> {
        let cap = capture_snapshot(self.base, instance, self.source, &self.candidates)?;
        graph_from_snapshot(&cap.snapshot, instance, self.kind, self.k_percent)
    }
}

pub struct ModelRationalizer<'a> {
    pub model: &'a Seq2Seq,
    pub tokenizer: &'a dyn Segmenter,
    pub task: Task,
    pub graphs: Option<GraphSource<'a>>,
    pub beam: usize,
    pub max_new_tokens: usize,
}

impl Rationalizer for ModelRationalizer<'_> {
    fn rationalize(&mut self, record: &RawRecord) -> Result<GenerationOutput> {
        let record = reformulate(record, self.task)?;
        let instance = tokenize_instance(&record, self.tokenizer)?;
        let graph = match (&self.graphs, self.model.is_graph_augmented()) {
            (Some(src), true) => Some(src.graph(&instance)?.graph),
            (None, true) => {
                return Err(Error::InvalidArgument(
                    "graph-augmented model needs a graph source".into(),
                ))
            }
            (_, false) => None,
        };
        generate(
            self.model,
            &instance,
            graph.as_ref(),
            self.tokenizer,
            self.beam,
            self.max_new_tokens,
        )
    }
}
