//! A compact encoder-decoder transformer with an optional graph layer between two
//! encoder layers, plus parameter accounting for reference-size architectures.

mod layers;
mod reference;

pub use reference::{TransformerDims, BART_LARGE, T5_LARGE};

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Embedding, Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::gnn::{Activation, GnnParameters, GnnVariant, InsertionConfig};
use crate::graphbuild::ExplanationGraph;
use layers::{DecoderLayer, EncoderLayer};

const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub variant: GnnVariant,
    #[serde(default)]
    pub activation: Activation,
    /// 1-based encoder layer whose output feeds the graph layer.
    pub insert_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub gnn: Option<GnnConfig>,
}

impl ModelConfig {
    /// The desk-scale profile: 2+2 layers, hidden 32.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 32,
            heads: 4,
            ff_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 256,
            gnn: None,
        }
    }

    /// Add a graph layer at three quarters of the encoder depth.
    pub fn with_gnn(mut self, variant: GnnVariant) -> Result<Self> {
        let at = InsertionConfig::three_quarters(self.encoder_layers)?;
        self.gnn = Some(GnnConfig {
            variant,
            activation: Activation::Relu,
            insert_after: at.insert_after,
        });
        Ok(self)
    }

    pub fn without_gnn(&self) -> Self {
        Self {
            gnn: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if let Some(g) = &self.gnn {
            InsertionConfig::at(self.encoder_layers, g.insert_after)?;
        }
        Ok(())
    }
}

/// Padded encoder inputs. `key_bias` is `(B, 1, 1, S)` with 0 on real tokens and a large
/// negative value on padding; `adjacency` is `(B, S, S)` when a graph layer is present.
#[derive(Debug, Clone)]
pub struct EncoderBatch {
    pub ids: Tensor,
    pub key_bias: Tensor,
    pub adjacency: Option<Tensor>,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    /// Self-attention probabilities `(B, H, S, S)` of every encoder layer.
    pub attentions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub logits: Tensor,
    /// Cross-attention probabilities `(B, H, T, S)` of every decoder layer.
    pub cross_attentions: Vec<Tensor>,
}

/// Teacher-forcing tensors: decoder input `[BOS] + y`, labels `y + [EOS]`, and a 0/1 mask.
#[derive(Debug, Clone)]
pub struct DecoderBatch {
    pub input: Tensor,
    pub labels: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    embed: Embedding,
    enc_pos: Embedding,
    dec_pos: Embedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    lm_head: Linear,
    gnn: Option<GnnParameters>,
    device: Device,
    dtype: DType,
}

fn embedding(n: usize, hidden: usize, vb: VarBuilder) -> Result<Embedding> {
    let w = vb.get_with_hints(
        (n, hidden),
        "weight",
        Init::Randn {
            mean: 0.0,
            stdev: 0.5,
        },
    )?;
    Ok(Embedding::new(w, hidden))
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    h,
                    config.heads,
                    config.ff_dim,
                    vb.pp(format!("encoder.{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    h,
                    config.heads,
                    config.ff_dim,
                    vb.pp(format!("decoder.{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gnn = match &config.gnn {
            Some(g) => Some(GnnParameters::new(
                vb.pp("gnn"),
                g.variant,
                h,
                g.activation,
            )?),
            None => None,
        };
        Ok(Self {
            embed: embedding(config.vocab_size, h, vb.pp("embed"))?,
            enc_pos: embedding(config.max_positions, h, vb.pp("enc_pos"))?,
            dec_pos: embedding(config.max_positions, h, vb.pp("dec_pos"))?,
            lm_head: candle_nn::linear(h, config.vocab_size, vb.pp("lm_head"))?,
            encoder,
            decoder,
            gnn,
            device: vb.device().clone(),
            dtype: vb.dtype(),
            config,
        })
    }

    /// Fresh model with its own parameter store.
    pub fn init(config: ModelConfig, dtype: DType, device: &Device) -> Result<(Self, VarMap)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let model = Self::new(config, vb)?;
        Ok((model, varmap))
    }

    /// Fresh model whose parameters depend only on `seed`. Matrices are drawn uniformly
    /// from `±1/sqrt(fan_in)`, embeddings from `±0.5·sqrt(3)`, biases start at 0 and
    /// layer-norm gains at 1.
    pub fn init_seeded(
        config: ModelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, VarMap)> {
        let (_, probe) = Self::init(config.clone(), dtype, device)?;
        let mut shapes: Vec<(String, Vec<usize>)> = probe
            .data()
            .lock()
            .expect("parameter store lock")
            .iter()
            .map(|(name, var)| (name.clone(), var.dims().to_vec()))
            .collect();
        shapes.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let varmap = VarMap::new();
        {
            let mut data = varmap.data().lock().expect("parameter store lock");
            for (name, dims) in shapes {
                let count: usize = dims.iter().product();
                let leaf = name.rsplit('.').next().unwrap_or("");
                let values: Vec<f32> = if leaf == "bias" {
                    vec![0.0; count]
                } else if name.contains("norm") {
                    vec![1.0; count]
                } else {
                    let bound = if name.starts_with("embed") || name.contains("_pos") {
                        0.5 * 3f64.sqrt()
                    } else {
                        1.0 / (*dims.last().unwrap_or(&1) as f64).sqrt()
                    };
                    (0..count)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect()
                };
                let t = Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?;
                data.insert(name, candle_core::Var::from_tensor(&t)?);
            }
        }
        let model = Self::new(config, VarBuilder::from_varmap(&varmap, dtype, device))?;
        Ok((model, varmap))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn gnn(&self) -> Option<&GnnParameters> {
        self.gnn.as_ref()
    }

    pub fn is_graph_augmented(&self) -> bool {
        self.gnn.is_some()
    }

    fn positions(&self, len: usize, table: &Embedding) -> Result<Tensor> {
        if len > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence of {len} tokens exceeds {} positions",
                self.config.max_positions
            )));
        }
        let idx = Tensor::arange(0u32, len as u32, &self.device)?;
        Ok(table.forward(&idx)?.unsqueeze(0)?)
    }

    /// Pad token-id sequences into an encoder batch. `graphs` must be given (one per
    /// sequence) when the model carries a graph layer.
    pub fn encoder_batch(
        &self,
        inputs: &[&[u32]],
        graphs: Option<&[&ExplanationGraph]>,
    ) -> Result<EncoderBatch> {
        if inputs.is_empty() {
            return Err(Error::Empty("encoder batch".into()));
        }
        let b = inputs.len();
        let s = inputs.iter().map(|x| x.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; b * s];
        let mut bias = vec![MASK_VALUE as f32; b * s];
        for (r, seq) in inputs.iter().enumerate() {
            ids[r * s..r * s + seq.len()].copy_from_slice(seq);
            bias[r * s..r * s + seq.len()].fill(0.0);
        }
        let adjacency = match graphs {
            Some(gs) => {
                if gs.len() != b {
                    return Err(Error::ShapeMismatch(format!(
                        "{} graphs for {b} inputs",
                        gs.len()
                    )));
                }
                let mut adj = Vec::with_capacity(b * s * s);
                for (g, seq) in gs.iter().zip(inputs) {
                    if g.node_count != seq.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "graph {} has {} nodes for {} tokens",
                            g.instance_id,
                            g.node_count,
                            seq.len()
                        )));
                    }
                    adj.extend(g.adjacency(s));
                }
                Some(Tensor::from_vec(adj, (b, s, s), &self.device)?.to_dtype(self.dtype)?)
            }
            None => None,
        };
        Ok(EncoderBatch {
            ids: Tensor::from_vec(ids, (b, s), &self.device)?,
            key_bias: Tensor::from_vec(bias, (b, 1, 1, s), &self.device)?.to_dtype(self.dtype)?,
            adjacency,
            lengths: inputs.iter().map(|x| x.len()).collect(),
        })
    }

    pub fn decoder_batch(&self, targets: &[&[u32]]) -> Result<DecoderBatch> {
        let b = targets.len();
        let t = targets.iter().map(|x| x.len() + 1).max().unwrap_or(1);
        let mut input = vec![PAD; b * t];
        let mut labels = vec![PAD; b * t];
        let mut mask = vec![0f32; b * t];
        for (r, y) in targets.iter().enumerate() {
            input[r * t] = BOS;
            input[r * t + 1..r * t + 1 + y.len()].copy_from_slice(y);
            labels[r * t..r * t + y.len()].copy_from_slice(y);
            labels[r * t + y.len()] = EOS;
            mask[r * t..r * t + y.len() + 1].fill(1.0);
        }
        Ok(DecoderBatch {
            input: Tensor::from_vec(input, (b, t), &self.device)?,
            labels: Tensor::from_vec(labels, (b, t), &self.device)?,
            mask: Tensor::from_vec(mask, (b, t), &self.device)?.to_dtype(self.dtype)?,
        })
    }

    /// Run the encoder. The graph layer, if any, consumes the output of encoder layer
    /// `insert_after` and its result feeds the next layer.
    pub fn encode(&self, batch: &EncoderBatch) -> Result<EncoderOutput> {
        self.encode_inner(batch, None)
    }

    /// Encode with the self-attention probabilities of encoder layer `layer` (0-based)
    /// replaced by `probs`. Used to differentiate through attention weights.
    pub fn encode_with_attention(
        &self,
        batch: &EncoderBatch,
        layer: usize,
        probs: &Tensor,
    ) -> Result<EncoderOutput> {
        if layer >= self.encoder.len() {
            return Err(Error::IndexOutOfRange {
                index: layer,
                len: self.encoder.len(),
            });
        }
        self.encode_inner(batch, Some((layer, probs)))
    }

    fn encode_inner(
        &self,
        batch: &EncoderBatch,
        attention_override: Option<(usize, &Tensor)>,
    ) -> Result<EncoderOutput> {
        let (_, s) = batch.ids.dims2()?;
        let mut x = self
            .embed
            .forward(&batch.ids)?
            .broadcast_add(&self.positions(s, &self.enc_pos)?)?;
        let mut attentions = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate() {
            match attention_override {
                Some((at, probs)) if at == i => {
                    x = layer.forward_with_probs(&x, probs)?;
                    attentions.push(probs.clone());
                }
                _ => {
                    let (next, probs) = layer.forward(&x, &batch.key_bias)?;
                    x = next;
                    attentions.push(probs);
                }
            }
            if let (Some(gnn), Some(cfg)) = (&self.gnn, &self.config.gnn) {
                if i + 1 == cfg.insert_after {
                    let adjacency = batch.adjacency.as_ref().ok_or_else(|| {
                        Error::InvalidArgument(
                            "graph-augmented model needs an adjacency batch".into(),
                        )
                    })?;
                    x = gnn.forward(&x, adjacency)?;
                }
            }
        }
        Ok(EncoderOutput {
            hidden: x,
            attentions,
        })
    }

    fn causal_bias(&self, t: usize) -> Result<Tensor> {
        let mask: Vec<f32> = (0..t)
            .flat_map(|i| (0..t).map(move |j| if j > i { MASK_VALUE as f32 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(mask, (1, 1, t, t), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Decoder logits `(B, T, V)` for decoder input ids `(B, T)`.
    pub fn decode(
        &self,
        memory: &Tensor,
        memory_bias: &Tensor,
        decoder_input: &Tensor,
    ) -> Result<DecoderOutput> {
        self.decode_inner(memory, memory_bias, decoder_input, None)
    }

    /// Decode with the cross-attention probabilities of the last decoder layer replaced.
    pub fn decode_with_cross_attention(
        &self,
        memory: &Tensor,
        memory_bias: &Tensor,
        decoder_input: &Tensor,
        cross: &Tensor,
    ) -> Result<DecoderOutput> {
        self.decode_inner(memory, memory_bias, decoder_input, Some(cross))
    }

    fn decode_inner(
        &self,
        memory: &Tensor,
        memory_bias: &Tensor,
        decoder_input: &Tensor,
        last_cross: Option<&Tensor>,
    ) -> Result<DecoderOutput> {
        let (_, t) = decoder_input.dims2()?;
        let mut x = self
            .embed
            .forward(decoder_input)?
            .broadcast_add(&self.positions(t, &self.dec_pos)?)?;
        let causal = self.causal_bias(t)?;
        let mut cross_attentions = Vec::with_capacity(self.decoder.len());
        let last = self.decoder.len().saturating_sub(1);
        for (i, layer) in self.decoder.iter().enumerate() {
            match last_cross {
                Some(p) if i == last => {
                    x = layer.forward_with_cross(&x, memory, &causal, p)?;
                    cross_attentions.push(p.clone());
                }
                _ => {
                    let (next, cross) = layer.forward(&x, memory, &causal, memory_bias)?;
                    x = next;
                    cross_attentions.push(cross);
                }
            }
        }
        Ok(DecoderOutput {
            logits: self.lm_head.forward(&x)?,
            cross_attentions,
        })
    }

    /// Encoder + teacher-forced decoder.
    pub fn forward(&self, enc: &EncoderBatch, dec_input: &Tensor) -> Result<DecoderOutput> {
        let memory = self.encode(enc)?;
        self.decode(&memory.hidden, &enc.key_bias, dec_input)
    }
}

/// Total number of trainable scalars in a parameter store.
pub fn count_parameters(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// Save parameters (safetensors) next to a JSON copy of the model configuration.
pub fn save_checkpoint(varmap: &VarMap, config: &ModelConfig, path: &Path) -> Result<()> {
    varmap.save(path)?;
    let cfg_path = path.with_extension("json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(config)?)
        .map_err(|e| Error::io(cfg_path, e))
}

pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<(Seq2Seq, VarMap)> {
    let cfg_path = path.with_extension("json");
    let bytes = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: ModelConfig = serde_json::from_slice(&bytes)?;
    let (model, mut varmap) = Seq2Seq::init(config, dtype, device)?;
    varmap.load(path)?;
    Ok((model, varmap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::ExplanationKind;

    fn toy(gnn: Option<GnnVariant>) -> (Seq2Seq, VarMap) {
        let mut cfg = ModelConfig::toy(50);
        if let Some(v) = gnn {
            cfg = cfg.with_gnn(v).unwrap();
        }
        Seq2Seq::init(cfg, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shapes() {
        let (m, _) = toy(None);
        let enc = m.encoder_batch(&[&[5, 6, 7], &[8, 9]], None).unwrap();
        let dec = m.decoder_batch(&[&[10, 11], &[12]]).unwrap();
        let out = m.forward(&enc, &dec.input).unwrap();
        assert_eq!(out.logits.dims(), &[2, 3, 50]);
        assert_eq!(out.cross_attentions[1].dims(), &[2, 4, 3, 3]);
        let memory = m.encode(&enc).unwrap();
        assert_eq!(memory.attentions.len(), 2);
        assert_eq!(memory.attentions[1].dims(), &[2, 4, 3, 3]);
    }

    #[test]
    fn padding_keys_get_no_attention() {
        let (m, _) = toy(None);
        let enc = m.encoder_batch(&[&[5, 6, 7], &[8, 9]], None).unwrap();
        let att = m.encode(&enc).unwrap().attentions[0]
            .get(1)
            .unwrap()
            .to_vec3::<f32>()
            .unwrap();
        for head in &att {
            for row in head {
                assert!(row[2] < 1e-6);
            }
        }
    }

    #[test]
    fn attention_override_with_own_probs_is_identity() {
        let (m, _) = toy(None);
        let enc = m.encoder_batch(&[&[5, 6, 7, 8]], None).unwrap();
        let plain = m.encode(&enc).unwrap();
        let probs = plain.attentions[1].detach();
        let again = m.encode_with_attention(&enc, 1, &probs).unwrap();
        let diff = (plain.hidden - again.hidden)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::toy(40).with_gnn(GnnVariant::Gat).unwrap();
        let (a, _) = Seq2Seq::init_seeded(cfg.clone(), 7, DType::F32, &Device::Cpu).unwrap();
        let (b, _) = Seq2Seq::init_seeded(cfg.clone(), 7, DType::F32, &Device::Cpu).unwrap();
        let (c, _) = Seq2Seq::init_seeded(cfg, 8, DType::F32, &Device::Cpu).unwrap();
        let g = ExplanationGraph::new("x", 3, ExplanationKind::HighlightToken, 30.0)
            .with_edges(&[(0, 1)])
            .unwrap();
        let run = |m: &Seq2Seq| {
            let enc = m.encoder_batch(&[&[4, 5, 6]], Some(&[&g])).unwrap();
            m.encode(&enc)
                .unwrap()
                .hidden
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(run(&a), run(&b));
        assert_ne!(run(&a), run(&c));
    }

    #[test]
    fn decoder_batch_layout() {
        let (m, _) = toy(None);
        let dec = m.decoder_batch(&[&[10, 11], &[12]]).unwrap();
        assert_eq!(
            dec.input.to_vec2::<u32>().unwrap(),
            vec![vec![BOS, 10, 11], vec![BOS, 12, PAD]]
        );
        assert_eq!(
            dec.labels.to_vec2::<u32>().unwrap(),
            vec![vec![10, 11, EOS], vec![12, EOS, PAD]]
        );
        assert_eq!(
            dec.mask.to_vec2::<f32>().unwrap(),
            vec![vec![1.0; 3], vec![1.0, 1.0, 0.0]]
        );
    }

    #[test]
    fn graph_model_requires_adjacency() {
        let (m, _) = toy(Some(GnnVariant::Sage));
        let enc = m.encoder_batch(&[&[5, 6, 7]], None).unwrap();
        assert!(m.encode(&enc).is_err());
        let g = ExplanationGraph::new("x", 3, ExplanationKind::HighlightToken, 30.0)
            .with_edges(&[(0, 2)])
            .unwrap();
        let enc = m.encoder_batch(&[&[5, 6, 7]], Some(&[&g])).unwrap();
        assert!(m.encode(&enc).is_ok());
        let short = ExplanationGraph::new("x", 2, ExplanationKind::HighlightToken, 30.0);
        assert!(m.encoder_batch(&[&[5, 6, 7]], Some(&[&short])).is_err());
    }

    #[test]
    fn gnn_adds_only_its_own_parameters() {
        let (_, base) = toy(None);
        for v in GnnVariant::ALL {
            let (_, aug) = toy(Some(v));
            assert_eq!(
                count_parameters(&aug) - count_parameters(&base),
                v.parameter_count(32)
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, vm) = toy(Some(GnnVariant::Gcn));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.safetensors");
        save_checkpoint(&vm, m.config(), &p).unwrap();
        let (m2, _) = load_checkpoint(&p, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m2.config(), m.config());
        let g = ExplanationGraph::new("x", 2, ExplanationKind::HighlightToken, 30.0)
            .with_edges(&[(0, 1)])
            .unwrap();
        let enc = m.encoder_batch(&[&[5, 6]], Some(&[&g])).unwrap();
        let a = m
            .encode(&enc)
            .unwrap()
            .hidden
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = m2
            .encode(&enc)
            .unwrap()
            .hidden
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }
}
