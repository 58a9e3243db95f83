//! Graph aggregation layers (GCN, GAT, GraphSAGE) over encoder hidden states, and the
//! rule for where one is inserted into an encoder stack.
//!
//! All layers run on dense 0/1 adjacency tensors, batched `(B, N, N)` or single `(N, N)`,
//! with node states `(B, N, D)` or `(N, D)`. Nodes without neighbours (tokens outside every
//! explanation, padding) pass through GCN and GAT unchanged; GraphSAGE sees a zero
//! neighbour aggregate for them.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::ExplanationGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnVariant {
    Gcn,
    Gat,
    Sage,
}

impl GnnVariant {
    pub const ALL: [GnnVariant; 3] = [GnnVariant::Gcn, GnnVariant::Gat, GnnVariant::Sage];

    /// Trainable parameters the layer adds for hidden size `hidden`.
    pub fn parameter_count(&self, hidden: usize) -> usize {
        match self {
            GnnVariant::Gcn => hidden * hidden,
            GnnVariant::Gat => hidden * hidden + 2 * hidden,
            GnnVariant::Sage => 2 * hidden * hidden,
        }
    }
}

impl fmt::Display for GnnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnnVariant::Gcn => "gcn",
            GnnVariant::Gat => "gat",
            GnnVariant::Sage => "sage",
        })
    }
}

impl FromStr for GnnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(GnnVariant::Gcn),
            "gat" => Ok(GnnVariant::Gat),
            "sage" => Ok(GnnVariant::Sage),
            _ => Err(Error::InvalidArgument(format!(
                "unknown GNN variant `{s}` (valid: gcn, gat, sage)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Identity => x.clone(),
        })
    }
}

const GAT_NEGATIVE_SLOPE: f64 = 0.2;
const MASKED_LOGIT: f64 = -1e9;

/// Weights of one graph layer. `weight` is `(D, D)` for GCN/GAT and `(D, 2D)` for SAGE,
/// applied as `x W^T`. GAT scores an edge `v <- u` as
/// `LeakyReLU(att_src . W h_v + att_dst . W h_u)`.
#[derive(Debug, Clone)]
pub struct GnnParameters {
    pub variant: GnnVariant,
    pub activation: Activation,
    pub weight: Tensor,
    pub att_src: Option<Tensor>,
    pub att_dst: Option<Tensor>,
}

impl GnnParameters {
    /// Create trainable parameters under `vb`.
    pub fn new(
        vb: VarBuilder,
        variant: GnnVariant,
        hidden: usize,
        activation: Activation,
    ) -> Result<Self> {
        let in_dim = match variant {
            GnnVariant::Sage => 2 * hidden,
            _ => hidden,
        };
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vb.get_with_hints(
            (hidden, in_dim),
            "weight",
            Init::Uniform {
                lo: -bound,
                up: bound,
            },
        )?;
        let (att_src, att_dst) = if variant == GnnVariant::Gat {
            let init = Init::Randn {
                mean: 0.0,
                stdev: 1.0 / (hidden as f64).sqrt(),
            };
            (
                Some(vb.get_with_hints(hidden, "att_src", init)?),
                Some(vb.get_with_hints(hidden, "att_dst", init)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            variant,
            activation,
            weight,
            att_src,
            att_dst,
        })
    }

    /// Wrap existing tensors (fixed weights, gradient checks).
    pub fn from_tensors(
        variant: GnnVariant,
        activation: Activation,
        weight: Tensor,
        attention: Option<(Tensor, Tensor)>,
    ) -> Result<Self> {
        let (att_src, att_dst) = match attention {
            Some((s, d)) => (Some(s), Some(d)),
            None => (None, None),
        };
        let p = Self {
            variant,
            activation,
            weight,
            att_src,
            att_dst,
        };
        p.check_weight_shape()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.weight.dims()[0]
    }

    fn check_weight_shape(&self) -> Result<()> {
        let dims = self.weight.dims();
        if dims.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "weight must be 2-D, got {dims:?}"
            )));
        }
        let want_in = match self.variant {
            GnnVariant::Sage => 2 * dims[0],
            _ => dims[0],
        };
        if dims[1] != want_in {
            return Err(Error::ShapeMismatch(format!(
                "{} weight must be ({}, {}), got {dims:?}",
                self.variant, dims[0], want_in
            )));
        }
        if self.variant == GnnVariant::Gat {
            for a in [&self.att_src, &self.att_dst] {
                match a {
                    Some(t) if t.dims() == [dims[0]] => {}
                    _ => {
                        return Err(Error::ShapeMismatch(
                            "GAT needs attention vectors of length D".into(),
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    fn check_inputs(&self, h: &Tensor, adjacency: &Tensor) -> Result<()> {
        self.check_weight_shape()?;
        let (hd, ad) = (h.dims(), adjacency.dims());
        let ok = match (hd.len(), ad.len()) {
            (2, 2) => ad[0] == hd[0] && ad[1] == hd[0],
            (3, 3) => ad[0] == hd[0] && ad[1] == hd[1] && ad[2] == hd[1],
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "node states {hd:?} incompatible with adjacency {ad:?}"
            )));
        }
        if hd[hd.len() - 1] != self.hidden() {
            return Err(Error::ShapeMismatch(format!(
                "hidden size {} does not match weight {:?}",
                hd[hd.len() - 1],
                self.weight.dims()
            )));
        }
        Ok(())
    }

    /// Apply the layer. Output has the shape of `h`.
    pub fn forward(&self, h: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        self.check_inputs(h, adjacency)?;
        if h.rank() == 2 {
            let out = self.forward_batched(&h.unsqueeze(0)?, &adjacency.unsqueeze(0)?)?;
            return Ok(out.squeeze(0)?);
        }
        self.forward_batched(h, adjacency)
    }

    fn forward_batched(&self, h: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let adjacency = adjacency.to_dtype(h.dtype())?;
        let degree = adjacency.sum_keepdim(D::Minus1)?;
        let has_neighbors = degree.gt(0.0)?.broadcast_as(h.shape())?;
        let w_t = self.weight.t()?;
        match self.variant {
            GnnVariant::Gcn => {
                let mean = adjacency.matmul(h)?.broadcast_div(&degree.maximum(1.0)?)?;
                let out = self.activation.apply(&mean.broadcast_matmul(&w_t)?)?;
                Ok(has_neighbors.where_cond(&out, h)?)
            }
            GnnVariant::Sage => {
                let mean = adjacency.matmul(h)?.broadcast_div(&degree.maximum(1.0)?)?;
                let joined = Tensor::cat(&[h, &mean], D::Minus1)?;
                self.activation.apply(&joined.broadcast_matmul(&w_t)?)
            }
            GnnVariant::Gat => {
                let z = h.broadcast_matmul(&w_t)?;
                let alpha = self.attention_from_projected(&z, &adjacency)?;
                let out = self.activation.apply(&alpha.matmul(&z)?)?;
                Ok(has_neighbors.where_cond(&out, h)?)
            }
        }
    }

    fn attention_from_projected(&self, z: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        let (att_src, att_dst) = match (&self.att_src, &self.att_dst) {
            (Some(s), Some(d)) => (s, d),
            _ => return Err(Error::ShapeMismatch("GAT attention vectors missing".into())),
        };
        let src = z.broadcast_matmul(&att_src.unsqueeze(1)?)?;
        let dst = z
            .broadcast_matmul(&att_dst.unsqueeze(1)?)?
            .transpose(D::Minus1, D::Minus2)?;
        let logits = src.broadcast_add(&dst)?;
        let logits = (logits.relu()? - (logits.neg()?.relu()? * GAT_NEGATIVE_SLOPE)?)?;
        let masked_fill = Tensor::full(MASKED_LOGIT, logits.shape(), logits.device())?
            .to_dtype(logits.dtype())?;
        let masked = adjacency.gt(0.0)?.where_cond(&logits, &masked_fill)?;
        Ok((candle_nn::ops::softmax(&masked, D::Minus1)? * adjacency)?)
    }

    /// GAT attention coefficients `alpha[v][u]` (rows of isolated nodes are zero).
    pub fn attention(&self, h: &Tensor, adjacency: &Tensor) -> Result<Tensor> {
        self.check_inputs(h, adjacency)?;
        let adjacency = adjacency.to_dtype(h.dtype())?;
        let z = h.broadcast_matmul(&self.weight.t()?)?;
        self.attention_from_projected(&z, &adjacency)
    }
}

/// Dense `(size, size)` adjacency tensor of a graph; rows beyond `node_count` are padding.
pub fn adjacency_tensor(
    graph: &ExplanationGraph,
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if graph.node_count > size {
        return Err(Error::ShapeMismatch(format!(
            "graph {} has {} nodes but only {size} positions",
            graph.instance_id, graph.node_count
        )));
    }
    Ok(Tensor::from_vec(graph.adjacency(size), (size, size), device)?.to_dtype(dtype)?)
}

fn forward_variant(
    variant: GnnVariant,
    h: &Tensor,
    graph: &ExplanationGraph,
    params: &GnnParameters,
) -> Result<Tensor> {
    if params.variant != variant {
        return Err(Error::InvalidArgument(format!(
            "{variant} forward called with {} parameters",
            params.variant
        )));
    }
    let n = h.dims().first().copied().unwrap_or(0);
    if h.rank() != 2 || graph.node_count != n {
        return Err(Error::ShapeMismatch(format!(
            "node states {:?} for a graph with {} nodes",
            h.dims(),
            graph.node_count
        )));
    }
    let adjacency = adjacency_tensor(graph, n, h.dtype(), h.device())?;
    params.forward(h, &adjacency)
}

/// `h_v = act(W * mean of neighbour states)`; isolated nodes unchanged.
pub fn gcn_forward(h: &Tensor, graph: &ExplanationGraph, params: &GnnParameters) -> Result<Tensor> {
    forward_variant(GnnVariant::Gcn, h, graph, params)
}

/// `h_v = act(sum_u alpha_vu W h_u)` with `alpha` softmax-normalised over neighbours;
/// isolated nodes unchanged.
pub fn gat_forward(h: &Tensor, graph: &ExplanationGraph, params: &GnnParameters) -> Result<Tensor> {
    forward_variant(GnnVariant::Gat, h, graph, params)
}

/// `h_v = act(W [h_v ; mean of neighbour states])`, zero aggregate for isolated nodes.
pub fn sage_forward(
    h: &Tensor,
    graph: &ExplanationGraph,
    params: &GnnParameters,
) -> Result<Tensor> {
    forward_variant(GnnVariant::Sage, h, graph, params)
}

/// Where the graph layer sits: after encoder layer `insert_after` (1-based), i.e. its
/// output feeds encoder layer `insert_after + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionConfig {
    pub encoder_layers: usize,
    pub insert_after: usize,
    pub layer_count: usize,
}

impl InsertionConfig {
    /// Three quarters of the way up the encoder: `max(1, floor(3L/4))`.
    pub fn three_quarters(encoder_layers: usize) -> Result<Self> {
        Self::at(encoder_layers, (3 * encoder_layers / 4).max(1))
    }

    pub fn at(encoder_layers: usize, insert_after: usize) -> Result<Self> {
        if encoder_layers == 0 || insert_after == 0 || insert_after > encoder_layers {
            return Err(Error::InvalidArgument(format!(
                "insertion index {insert_after} outside 1..={encoder_layers}"
            )));
        }
        Ok(Self {
            encoder_layers,
            insert_after,
            layer_count: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphbuild::ExplanationKind;

    fn t(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).unwrap()
    }

    fn eye(d: usize) -> Tensor {
        Tensor::eye(d, DType::F64, &Device::Cpu).unwrap()
    }

    fn graph(n: usize, edges: &[(usize, usize)]) -> ExplanationGraph {
        ExplanationGraph::new("g", n, ExplanationKind::HighlightToken, 30.0)
            .with_edges(edges)
            .unwrap()
    }

    fn rows(x: &Tensor) -> Vec<Vec<f64>> {
        x.to_vec2().unwrap()
    }

    fn id_params(variant: GnnVariant, w: Tensor, att: Option<(Tensor, Tensor)>) -> GnnParameters {
        GnnParameters::from_tensors(variant, Activation::Identity, w, att).unwrap()
    }

    #[test]
    fn insertion_index() {
        assert_eq!(
            InsertionConfig::three_quarters(24).unwrap().insert_after,
            18
        );
        assert_eq!(InsertionConfig::three_quarters(12).unwrap().insert_after, 9);
        assert_eq!(InsertionConfig::three_quarters(2).unwrap().insert_after, 1);
        assert_eq!(InsertionConfig::three_quarters(1).unwrap().insert_after, 1);
        assert!(InsertionConfig::at(4, 5).is_err());
        assert!(InsertionConfig::three_quarters(0).is_err());
    }

    #[test]
    fn gcn_single_neighbor_copies_it() {
        let h = t(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let out = gcn_forward(
            &h,
            &graph(2, &[(0, 1)]),
            &id_params(GnnVariant::Gcn, eye(2), None),
        )
        .unwrap();
        assert_eq!(rows(&out), vec![vec![3.0, -4.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn gcn_averages_neighbors_and_keeps_isolated() {
        let h = t(&[&[9.0, 9.0], &[1.0, 0.0], &[0.0, 1.0], &[7.0, -7.0]]);
        let out = gcn_forward(
            &h,
            &graph(4, &[(0, 1), (0, 2)]),
            &id_params(GnnVariant::Gcn, eye(2), None),
        )
        .unwrap();
        let r = rows(&out);
        assert_eq!(r[0], vec![0.5, 0.5]);
        assert_eq!(r[3], vec![7.0, -7.0]);
    }

    #[test]
    fn gat_single_neighbor_has_unit_weight() {
        let h = t(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let w = t(&[&[2.0, 0.0], &[1.0, 1.0]]);
        let att = (
            t(&[&[0.3, -0.1]]).squeeze(0).unwrap(),
            t(&[&[0.5, 0.2]]).squeeze(0).unwrap(),
        );
        let p =
            GnnParameters::from_tensors(GnnVariant::Gat, Activation::Relu, w, Some(att)).unwrap();
        let out = gat_forward(&h, &graph(2, &[(0, 1)]), &p).unwrap();
        // W h_1 = [6, 7], W h_0 = [2, -1] -> relu [2, 0]
        assert_eq!(rows(&out), vec![vec![6.0, 7.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn gat_equal_logits_average() {
        let h = t(&[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 4.0]]);
        let zero = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let p = id_params(GnnVariant::Gat, eye(2), Some((zero.clone(), zero)));
        let out = gat_forward(&h, &graph(3, &[(0, 1), (0, 2)]), &p).unwrap();
        assert_eq!(rows(&out)[0], vec![1.0, 2.0]);
    }

    #[test]
    fn gat_fixed_logits() {
        // logits ln 3 and ln 1 over neighbours a = [4, 0] and b = [0, 4]
        let h = t(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 4.0]]);
        let src = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let dst = Tensor::new(&[3f64.ln() / 4.0, 0.0], &Device::Cpu).unwrap();
        let p = id_params(GnnVariant::Gat, eye(2), Some((src, dst)));
        let g = graph(3, &[(0, 1), (0, 2)]);
        let alpha = rows(
            &p.attention(
                &h,
                &adjacency_tensor(&g, 3, DType::F64, &Device::Cpu).unwrap(),
            )
            .unwrap(),
        );
        assert!((alpha[0][1] - 0.75).abs() < 1e-12 && (alpha[0][2] - 0.25).abs() < 1e-12);
        let out = rows(&gat_forward(&h, &g, &p).unwrap());
        assert!((out[0][0] - 3.0).abs() < 1e-12 && (out[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sage_projection_identity() {
        let h = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let w = Tensor::cat(
            &[
                eye(2),
                Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap(),
            ],
            1,
        )
        .unwrap();
        let out = sage_forward(
            &h,
            &graph(3, &[(0, 1)]),
            &id_params(GnnVariant::Sage, w, None),
        )
        .unwrap();
        assert_eq!(rows(&out), rows(&h));
    }

    #[test]
    fn sage_concatenates_self_and_mean() {
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = Tensor::cat(&[eye(2), eye(2)], 1).unwrap();
        let out = sage_forward(
            &h,
            &graph(2, &[(0, 1)]),
            &id_params(GnnVariant::Sage, w, None),
        )
        .unwrap();
        assert_eq!(rows(&out)[0], vec![1.0, 1.0]);
    }

    #[test]
    fn sage_zero_weight_gives_activation_of_zero() {
        let h = t(&[&[1.0, -3.0], &[2.0, 5.0]]);
        let w = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let p = GnnParameters::from_tensors(GnnVariant::Sage, Activation::Relu, w, None).unwrap();
        let out = sage_forward(&h, &graph(2, &[(0, 1)]), &p).unwrap();
        assert_eq!(rows(&out), vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let h = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = id_params(GnnVariant::Gcn, eye(3), None);
        assert!(matches!(
            gcn_forward(&h, &graph(2, &[]), &p),
            Err(Error::ShapeMismatch(_))
        ));
        let p = id_params(GnnVariant::Gcn, eye(2), None);
        assert!(matches!(
            gcn_forward(&h, &graph(3, &[]), &p),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(
            GnnParameters::from_tensors(GnnVariant::Sage, Activation::Relu, eye(2), None).is_err()
        );
        assert!(gat_forward(&h, &graph(2, &[]), &p).is_err());
    }

    #[test]
    fn batched_forward_matches_single() {
        let h = t(&[&[1.0, 0.5], &[-1.0, 2.0], &[0.3, 0.3]]);
        let g = graph(3, &[(0, 2)]);
        let a = adjacency_tensor(&g, 3, DType::F64, &Device::Cpu).unwrap();
        let w = t(&[&[0.5, -1.0], &[2.0, 0.1]]);
        let p = GnnParameters::from_tensors(GnnVariant::Gcn, Activation::Relu, w, None).unwrap();
        let single = p.forward(&h, &a).unwrap();
        let batched = p
            .forward(&h.unsqueeze(0).unwrap(), &a.unsqueeze(0).unwrap())
            .unwrap();
        assert_eq!(rows(&single), rows(&batched.squeeze(0).unwrap()));
    }
}
