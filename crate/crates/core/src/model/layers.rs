use candle_core::{Module, Tensor, D};
use candle_nn::{linear_no_bias, Init, Linear, VarBuilder};

use crate::error::Result;

/// Post-norm layer normalisation built from differentiable primitives.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(size: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(hidden: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            q: linear_no_bias(hidden, hidden, vb.pp("q"))?,
            k: linear_no_bias(hidden, hidden, vb.pp("k"))?,
            v: linear_no_bias(hidden, hidden, vb.pp("v"))?,
            o: linear_no_bias(hidden, hidden, vb.pp("o"))?,
            heads,
            head_dim: hidden / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attended output `(B, Tq, D)` and the probabilities `(B, H, Tq, Tk)`.
    /// `bias` is added to the scores and must broadcast to `(B, H, Tq, Tk)`.
    pub(crate) fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, tq, hidden) = queries.dims3()?;
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys)?)?;
        let v = self.split_heads(&self.v.forward(keys)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, tq, hidden))?;
        Ok((self.o.forward(&ctx)?, probs))
    }

    /// Output for externally supplied probabilities `(B, H, Tq, Tk)`.
    pub(crate) fn attend(&self, keys: &Tensor, probs: &Tensor) -> Result<Tensor> {
        let (b, _, tq, _) = probs.dims4()?;
        let v = self.split_heads(&self.v.forward(keys)?)?;
        let ctx =
            probs
                .matmul(&v)?
                .transpose(1, 2)?
                .reshape((b, tq, self.heads * self.head_dim))?;
        Ok(self.o.forward(&ctx)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub(crate) fn new(hidden: usize, ff: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            up: candle_nn::linear(hidden, ff, vb.pp("up"))?,
            down: candle_nn::linear(ff, hidden, vb.pp("down"))?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.relu()?)?)
    }
}

/// `h~ = LN(h + Attn(h))`, `h' = LN(h~ + FFN(h~))`.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub(crate) fn new(hidden: usize, heads: usize, ff: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(hidden, heads, vb.pp("attn"))?,
            norm1: LayerNorm::new(hidden, vb.pp("norm1"))?,
            ff: FeedForward::new(hidden, ff, vb.pp("ff"))?,
            norm2: LayerNorm::new(hidden, vb.pp("norm2"))?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, probs) = self.attn.forward(x, x, Some(key_bias))?;
        let x = self.norm1.forward(&(x + a)?)?;
        let x = self.norm2.forward(&(&x + self.ff.forward(&x)?)?)?;
        Ok((x, probs))
    }

    pub(crate) fn forward_with_probs(&self, x: &Tensor, probs: &Tensor) -> Result<Tensor> {
        let a = self.attn.attend(x, probs)?;
        let x = self.norm1.forward(&(x + a)?)?;
        self.norm2.forward(&(&x + self.ff.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub(crate) fn new(hidden: usize, heads: usize, ff: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(hidden, heads, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(hidden, vb.pp("norm1"))?,
            cross_attn: MultiHeadAttention::new(hidden, heads, vb.pp("cross_attn"))?,
            norm2: LayerNorm::new(hidden, vb.pp("norm2"))?,
            ff: FeedForward::new(hidden, ff, vb.pp("ff"))?,
            norm3: LayerNorm::new(hidden, vb.pp("norm3"))?,
        })
    }

    /// Returns the new states and the cross-attention probabilities.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal_bias: &Tensor,
        memory_bias: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.forward_inner(x, memory, causal_bias, memory_bias, None)
    }

    /// Like `forward`, but with the cross-attention probabilities replaced by `cross`.
    pub(crate) fn forward_with_cross(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal_bias: &Tensor,
        cross: &Tensor,
    ) -> Result<Tensor> {
        Ok(self
            .forward_inner(x, memory, causal_bias, cross, Some(cross))?
            .0)
    }

    fn forward_inner(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal_bias: &Tensor,
        memory_bias: &Tensor,
        cross_override: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (a, _) = self.self_attn.forward(x, x, Some(causal_bias))?;
        let x = self.norm1.forward(&(x + a)?)?;
        let (c, cross) = match cross_override {
            Some(p) => (self.cross_attn.attend(memory, p)?, p.clone()),
            None => self.cross_attn.forward(&x, memory, Some(memory_bias))?,
        };
        let x = self.norm2.forward(&(&x + c)?)?;
        let x = self.norm3.forward(&(&x + self.ff.forward(&x)?)?)?;
        Ok((x, cross))
    }
}
