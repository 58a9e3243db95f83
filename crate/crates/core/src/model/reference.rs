/// Shape summary of a published encoder-decoder checkpoint, sufficient to count its
/// parameters without loading weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerDims {
    pub name: &'static str,
    pub vocab_size: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Projections and feed-forward layers carry biases.
    pub linear_bias: bool,
    /// Layer norms carry a bias vector besides the gain.
    pub norm_bias: bool,
    /// Learned absolute position rows per stack.
    pub learned_positions: usize,
    /// Relative-position buckets per stack (one scalar per bucket and head).
    pub relative_buckets: usize,
    /// Layer norms per stack outside the layers.
    pub stack_norms: usize,
}

pub const T5_LARGE: TransformerDims = TransformerDims {
    name: "t5-large",
    vocab_size: 32128,
    hidden: 1024,
    ff_dim: 4096,
    heads: 16,
    encoder_layers: 24,
    decoder_layers: 24,
    linear_bias: false,
    norm_bias: false,
    learned_positions: 0,
    relative_buckets: 32,
    stack_norms: 1,
};

pub const BART_LARGE: TransformerDims = TransformerDims {
    name: "bart-large",
    vocab_size: 50265,
    hidden: 1024,
    ff_dim: 4096,
    heads: 16,
    encoder_layers: 12,
    decoder_layers: 12,
    linear_bias: true,
    norm_bias: true,
    learned_positions: 1026,
    relative_buckets: 0,
    stack_norms: 1,
};

impl TransformerDims {
    fn attention(&self) -> usize {
        let d = self.hidden;
        4 * (d * d + if self.linear_bias { d } else { 0 })
    }

    fn feed_forward(&self) -> usize {
        let (d, f) = (self.hidden, self.ff_dim);
        2 * d * f + if self.linear_bias { d + f } else { 0 }
    }

    fn norm(&self) -> usize {
        self.hidden * if self.norm_bias { 2 } else { 1 }
    }

    /// Trainable parameters with input and output embeddings tied.
    pub fn parameter_count(&self) -> usize {
        let encoder_layer = self.attention() + self.feed_forward() + 2 * self.norm();
        let decoder_layer = 2 * self.attention() + self.feed_forward() + 3 * self.norm();
        let per_stack = self.learned_positions * self.hidden
            + self.relative_buckets * self.heads
            + self.stack_norms * self.norm();
        self.vocab_size * self.hidden
            + self.encoder_layers * encoder_layer
            + self.decoder_layers * decoder_layer
            + 2 * per_stack
    }

    /// Parameters added by a graph layer as a percentage of the base model.
    pub fn overhead_percent(&self, added: usize) -> f64 {
        100.0 * added as f64 / self.parameter_count() as f64
    }
}
