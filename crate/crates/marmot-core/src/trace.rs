//! Capture of attention weights during a forward pass.
//!
//! Weights are only copied out when a [`TraceSink`] is supplied, so ordinary
//! training and inference never pay for retention. Records identify the
//! attention site by sub-network, layer, and head; row/column labels are
//! attached later at export time, where the vocabulary is available.

/// Which attention sub-network a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subnet {
    /// Translation decoder, self-attention over caption tokens.
    DecoderSelf,
    /// Translation decoder, cross-attention from captions into image features.
    DecoderCross,
    /// Fusion encoder, self-attention over the assembled sequence.
    Fusion,
}

impl Subnet {
    pub fn label(self) -> &'static str {
        match self {
            Subnet::DecoderSelf => "decoder-self",
            Subnet::DecoderCross => "decoder-cross",
            Subnet::Fusion => "fusion",
        }
    }
}

/// One head's attention weight matrix, row-major `[n_q, n_k]`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub subnet: Subnet,
    pub layer: usize,
    pub head: usize,
    pub n_q: usize,
    pub n_k: usize,
    pub weights: Vec<f64>,
}

/// Collects [`AttentionRecord`]s in forward-pass order.
#[derive(Debug, Default)]
pub struct TraceSink {
    pub records: Vec<AttentionRecord>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, record: AttentionRecord) {
        self.records.push(record);
    }
}
