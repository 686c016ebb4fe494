//! Post-norm transformer blocks and stacks.
//!
//! Blocks normalize after each residual sum: `ln(x + sublayer(x))`. The
//! encoder block is self-attention plus feed-forward; the decoder block adds
//! a cross-attention sublayer between them, reading keys and values from a
//! memory sequence. Stacks apply blocks in order and pass the same masks to
//! every layer.

use crate::attention::{multi_head, AttentionMask, MultiHeadParams, TraceSite};
use crate::rng::SeedRng;
use crate::tensor::{Tensor, TensorError};
use crate::trace::{Subnet, TraceSink};

type Result<T> = std::result::Result<T, TensorError>;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Learned per-feature scale and shift around row normalization.
#[derive(Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    /// Identity transform at init: unit scale, zero shift.
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::param(&[d], vec![1.0; d]).expect("consistent by construction"),
            beta: Tensor::param(&[d], vec![0.0; d]).expect("consistent by construction"),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug)]
pub struct FeedForwardParams {
    /// `[d, d_ff]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[d_ff, d]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForwardParams {
    pub fn init(d: usize, d_ff: usize, rng: &mut SeedRng) -> Self {
        let mat = |rows: usize, cols: usize, rng: &mut SeedRng| {
            let mut v = vec![0.0; rows * cols];
            rng.fill_gaussian(&mut v, 0.0, crate::attention::INIT_STD);
            Tensor::param(&[rows, cols], v).expect("consistent by construction")
        };
        FeedForwardParams {
            w1: mat(d, d_ff, rng),
            b1: Tensor::param(&[d_ff], vec![0.0; d_ff]).expect("consistent by construction"),
            w2: mat(d_ff, d, rng),
            b2: Tensor::param(&[d], vec![0.0; d]).expect("consistent by construction"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?
            .add_bias(&self.b1)?
            .relu()
            .matmul(&self.w2)?
            .add_bias(&self.b2)
    }
}

#[derive(Debug)]
pub struct EncoderBlockParams {
    pub attn: MultiHeadParams,
    pub ln_attn: LayerNormParams,
    pub ff: FeedForwardParams,
    pub ln_ff: LayerNormParams,
}

impl EncoderBlockParams {
    pub fn init(d: usize, heads: usize, d_ff: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(EncoderBlockParams {
            attn: MultiHeadParams::init(d, heads, rng)?,
            ln_attn: LayerNormParams::init(d),
            ff: FeedForwardParams::init(d, d_ff, rng),
            ln_ff: LayerNormParams::init(d),
        })
    }
}

/// `ln(h + ff(h))` where `h = ln(x + self_attn(x))`.
pub fn encoder_block(
    x: &Tensor,
    mask: Option<&AttentionMask>,
    params: &EncoderBlockParams,
    mut sink: Option<&mut TraceSink>,
    site: TraceSite,
) -> Result<Tensor> {
    let attn = multi_head(x, x, &params.attn, mask, sink.as_deref_mut(), site)?;
    let h = params.ln_attn.apply(&x.add(&attn)?)?;
    let ff = params.ff.apply(&h)?;
    params.ln_ff.apply(&h.add(&ff)?)
}

#[derive(Debug)]
pub struct DecoderBlockParams {
    pub self_attn: MultiHeadParams,
    pub ln_self: LayerNormParams,
    pub cross_attn: MultiHeadParams,
    pub ln_cross: LayerNormParams,
    pub ff: FeedForwardParams,
    pub ln_ff: LayerNormParams,
}

impl DecoderBlockParams {
    pub fn init(d: usize, heads: usize, d_ff: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(DecoderBlockParams {
            self_attn: MultiHeadParams::init(d, heads, rng)?,
            ln_self: LayerNormParams::init(d),
            cross_attn: MultiHeadParams::init(d, heads, rng)?,
            ln_cross: LayerNormParams::init(d),
            ff: FeedForwardParams::init(d, d_ff, rng),
            ln_ff: LayerNormParams::init(d),
        })
    }
}

/// Self-attention, then cross-attention into `memory`, then feed-forward,
/// each behind its own residual and layer norm.
pub fn decoder_block(
    x: &Tensor,
    memory: &Tensor,
    self_mask: Option<&AttentionMask>,
    cross_mask: Option<&AttentionMask>,
    params: &DecoderBlockParams,
    mut sink: Option<&mut TraceSink>,
    layer: usize,
) -> Result<Tensor> {
    let self_site = TraceSite {
        subnet: Subnet::DecoderSelf,
        layer,
    };
    let cross_site = TraceSite {
        subnet: Subnet::DecoderCross,
        layer,
    };
    let sa = multi_head(x, x, &params.self_attn, self_mask, sink.as_deref_mut(), self_site)?;
    let a = params.ln_self.apply(&x.add(&sa)?)?;
    let ca = multi_head(
        &a,
        memory,
        &params.cross_attn,
        cross_mask,
        sink.as_deref_mut(),
        cross_site,
    )?;
    let b = params.ln_cross.apply(&a.add(&ca)?)?;
    let ff = params.ff.apply(&b)?;
    params.ln_ff.apply(&b.add(&ff)?)
}

/// Apply encoder blocks in order. An empty stack returns the input unchanged.
pub fn encode_stack(
    x: &Tensor,
    mask: Option<&AttentionMask>,
    blocks: &[EncoderBlockParams],
    mut sink: Option<&mut TraceSink>,
    subnet: Subnet,
) -> Result<Tensor> {
    let mut h = x.clone();
    for (layer, block) in blocks.iter().enumerate() {
        let site = TraceSite { subnet, layer };
        h = encoder_block(&h, mask, block, sink.as_deref_mut(), site)?;
    }
    Ok(h)
}

/// Apply decoder blocks in order against a fixed memory.
pub fn decode_stack(
    x: &Tensor,
    memory: &Tensor,
    self_mask: Option<&AttentionMask>,
    cross_mask: Option<&AttentionMask>,
    blocks: &[DecoderBlockParams],
    mut sink: Option<&mut TraceSink>,
) -> Result<Tensor> {
    let mut h = x.clone();
    for (layer, block) in blocks.iter().enumerate() {
        h = decoder_block(
            &h,
            memory,
            self_mask,
            cross_mask,
            block,
            sink.as_deref_mut(),
            layer,
        )?;
    }
    Ok(h)
}
