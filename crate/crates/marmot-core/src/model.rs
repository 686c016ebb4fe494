//! The multimodal classifier.
//!
//! Pipeline for one example:
//!
//! 1. Project the `C x H x W` image feature map into the embedding space with
//!    a 1x1 projection, flattening the spatial grid into `H*W` rows.
//! 2. Translate: a transformer decoder takes embedded caption tokens as
//!    queries and cross-attends into the projected image rows, producing one
//!    translated row per caption token.
//! 3. Assemble `[CLS | text | captions | translated image]` with token-type
//!    embeddings (0 text, 1 caption, 2 image) and per-segment positions that
//!    restart at 0. Translated rows get the type-2 embedding but no position
//!    embedding; they already carry position information from the decoder.
//! 4. Fuse with a transformer encoder under a presence mask, pool (CLS row or
//!    mean over present non-CLS rows), and classify with a two-layer ReLU head.
//!
//! Examples without an image get placeholder content (a zero feature map and a
//! `[PAD]` caption) whose positions are marked absent. The mask arithmetic is
//! exact, so logits, pooled representation, and every parameter gradient are
//! bitwise independent of what the placeholder contains, and the parameters
//! that only serve the image path keep exactly zero gradients.

use serde::{Deserialize, Serialize};

use crate::attention::{embed, AttentionMask, EmbeddingTables, INIT_STD};
use crate::data::{DataError, ImageFeatureMap, MultimodalExample};
use crate::rng::SeedRng;
use crate::tensor::{softmax_values, Tensor, TensorError};
use crate::trace::{Subnet, TraceSink};
use crate::transformer::{
    decode_stack, encode_stack, DecoderBlockParams, EncoderBlockParams,
};
use crate::vocab::{PAD, SEP};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// How the fused sequence becomes one representation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Take the CLS row.
    Cls,
    /// Average the present non-CLS rows.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub d_model: usize,
    pub heads: usize,
    /// Fusion encoder depth.
    pub encoder_layers: usize,
    /// Translation decoder depth.
    pub decoder_layers: usize,
    /// Feed-forward inner width; conventionally `4 * d_model`.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Classifier hidden width; conventionally `d_model / 2`.
    pub k_hidden: usize,
    /// Channels `C` of incoming image feature maps.
    pub image_channels: usize,
    pub pooling: PoolingMode,
}

impl ModelConfig {
    /// Config with conventional derived sizes: `d_ff = 4d`, `k_hidden = d/2`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_dims(
        d_model: usize,
        heads: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        vocab_size: usize,
        max_positions: usize,
        image_channels: usize,
    ) -> Self {
        ModelConfig {
            d_model,
            heads,
            encoder_layers,
            decoder_layers,
            d_ff: 4 * d_model,
            vocab_size,
            max_positions,
            k_hidden: (d_model / 2).max(1),
            image_channels,
            pooling: PoolingMode::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.d_ff == 0 || self.k_hidden == 0 {
            return fail("d_ff and k_hidden must be positive".into());
        }
        if self.vocab_size <= crate::vocab::MASK {
            return fail(format!(
                "vocab_size {} cannot even hold the reserved tokens",
                self.vocab_size
            ));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.image_channels == 0 {
            return fail("image_channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ClassifierParams {
    /// `[d, k_hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[k_hidden, 2]`
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Which freeze/unfreeze unit a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Image projection: trainable from the first epoch.
    ImagePath,
    /// Translation decoder blocks.
    TranslationDecoder,
    /// Fusion encoder, embedding tables, CLS embedding.
    LanguageModel,
    /// Classification head: trainable in every phase.
    Classifier,
}

/// All learned state plus the config it was built for.
#[derive(Debug)]
pub struct MarmotParams {
    pub config: ModelConfig,
    /// `[C, d]` 1x1 projection applied per spatial cell.
    pub proj: Tensor,
    pub translation_decoder: Vec<DecoderBlockParams>,
    pub fusion_encoder: Vec<EncoderBlockParams>,
    pub tables: EmbeddingTables,
    /// `[1, d]` learned CLS row.
    pub cls_embedding: Tensor,
    pub classifier: ClassifierParams,
}

/// Variance of the noise added when deriving the image token type from the
/// text and caption token types.
pub const TOKEN_TYPE_NOISE_VAR: f64 = 1e-4;

/// Third token type: the mean of the first two plus small Gaussian noise, so
/// it starts close to the types the language side already understands.
pub fn init_third_token_type(t1: &[f64], t2: &[f64], rng: &mut SeedRng) -> Result<Vec<f64>> {
    if t1.len() != t2.len() {
        return Err(ModelError::Config(format!(
            "token type vectors disagree in length: {} vs {}",
            t1.len(),
            t2.len()
        )));
    }
    let std = TOKEN_TYPE_NOISE_VAR.sqrt();
    Ok(t1
        .iter()
        .zip(t2)
        .map(|(a, b)| (a + b) / 2.0 + rng.gaussian(0.0, std))
        .collect())
}

impl MarmotParams {
    pub fn init(config: &ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mat = |rows: usize, cols: usize, rng: &mut SeedRng| {
            let mut v = vec![0.0; rows * cols];
            rng.fill_gaussian(&mut v, 0.0, INIT_STD);
            Tensor::param(&[rows, cols], v).expect("consistent by construction")
        };

        let proj = mat(config.image_channels, d, rng);
        let translation_decoder = (0..config.decoder_layers)
            .map(|_| DecoderBlockParams::init(d, config.heads, config.d_ff, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let fusion_encoder = (0..config.encoder_layers)
            .map(|_| EncoderBlockParams::init(d, config.heads, config.d_ff, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let tables = EmbeddingTables::init(config.vocab_size, config.max_positions, d, rng);

        let tt = tables.token_type.to_vec();
        let t3 = init_third_token_type(&tt[..d], &tt[d..2 * d], rng)?;
        tables
            .token_type
            .update_values(|v| v[2 * d..3 * d].copy_from_slice(&t3));

        let cls_embedding = mat(1, d, rng);
        let classifier = ClassifierParams {
            w1: mat(d, config.k_hidden, rng),
            b1: Tensor::param(&[config.k_hidden], vec![0.0; config.k_hidden])
                .expect("consistent by construction"),
            w2: mat(config.k_hidden, 2, rng),
            b2: Tensor::param(&[2], vec![0.0; 2]).expect("consistent by construction"),
        };
        Ok(MarmotParams {
            config: config.clone(),
            proj,
            translation_decoder,
            fusion_encoder,
            tables,
            cls_embedding,
            classifier,
        })
    }

    /// Every learned tensor with a stable name and its freeze group, in a
    /// fixed order. Optimizer state and the on-disk format both key off this.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, Tensor)> {
        use ParamGroup::*;
        let mut out: Vec<(String, ParamGroup, Tensor)> = Vec::new();
        let push_attn = |out: &mut Vec<(String, ParamGroup, Tensor)>,
                         prefix: String,
                         group: ParamGroup,
                         attn: &crate::attention::MultiHeadParams| {
            for h in 0..attn.heads {
                out.push((format!("{prefix}.w_q.{h}"), group, attn.w_q[h].clone()));
                out.push((format!("{prefix}.w_k.{h}"), group, attn.w_k[h].clone()));
                out.push((format!("{prefix}.w_v.{h}"), group, attn.w_v[h].clone()));
            }
            out.push((format!("{prefix}.w_o"), group, attn.w_o.clone()));
        };
        let push_ln = |out: &mut Vec<(String, ParamGroup, Tensor)>,
                       prefix: String,
                       group: ParamGroup,
                       ln: &crate::transformer::LayerNormParams| {
            out.push((format!("{prefix}.gamma"), group, ln.gamma.clone()));
            out.push((format!("{prefix}.beta"), group, ln.beta.clone()));
        };
        let push_ff = |out: &mut Vec<(String, ParamGroup, Tensor)>,
                       prefix: String,
                       group: ParamGroup,
                       ff: &crate::transformer::FeedForwardParams| {
            out.push((format!("{prefix}.w1"), group, ff.w1.clone()));
            out.push((format!("{prefix}.b1"), group, ff.b1.clone()));
            out.push((format!("{prefix}.w2"), group, ff.w2.clone()));
            out.push((format!("{prefix}.b2"), group, ff.b2.clone()));
        };

        out.push(("proj".into(), ImagePath, self.proj.clone()));
        for (l, block) in self.translation_decoder.iter().enumerate() {
            let p = format!("translation_decoder.{l}");
            push_attn(&mut out, format!("{p}.self_attn"), TranslationDecoder, &block.self_attn);
            push_ln(&mut out, format!("{p}.ln_self"), TranslationDecoder, &block.ln_self);
            push_attn(&mut out, format!("{p}.cross_attn"), TranslationDecoder, &block.cross_attn);
            push_ln(&mut out, format!("{p}.ln_cross"), TranslationDecoder, &block.ln_cross);
            push_ff(&mut out, format!("{p}.ff"), TranslationDecoder, &block.ff);
            push_ln(&mut out, format!("{p}.ln_ff"), TranslationDecoder, &block.ln_ff);
        }
        for (l, block) in self.fusion_encoder.iter().enumerate() {
            let p = format!("fusion_encoder.{l}");
            push_attn(&mut out, format!("{p}.attn"), LanguageModel, &block.attn);
            push_ln(&mut out, format!("{p}.ln_attn"), LanguageModel, &block.ln_attn);
            push_ff(&mut out, format!("{p}.ff"), LanguageModel, &block.ff);
            push_ln(&mut out, format!("{p}.ln_ff"), LanguageModel, &block.ln_ff);
        }
        out.push(("embeddings.token".into(), LanguageModel, self.tables.token.clone()));
        out.push(("embeddings.position".into(), LanguageModel, self.tables.position.clone()));
        out.push(("embeddings.token_type".into(), LanguageModel, self.tables.token_type.clone()));
        out.push(("cls_embedding".into(), LanguageModel, self.cls_embedding.clone()));
        out.push(("classifier.w1".into(), Classifier, self.classifier.w1.clone()));
        out.push(("classifier.b1".into(), Classifier, self.classifier.b1.clone()));
        out.push(("classifier.w2".into(), Classifier, self.classifier.w2.clone()));
        out.push(("classifier.b2".into(), Classifier, self.classifier.b2.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, _, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

/// Project each spatial cell's channel vector through `proj` (`[C, d]`) and
/// flatten the grid row-major to `[H*W, d]`; cell `(h, w)` becomes row
/// `h * W + w`.
pub fn project_and_flatten(map: &ImageFeatureMap, proj: &Tensor) -> Result<Tensor> {
    let c = map.channels();
    if proj.rank() != 2 || proj.shape()[0] != c {
        return Err(TensorError::ShapeMismatch {
            op: "project_and_flatten",
            left: vec![c, map.height(), map.width()],
            right: proj.shape().to_vec(),
        }
        .into());
    }
    let cells = map.cells();
    let mut rows = vec![0.0; cells * c];
    for h in 0..map.height() {
        for w in 0..map.width() {
            let cell = h * map.width() + w;
            for ch in 0..c {
                rows[cell * c + ch] = map.at(ch, h, w);
            }
        }
    }
    let cell_matrix = Tensor::constant(&[cells, c], rows)?;
    Ok(cell_matrix.matmul(proj)?)
}

/// Caption tokens flattened into one sequence with `[SEP]` between captions.
/// Positions restart at 0 per caption; a separator continues its caption's
/// numbering. Returns `(token_ids, positions)`.
pub fn flatten_captions(captions: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for (i, caption) in captions.iter().enumerate() {
        for (p, &tok) in caption.iter().enumerate() {
            ids.push(tok);
            positions.push(p);
        }
        if i + 1 < captions.len() {
            ids.push(SEP);
            positions.push(caption.len());
        }
    }
    (ids, positions)
}

/// Translate image features into the text space: embedded caption tokens
/// query the projected image rows through the decoder stack. Output length
/// equals the flattened caption token count.
pub fn modality_translation(
    captions: &[Vec<usize>],
    image_rows: &Tensor,
    params: &MarmotParams,
    sink: Option<&mut TraceSink>,
) -> Result<Tensor> {
    let (ids, positions) = flatten_captions(captions);
    if ids.is_empty() {
        return Err(ModelError::Config(
            "modality translation needs at least one caption token".into(),
        ));
    }
    let type_ids = vec![1usize; ids.len()];
    let queries = embed(&ids, &type_ids, &positions, &params.tables)?;
    Ok(decode_stack(
        &queries,
        image_rows,
        None,
        None,
        &params.translation_decoder,
        sink,
    )?)
}

/// Segment a fused-sequence position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    Cls,
    Text,
    Caption,
    Image,
}

/// Position-by-position metadata for an assembled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub tags: Vec<SegmentTag>,
    /// Token id per position; `None` for CLS and translated image rows.
    pub token_ids: Vec<Option<usize>>,
    pub type_ids: Vec<usize>,
    /// Segment-local position, 0-indexed.
    pub positions: Vec<usize>,
    pub present: Vec<bool>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Embedded fused sequence plus its layout.
#[derive(Debug)]
pub struct SegmentedSequence {
    /// `[n, d]`
    pub rows: Tensor,
    pub layout: SequenceLayout,
}

/// Stand-in content for examples that lack an image. Content is arbitrary:
/// masking keeps it out of every output and gradient, bit for bit.
#[derive(Debug, Clone)]
pub struct DummyContent {
    pub image: ImageFeatureMap,
    pub caption: Vec<usize>,
}

impl DummyContent {
    pub fn default_for(config: &ModelConfig) -> Self {
        DummyContent {
            image: ImageFeatureMap::constant(config.image_channels, 1, 1, 0.0),
            caption: vec![PAD],
        }
    }
}

struct EffectiveInputs<'a> {
    text_ids: Vec<usize>,
    text_present: bool,
    captions: &'a [Vec<usize>],
    image: &'a ImageFeatureMap,
    image_present: bool,
}

fn effective_inputs<'a>(
    example: &'a MultimodalExample,
    dummy: &'a DummyContent,
) -> Result<EffectiveInputs<'a>> {
    example.validate().map_err(ModelError::Data)?;
    if dummy.caption.is_empty() {
        return Err(ModelError::Config("dummy caption must not be empty".into()));
    }
    let (text_ids, text_present) = if example.text.is_empty() {
        (vec![PAD], false)
    } else {
        (example.text.clone(), true)
    };
    let (captions, image, image_present) = match &example.image {
        Some(map) => (example.captions.as_slice(), map, true),
        None => (std::slice::from_ref(&dummy.caption), &dummy.image, false),
    };
    Ok(EffectiveInputs {
        text_ids,
        text_present,
        captions,
        image,
        image_present,
    })
}

/// Build the fused input `[CLS | text | captions | translated image]`.
/// Token-type embeddings are added everywhere; position embeddings everywhere
/// except the translated rows, whose layout positions are recorded as
/// `0..L-1` for labeling.
fn assemble(
    inputs: &EffectiveInputs,
    translated: &Tensor,
    params: &MarmotParams,
) -> Result<SegmentedSequence> {
    let tables = &params.tables;
    let d = tables.d();

    let cls_row = params
        .cls_embedding
        .add(&tables.position.gather_rows(&[0])?)?
        .add(&tables.token_type.gather_rows(&[0])?)?;

    let text_positions: Vec<usize> = (0..inputs.text_ids.len()).collect();
    let text_types = vec![0usize; inputs.text_ids.len()];
    let text_rows = embed(&inputs.text_ids, &text_types, &text_positions, tables)?;

    let (cap_ids, cap_positions) = flatten_captions(inputs.captions);
    let cap_types = vec![1usize; cap_ids.len()];
    let cap_rows = embed(&cap_ids, &cap_types, &cap_positions, tables)?;

    let n_img = translated.shape()[0];
    let ones = Tensor::constant(&[n_img, 1], vec![1.0; n_img])?;
    let t3 = ones.matmul(&tables.token_type.gather_rows(&[2])?)?;
    let image_rows = translated.add(&t3)?;

    let rows = Tensor::concat_rows(&[cls_row, text_rows, cap_rows, image_rows])?;

    let mut tags = vec![SegmentTag::Cls];
    let mut token_ids: Vec<Option<usize>> = vec![None];
    let mut type_ids = vec![0usize];
    let mut positions = vec![0usize];
    let mut present = vec![true];
    for (i, &id) in inputs.text_ids.iter().enumerate() {
        tags.push(SegmentTag::Text);
        token_ids.push(Some(id));
        type_ids.push(0);
        positions.push(i);
        present.push(inputs.text_present);
    }
    for (&id, &p) in cap_ids.iter().zip(&cap_positions) {
        tags.push(SegmentTag::Caption);
        token_ids.push(Some(id));
        type_ids.push(1);
        positions.push(p);
        present.push(inputs.image_present);
    }
    for i in 0..n_img {
        tags.push(SegmentTag::Image);
        token_ids.push(None);
        type_ids.push(2);
        positions.push(i);
        present.push(inputs.image_present);
    }
    debug_assert_eq!(rows.shape(), &[tags.len(), d]);
    Ok(SegmentedSequence {
        rows,
        layout: SequenceLayout {
            tags,
            token_ids,
            type_ids,
            positions,
            present,
        },
    })
}

/// Fusion mask: pairs are allowed iff both positions are present.
pub fn build_fusion_mask(layout: &SequenceLayout) -> AttentionMask {
    AttentionMask::from_presence(&layout.present)
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[1, 2]` class scores.
    pub logits: Tensor,
    /// `[1, d]` pooled representation.
    pub representation: Tensor,
    pub layout: SequenceLayout,
}

/// Forward pass with default placeholder content and no tracing.
pub fn forward(example: &MultimodalExample, params: &MarmotParams) -> Result<ForwardOutput> {
    forward_with(
        example,
        params,
        &DummyContent::default_for(&params.config),
        None,
    )
}

/// Forward pass with explicit placeholder content and optional attention
/// capture. Text longer than `max_positions` (or over-long captions) must be
/// truncated upstream; out-of-range positions fail here with an index error.
pub fn forward_with(
    example: &MultimodalExample,
    params: &MarmotParams,
    dummy: &DummyContent,
    mut sink: Option<&mut TraceSink>,
) -> Result<ForwardOutput> {
    let inputs = effective_inputs(example, dummy)?;

    let image_rows = project_and_flatten(inputs.image, &params.proj)?;
    let translated =
        modality_translation(inputs.captions, &image_rows, params, sink.as_deref_mut())?;
    let seq = assemble(&inputs, &translated, params)?;
    let mask = build_fusion_mask(&seq.layout);
    let fused = encode_stack(
        &seq.rows,
        Some(&mask),
        &params.fusion_encoder,
        sink.as_deref_mut(),
        Subnet::Fusion,
    )?;

    let representation = match params.config.pooling {
        PoolingMode::Cls => fused.slice_rows(0, 1)?,
        PoolingMode::Mean => {
            let rows: Vec<usize> = seq
                .layout
                .present
                .iter()
                .enumerate()
                .filter(|&(i, &p)| p && seq.layout.tags[i] != SegmentTag::Cls)
                .map(|(i, _)| i)
                .collect();
            fused.mean_rows(&rows)?
        }
    };

    let c = &params.classifier;
    let logits = representation
        .matmul(&c.w1)?
        .add_bias(&c.b1)?
        .relu()
        .matmul(&c.w2)?
        .add_bias(&c.b2)?;

    Ok(ForwardOutput {
        logits,
        representation,
        layout: seq.layout,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: u8,
    /// Softmax probability of class 1.
    pub p_positive: f64,
}

/// Classify one example: class 1 iff `p_positive >= threshold`.
pub fn predict(
    example: &MultimodalExample,
    params: &MarmotParams,
    threshold: f64,
) -> Result<Prediction> {
    let out = forward(example, params)?;
    let p = softmax_values(&out.logits.to_vec())[1];
    Ok(Prediction {
        class: u8::from(p >= threshold),
        p_positive: p,
    })
}
