//! Multimodal binary classification with modality translation and masked fusion.
//!
//! The model consumes examples that carry text and, optionally, a pre-extracted
//! image feature map with machine captions. Image features are projected into the
//! text embedding space, translated by a transformer decoder that uses caption
//! tokens as queries, then fused with the text by a transformer encoder whose
//! attention mask hides absent modalities. Masking is exact: hidden positions get
//! attention weight 0.0 bitwise, so neither outputs nor gradients depend on
//! placeholder content.
//!
//! Everything is computed in `f64` on a small reverse-mode autodiff core
//! ([`tensor`]). All randomness flows through seeded generators ([`rng`]), and
//! training runs with the same seed produce byte-identical artifacts.

pub mod attention;
pub mod data;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use data::{ImageFeatureMap, MultimodalExample};
pub use model::{MarmotParams, ModelConfig, PoolingMode};
pub use rng::SeedRng;
pub use tensor::{Tensor, TensorError};
pub use vocab::Vocab;


