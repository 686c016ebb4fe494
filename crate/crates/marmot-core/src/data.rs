//! Example and feature-map types with their structural invariants.
//!
//! An example always has a text field (possibly empty) and optionally an image
//! feature map with machine captions. Captions and image travel together:
//! captions without an image or an image without captions is malformed, and an
//! example with neither text nor image carries no signal at all and is
//! rejected at ingestion.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("feature map {channels}x{height}x{width} wants {want} values, got {got}")]
    MapSize {
        channels: usize,
        height: usize,
        width: usize,
        want: usize,
        got: usize,
    },
    #[error("feature map has a non-finite value at index {index}")]
    MapNonFinite { index: usize },
    #[error("feature map dimensions must all be non-zero")]
    MapEmpty,
    #[error("captions and image must be present together")]
    CaptionImageMismatch,
    #[error("caption {index} has no tokens")]
    EmptyCaption { index: usize },
    #[error("no modality present: text is empty and there is no image")]
    NoModality,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
}

/// Dense `channels x height x width` grid of pre-extracted image features,
/// stored row-major as `[c][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageFeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::MapEmpty);
        }
        let want = channels * height * width;
        if values.len() != want {
            return Err(DataError::MapSize {
                channels,
                height,
                width,
                want,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::MapNonFinite { index });
        }
        Ok(ImageFeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    /// Map with every entry equal to `v`.
    pub fn constant(channels: usize, height: usize, width: usize, v: f64) -> Self {
        ImageFeatureMap::new(channels, height, width, vec![v; channels * height * width])
            .expect("consistent by construction")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial cells, `height * width`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.values[(c * self.height + h) * self.width + w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// One classification example. `text` and `captions` hold token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub text: Vec<usize>,
    pub captions: Vec<Vec<usize>>,
    pub image: Option<ImageFeatureMap>,
    pub label: Option<u8>,
}

impl MultimodalExample {
    pub fn validate(&self) -> Result<(), DataError> {
        match (&self.image, self.captions.is_empty()) {
            (Some(_), true) | (None, false) => return Err(DataError::CaptionImageMismatch),
            _ => {}
        }
        if let Some(index) = self.captions.iter().position(|c| c.is_empty()) {
            return Err(DataError::EmptyCaption { index });
        }
        if self.text.is_empty() && self.image.is_none() {
            return Err(DataError::NoModality);
        }
        if let Some(label) = self.label {
            if label > 1 {
                return Err(DataError::BadLabel(label));
            }
        }
        Ok(())
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }

    /// Copy with image and captions stripped, keeping text and label. This is
    /// how the text-only ablation is run: the model then masks the image side
    /// exactly as it does for natively text-only examples.
    pub fn without_image(&self) -> MultimodalExample {
        MultimodalExample {
            id: self.id.clone(),
            text: self.text.clone(),
            captions: Vec::new(),
            image: None,
            label: self.label,
        }
    }
}
