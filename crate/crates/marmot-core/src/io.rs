//! On-disk formats and their readers/writers.
//!
//! Every file starts with (or contains) `format_version` and `kind` fields so
//! tools can refuse what they do not understand. Line-delimited JSON is used
//! for datasets and predictions (streamable, diffable); single JSON documents
//! for params, reports, configs, and traces. Large image feature maps can
//! live in binary sidecar files referenced by relative path.
//!
//! All writers are deterministic: field order follows struct order and floats
//! print in shortest round-trip form, so identical inputs give byte-identical
//! files and reloading a float recovers its exact bits.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ImageFeatureMap, MultimodalExample};
use crate::metrics::MetricsReport;
use crate::model::{MarmotParams, ModelConfig, PoolingMode, SegmentTag, SequenceLayout};
use crate::rng::SeedRng;
use crate::trace::{AttentionRecord, Subnet};
use crate::train::{DivergenceInfo, TrainConfig, TrainReport};
use crate::vocab::{Vocab, VocabError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: format_version {found} unsupported (this build reads {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: kind {found:?} where {expected:?} was expected")]
    Kind {
        path: String,
        found: String,
        expected: &'static str,
    },
    #[error("{path}: {count} invalid record(s):\n{}", format_line_errors(.errors))]
    Dataset {
        path: String,
        count: usize,
        errors: Vec<LineError>,
    },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

fn format_line_errors(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(|e| format!("  line {}: {}", e.line, e.message))
        .collect::<Vec<_>>()
        .join("\n")
}

type Result<T> = std::result::Result<T, IoError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// First line of every line-delimited file.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Header {
    format_version: u32,
    kind: String,
}

fn check_header(path: &Path, line: Option<&str>, expected: &'static str) -> Result<()> {
    let line = line.ok_or_else(|| format_err(path, "empty file, expected a header line"))?;
    let header: Header = serde_json::from_str(line)
        .map_err(|e| format_err(path, format!("bad header line: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(IoError::Version {
            path: path.display().to_string(),
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if header.kind != expected {
        return Err(IoError::Kind {
            path: path.display().to_string(),
            found: header.kind,
            expected,
        });
    }
    Ok(())
}

fn header_line(kind: &str) -> String {
    serde_json::to_string(&Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
    })
    .expect("header serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Binary feature-map sidecars
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// Write a feature map as magic, version, C, H, W (u32 little-endian), then
/// C*H*W f64 little-endian values.
pub fn write_feature_map(path: &Path, map: &ImageFeatureMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(file_err(path))?);
    let inner = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for dim in [map.channels(), map.height(), map.width()] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in map.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    inner(&mut w).map_err(file_err(path))
}

pub fn read_feature_map(path: &Path) -> Result<ImageFeatureMap> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    if bytes.len() < 20 || &bytes[..4] != TENSOR_MAGIC {
        return Err(format_err(path, "not a TNSR feature-map file"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            path: path.display().to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (c, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    let expected_len = 20 + 8 * n;
    if bytes.len() != expected_len {
        return Err(format_err(
            path,
            format!(
                "size mismatch: {}x{}x{} needs {} bytes, file has {}",
                c,
                h,
                w,
                expected_len,
                bytes.len()
            ),
        ));
    }
    let values = bytes[20..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageFeatureMap::new(c, h, w, values).map_err(|e| format_err(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Inline nested values (channel, then row, then column) or a path to a
/// TNSR sidecar, relative to the dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ImageFeaturesField {
    Inline(Vec<Vec<Vec<f64>>>),
    SidecarPath(String),
}

/// One dataset line as written: raw text, not token ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<ImageFeaturesField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header_line("dataset"));
    out.push('\n');
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| format_err(path, e.to_string()))?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(file_err(path))
}

/// Structural read: header checked, every line parsed, no semantic
/// validation. Blank lines are skipped.
pub fn read_dataset_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = content.lines();
    check_header(path, lines.next(), "dataset")?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(LineError {
                // +2: one for the header, one for 1-based numbering
                line: i + 2,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(IoError::Dataset {
            path: path.display().to_string(),
            count: errors.len(),
            errors,
        })
    }
}

/// A parsed and validated dataset ready for the model.
#[derive(Debug)]
pub struct LoadedDataset {
    pub examples: Vec<MultimodalExample>,
    pub warnings: Vec<String>,
}

fn inline_to_map(nested: &[Vec<Vec<f64>>]) -> std::result::Result<ImageFeatureMap, String> {
    let c = nested.len();
    let h = nested.first().map_or(0, |p| p.len());
    let w = nested.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    let mut values = Vec::with_capacity(c * h * w);
    for (ci, plane) in nested.iter().enumerate() {
        if plane.len() != h {
            return Err(format!("channel {ci} has {} rows, channel 0 has {h}", plane.len()));
        }
        for (ri, row) in plane.iter().enumerate() {
            if row.len() != w {
                return Err(format!(
                    "channel {ci} row {ri} has {} values, expected {w}",
                    row.len()
                ));
            }
            values.extend_from_slice(row);
        }
    }
    ImageFeatureMap::new(c, h, w, values).map_err(|e| e.to_string())
}

fn record_to_example(
    record: &DatasetRecord,
    base_dir: &Path,
    vocab: &Vocab,
    max_positions: usize,
) -> std::result::Result<MultimodalExample, String> {
    if record.id.is_empty() {
        return Err("record id must not be empty".into());
    }
    match (&record.captions, &record.image_features) {
        (Some(_), None) => return Err("captions given without image_features".into()),
        (None, Some(_)) => return Err("image_features given without captions".into()),
        _ => {}
    }
    if let Some(label) = record.label {
        if label > 1 {
            return Err(format!("label {label} is not 0 or 1"));
        }
    }
    let text = crate::vocab::tokenize(&record.text, vocab, max_positions);
    let image = match &record.image_features {
        None => None,
        Some(ImageFeaturesField::Inline(nested)) => Some(inline_to_map(nested)?),
        Some(ImageFeaturesField::SidecarPath(rel)) => {
            let full = base_dir.join(rel);
            Some(read_feature_map(&full).map_err(|e| e.to_string())?)
        }
    };
    let captions = match &record.captions {
        None => Vec::new(),
        Some(raw) => {
            let mut out = Vec::with_capacity(raw.len());
            for (i, c) in raw.iter().enumerate() {
                // leave room for the separator's position slot
                let ids = crate::vocab::tokenize(c, vocab, max_positions.saturating_sub(1));
                if ids.is_empty() {
                    return Err(format!("caption {i} tokenizes to nothing"));
                }
                out.push(ids);
            }
            out
        }
    };
    let example = MultimodalExample {
        id: record.id.clone(),
        text,
        captions,
        image,
        label: record.label,
    };
    example.validate().map_err(|e: DataError| e.to_string())?;
    Ok(example)
}

/// Read, tokenize, and validate a dataset. All record problems are collected
/// with line numbers and reported together. All feature maps in one file
/// must share their dimensions.
pub fn load_dataset(path: &Path, vocab: &Vocab, max_positions: usize) -> Result<LoadedDataset> {
    let records = read_dataset_records(path)?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut examples = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    for (i, record) in records.iter().enumerate() {
        let line = i + 2;
        match record_to_example(record, base_dir, vocab, max_positions) {
            Ok(example) => {
                if let Some(map) = &example.image {
                    let d = (map.channels(), map.height(), map.width());
                    match dims {
                        None => dims = Some(d),
                        Some(expected) if expected != d => {
                            errors.push(LineError {
                                line,
                                message: format!(
                                    "feature map {}x{}x{} differs from the file's {}x{}x{}",
                                    d.0, d.1, d.2, expected.0, expected.1, expected.2
                                ),
                            });
                            continue;
                        }
                        Some(_) => {}
                    }
                }
                examples.push(example);
            }
            Err(message) => errors.push(LineError { line, message }),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Dataset {
            path: path.display().to_string(),
            count: errors.len(),
            errors,
        });
    }
    let mut warnings = Vec::new();
    if examples.is_empty() {
        warnings.push(format!("{}: dataset contains no records", path.display()));
    }
    Ok(LoadedDataset { examples, warnings })
}

// ---------------------------------------------------------------------------
// Params
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    format_version: u32,
    kind: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_params(path: &Path, params: &MarmotParams) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, _, tensor) in params.named_params() {
        let values = tensor.to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("{name} holds non-finite values")));
        }
        tensors.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            values,
        });
    }
    let file = ParamsFile {
        format_version: FORMAT_VERSION,
        kind: "params".into(),
        config: params.config.clone(),
        tensors,
    };
    let json = serde_json::to_string(&file).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json).map_err(file_err(path))
}

fn check_doc_meta(path: &Path, version: u32, kind: &str, expected: &'static str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            path: path.display().to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if kind != expected {
        return Err(IoError::Kind {
            path: path.display().to_string(),
            found: kind.to_string(),
            expected,
        });
    }
    Ok(())
}

/// Rebuild params from a file: a fresh skeleton for the stored config gets
/// every tensor's bits replaced by name. Missing, unknown, or misshapen
/// tensors are errors.
pub fn load_params(path: &Path) -> Result<MarmotParams> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    let file: ParamsFile =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    check_doc_meta(path, file.format_version, &file.kind, "params")?;
    let params = MarmotParams::init(&file.config, &mut SeedRng::new(0))
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut stored: HashMap<&str, &TensorEntry> =
        file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, _, tensor) in params.named_params() {
        let entry = stored.remove(name.as_str()).ok_or_else(|| {
            format_err(path, format!("tensor {name} missing from params file"))
        })?;
        if entry.shape != tensor.shape() {
            return Err(format_err(
                path,
                format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    entry.shape,
                    tensor.shape()
                ),
            ));
        }
        if entry.values.len() != tensor.len() {
            return Err(format_err(
                path,
                format!(
                    "tensor {name} has {} values, shape {:?} needs {}",
                    entry.values.len(),
                    entry.shape,
                    tensor.len()
                ),
            ));
        }
        tensor.update_values(|w| w.copy_from_slice(&entry.values));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(format_err(
            path,
            format!("params file has unknown tensor {extra}"),
        ));
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Train reports
// ---------------------------------------------------------------------------

/// The serializable face of a training run; parameters live in their own
/// params file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReportFile {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub group_checksums: Vec<[u64; 4]>,
    pub diverged: Option<DivergenceInfo>,
}

impl TrainReportFile {
    pub fn from_report(report: &TrainReport) -> Self {
        TrainReportFile {
            format_version: FORMAT_VERSION,
            kind: "train_report".into(),
            seed: report.seed,
            config: report.config.clone(),
            train_loss: report.train_loss.clone(),
            val_accuracy: report.val_accuracy.clone(),
            group_checksums: report.group_checksums.clone(),
            diverged: report.diverged.clone(),
        }
    }
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    let file = TrainReportFile::from_report(report);
    let json = serde_json::to_string(&file).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json).map_err(file_err(path))
}

pub fn read_train_report(path: &Path) -> Result<TrainReportFile> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    let file: TrainReportFile =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    check_doc_meta(path, file.format_version, &file.kind, "train_report")?;
    Ok(file)
}

// ---------------------------------------------------------------------------
// Metrics reports
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MetricsFile {
    format_version: u32,
    kind: String,
    #[serde(flatten)]
    report: MetricsReport,
}

pub fn write_metrics_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let file = MetricsFile {
        format_version: FORMAT_VERSION,
        kind: "metrics".into(),
        report: report.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json).map_err(file_err(path))
}

pub fn read_metrics_report(path: &Path) -> Result<MetricsReport> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    let file: MetricsFile =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    check_doc_meta(path, file.format_version, &file.kind, "metrics")?;
    Ok(file.report)
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub class: u8,
    pub p_positive: f64,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header_line("predictions"));
    out.push('\n');
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| format_err(path, e.to_string()))?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(file_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let content = fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = content.lines();
    check_header(path, lines.next(), "predictions")?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| {
            format_err(path, format!("line {}: {e}", i + 2))
        })?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    format_version: u32,
    kind: String,
    /// Params files, relative to this manifest.
    members: Vec<String>,
}

pub fn write_ensemble_manifest(path: &Path, member_files: &[String]) -> Result<()> {
    let file = EnsembleFile {
        format_version: FORMAT_VERSION,
        kind: "ensemble".into(),
        members: member_files.to_vec(),
    };
    let json = serde_json::to_string(&file).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json).map_err(file_err(path))
}

/// A single model or a voting ensemble, loaded uniformly.
#[derive(Debug)]
pub enum LoadedModel {
    Single(Box<MarmotParams>),
    Ensemble(Vec<MarmotParams>),
}

impl LoadedModel {
    pub fn members(&self) -> Vec<&MarmotParams> {
        match self {
            LoadedModel::Single(p) => vec![p],
            LoadedModel::Ensemble(ps) => ps.iter().collect(),
        }
    }
}

/// Load either a params file or an ensemble manifest, decided by the file's
/// `kind` field.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    #[derive(Deserialize)]
    struct Probe {
        kind: String,
    }
    let probe: Probe =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    match probe.kind.as_str() {
        "params" => Ok(LoadedModel::Single(Box::new(load_params(path)?))),
        "ensemble" => {
            let file: EnsembleFile =
                serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
            check_doc_meta(path, file.format_version, &file.kind, "ensemble")?;
            if file.members.is_empty() {
                return Err(format_err(path, "ensemble manifest lists no members"));
            }
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            let members = file
                .members
                .iter()
                .map(|m| load_params(&base.join(m)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedModel::Ensemble(members))
        }
        other => Err(IoError::Kind {
            path: path.display().to_string(),
            found: other.to_string(),
            expected: "params or ensemble",
        }),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

fn default_pooling() -> PoolingMode {
    PoolingMode::Cls
}

/// Model dimensions as written in a run config. `vocab_size` is not stored:
/// it always comes from the vocabulary file. `d_ff` and `k_hidden` fall back
/// to the conventional `4*d` and `d/2`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    pub max_positions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_hidden: Option<usize>,
    pub image_channels: usize,
    #[serde(default = "default_pooling")]
    pub pooling: PoolingMode,
}

impl ModelDims {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            vocab_size,
            max_positions: self.max_positions,
            k_hidden: self.k_hidden.unwrap_or((self.d_model / 2).max(1)),
            image_channels: self.image_channels,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub format_version: u32,
    pub kind: String,
    pub model: ModelDims,
    pub train: TrainConfig,
    /// Vocabulary file, relative to this config file.
    pub vocab_path: String,
    /// Subnets traced by attention export; `None` means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_subnets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn new(model: ModelDims, train: TrainConfig, vocab_path: String) -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            kind: "run_config".into(),
            model,
            train,
            vocab_path,
            trace_subnets: None,
            out_dir: None,
        }
    }
}

pub fn write_run_config(path: &Path, config: &RunConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(config).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, json).map_err(file_err(path))
}

/// A run config with its vocabulary loaded and the model config assembled.
#[derive(Debug)]
pub struct LoadedRunConfig {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model_config: ModelConfig,
}

pub fn load_run_config(path: &Path) -> Result<LoadedRunConfig> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    let config: RunConfig =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    check_doc_meta(path, config.format_version, &config.kind, "run_config")?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let vocab_path = base.join(&config.vocab_path);
    if !vocab_path.exists() {
        return Err(format_err(
            path,
            format!("vocab_path {} does not exist", vocab_path.display()),
        ));
    }
    let vocab = Vocab::load(&vocab_path)?;
    let model_config = config.model.to_model_config(vocab.len());
    model_config
        .validate()
        .map_err(|e| IoError::Config(e.to_string()))?;
    config
        .train
        .validate()
        .map_err(|e| IoError::Config(e.to_string()))?;
    if let Some(subnets) = &config.trace_subnets {
        for s in subnets {
            if parse_subnet(s).is_none() {
                return Err(IoError::Config(format!(
                    "unknown trace subnet {s:?}; use decoder-self, decoder-cross, or fusion"
                )));
            }
        }
    }
    Ok(LoadedRunConfig {
        config,
        vocab,
        model_config,
    })
}

pub fn parse_subnet(label: &str) -> Option<Subnet> {
    match label {
        "decoder-self" => Some(Subnet::DecoderSelf),
        "decoder-cross" => Some(Subnet::DecoderCross),
        "fusion" => Some(Subnet::Fusion),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Attention traces
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionTraceFile {
    pub format_version: u32,
    pub kind: String,
    pub example_id: String,
    pub subnet: String,
    pub layer: usize,
    pub head: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `[row_labels.len()][col_labels.len()]`
    pub weights: Vec<Vec<f64>>,
}

/// Human-readable labels for the fused sequence: "CLS", token strings, and
/// "ImgFeat-k" for translated image rows.
pub fn fused_labels(layout: &SequenceLayout, vocab: &Vocab) -> Vec<String> {
    layout
        .tags
        .iter()
        .enumerate()
        .map(|(i, tag)| match tag {
            SegmentTag::Cls => "CLS".to_string(),
            SegmentTag::Image => format!("ImgFeat-{}", layout.positions[i]),
            SegmentTag::Text | SegmentTag::Caption => {
                let id = layout.token_ids[i].expect("token segments carry ids");
                vocab.token(id).to_string()
            }
        })
        .collect()
}

fn caption_labels(layout: &SequenceLayout, vocab: &Vocab) -> Vec<String> {
    layout
        .tags
        .iter()
        .enumerate()
        .filter(|(_, tag)| **tag == SegmentTag::Caption)
        .map(|(i, _)| {
            let id = layout.token_ids[i].expect("caption rows carry ids");
            vocab.token(id).to_string()
        })
        .collect()
}

fn image_cell_labels(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("ImgFeat-{k}")).collect()
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write one JSON file per captured head:
/// `attention-<id>-<subnet>-layer<l>-head<h>.json`. Labels come from the
/// example's layout; matrix dimensions are checked against them.
pub fn write_attention_traces(
    dir: &Path,
    example_id: &str,
    layout: &SequenceLayout,
    records: &[AttentionRecord],
    vocab: &Vocab,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let fused = fused_labels(layout, vocab);
    let captions = caption_labels(layout, vocab);
    let mut written = Vec::with_capacity(records.len());
    for r in records {
        let (row_labels, col_labels) = match r.subnet {
            Subnet::DecoderSelf => (captions.clone(), captions.clone()),
            Subnet::DecoderCross => (captions.clone(), image_cell_labels(r.n_k)),
            Subnet::Fusion => (fused.clone(), fused.clone()),
        };
        if row_labels.len() != r.n_q || col_labels.len() != r.n_k {
            return Err(IoError::Config(format!(
                "{} layer {} head {}: {}x{} weights do not match {}x{} labels",
                r.subnet.label(),
                r.layer,
                r.head,
                r.n_q,
                r.n_k,
                row_labels.len(),
                col_labels.len()
            )));
        }
        let weights = r
            .weights
            .chunks(r.n_k)
            .map(|row| row.to_vec())
            .collect();
        let file = AttentionTraceFile {
            format_version: FORMAT_VERSION,
            kind: "attention_trace".into(),
            example_id: example_id.to_string(),
            subnet: r.subnet.label().to_string(),
            layer: r.layer,
            head: r.head,
            row_labels,
            col_labels,
            weights,
        };
        let name = format!(
            "attention-{}-{}-layer{}-head{}.json",
            sanitize_id(example_id),
            r.subnet.label(),
            r.layer,
            r.head
        );
        let path = dir.join(name);
        let json =
            serde_json::to_string(&file).map_err(|e| format_err(&path, e.to_string()))?;
        fs::write(&path, json).map_err(file_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_attention_trace(path: &Path) -> Result<AttentionTraceFile> {
    let json = fs::read_to_string(path).map_err(file_err(path))?;
    let file: AttentionTraceFile =
        serde_json::from_str(&json).map_err(|e| format_err(path, e.to_string()))?;
    check_doc_meta(path, file.format_version, &file.kind, "attention_trace")?;
    for (i, row) in file.weights.iter().enumerate() {
        if row.len() != file.col_labels.len() {
            return Err(format_err(
                path,
                format!(
                    "weights row {i} has {} entries, {} col labels",
                    row.len(),
                    file.col_labels.len()
                ),
            ));
        }
    }
    if file.weights.len() != file.row_labels.len() {
        return Err(format_err(
            path,
            format!(
                "{} weight rows, {} row labels",
                file.weights.len(),
                file.row_labels.len()
            ),
        ));
    }
    Ok(file)
}
