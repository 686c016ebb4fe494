//! Training: loss, the AdamW optimizer, the three-stage learning-rate
//! schedule, group freezing, the training loop, grid search, and deep
//! ensembling.
//!
//! The schedule has three stages over the total optimizer-step count: linear
//! warmup from 0 over the first `warmup_fraction` of steps, a plateau at the
//! configured rate while any parameter group is still frozen, and a cosine
//! decay toward 0 across the remaining fully-unfrozen steps. With no freezing
//! the plateau is empty and the schedule is plain warmup plus cosine.
//!
//! Freezing works in epochs: the translation decoder trains only from
//! `freeze_decoder_epochs` on, the language-model group (fusion encoder,
//! embeddings, CLS) only from `freeze_encoder_epochs` on. The image
//! projection and the classification head are fresh parameters with nothing
//! to protect, so they train in every phase. Frozen tensors receive no
//! optimizer updates and their Adam moments stay untouched, so their bits
//! cannot drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MultimodalExample;
use crate::metrics;
use crate::model::{
    forward_with, predict, DummyContent, MarmotParams, ModelConfig, ModelError, ParamGroup,
    Prediction,
};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("example {id} has no label")]
    UnlabeledExample { id: String },
    #[error("gradient for {param} ({group}) is not finite")]
    NanGradient { param: String, group: &'static str },
    #[error("training diverged at epoch {epoch}, step {step}: {cause}")]
    Diverged {
        epoch: usize,
        step: usize,
        cause: String,
        /// Progress up to the aborting step, including current parameters.
        report: Box<TrainReport>,
    },
    #[error("ensemble size {0} must be odd (even sizes can tie)")]
    EvenEnsemble(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, TrainError>;

fn group_name(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::ImagePath => "image path",
        ParamGroup::TranslationDecoder => "translation decoder",
        ParamGroup::LanguageModel => "language model",
        ParamGroup::Classifier => "classifier",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
        }
    }
}

fn default_warmup() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub freeze_decoder_epochs: usize,
    #[serde(default)]
    pub freeze_encoder_epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            warmup_fraction: default_warmup(),
            freeze_decoder_epochs: 0,
            freeze_encoder_epochs: 0,
            adam: AdamConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate {} invalid", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction {} must be in [0, 1)",
                self.warmup_fraction
            ));
        }
        if self.freeze_decoder_epochs > self.freeze_encoder_epochs
            || self.freeze_encoder_epochs > self.epochs
        {
            return fail(format!(
                "freeze epochs must satisfy decoder {} <= encoder {} <= epochs {}",
                self.freeze_decoder_epochs, self.freeze_encoder_epochs, self.epochs
            ));
        }
        let a = &self.adam;
        if !(a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2))
            || a.weight_decay < 0.0
        {
            return fail("adam constants out of range".into());
        }
        Ok(())
    }
}

/// Which groups the optimizer may touch in a given epoch. The classifier is
/// always trainable and is not listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupFlags {
    pub image_path: bool,
    pub translation_decoder: bool,
    pub fusion_encoder: bool,
}

impl GroupFlags {
    pub fn all() -> Self {
        GroupFlags {
            image_path: true,
            translation_decoder: true,
            fusion_encoder: true,
        }
    }

    pub fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::ImagePath => self.image_path,
            ParamGroup::TranslationDecoder => self.translation_decoder,
            ParamGroup::LanguageModel => self.fusion_encoder,
            ParamGroup::Classifier => true,
        }
    }
}

/// Freeze schedule by epoch: the decoder joins at `freeze_decoder_epochs`,
/// the language-model group at `freeze_encoder_epochs`.
pub fn trainable_groups(epoch: usize, cfg: &TrainConfig) -> GroupFlags {
    GroupFlags {
        image_path: true,
        translation_decoder: epoch >= cfg.freeze_decoder_epochs,
        fusion_encoder: epoch >= cfg.freeze_encoder_epochs,
    }
}

/// Learning rate at a given optimizer step, `total` being steps across all
/// epochs. Warmup spans the first `warmup_fraction` of steps linearly from 0;
/// the rate then holds at `learning_rate` until the last unfreeze boundary
/// and decays along a cosine to 0 at `total`.
pub fn lr_at(iteration: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    let steps_per_epoch = total / cfg.epochs.max(1);
    let decay_start = warmup
        .max(cfg.freeze_encoder_epochs * steps_per_epoch)
        .min(total);
    if iteration < warmup {
        cfg.learning_rate * iteration as f64 / warmup as f64
    } else if iteration < decay_start || decay_start == total {
        cfg.learning_rate
    } else {
        let progress = (iteration - decay_start) as f64 / (total - decay_start) as f64;
        cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

struct MomentState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay. Moments and step counts live per tensor
/// and advance only when that tensor's group is trainable, so a group
/// unfreezing starts from fresh bias-corrected moments.
pub struct AdamW {
    cfg: AdamConfig,
    states: Vec<MomentState>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &[(String, ParamGroup, Tensor)]) -> Self {
        let states = params
            .iter()
            .map(|(_, _, t)| MomentState {
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
                t: 0,
            })
            .collect();
        AdamW { cfg, states }
    }

    /// One update over every trainable tensor. A tensor with no gradient
    /// recorded is treated as having a zero gradient (weight decay still
    /// applies).
    pub fn step(
        &mut self,
        params: &[(String, ParamGroup, Tensor)],
        lr: f64,
        flags: &GroupFlags,
    ) -> Result<()> {
        assert_eq!(
            params.len(),
            self.states.len(),
            "optimizer state must align with the parameter list it was built from"
        );
        for ((name, group, tensor), state) in params.iter().zip(&mut self.states) {
            if !flags.allows(*group) {
                continue;
            }
            let grad = tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NanGradient {
                    param: name.clone(),
                    group: group_name(*group),
                });
            }
            state.t += 1;
            let b1 = self.cfg.beta1;
            let b2 = self.cfg.beta2;
            let bc1 = 1.0 - b1.powi(state.t as i32);
            let bc2 = 1.0 - b2.powi(state.t as i32);
            let eps = self.cfg.eps;
            let decay = self.cfg.weight_decay;
            tensor.update_values(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                    let m_hat = state.m[i] / bc1;
                    let v_hat = state.v[i] / bc2;
                    let w_old = w[i];
                    w[i] = w_old - lr * m_hat / (v_hat.sqrt() + eps) - lr * decay * w_old;
                }
            });
        }
        Ok(())
    }
}

/// FNV-1a over the raw bits of every tensor in the group, in declaration
/// order. Two checksums agree iff the group's parameters are bitwise equal
/// (up to hash collision); training logs these per epoch so freeze phases
/// are auditable after the fact.
pub fn group_checksum(params: &MarmotParams, group: ParamGroup) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (_, g, tensor) in params.named_params() {
        if g != group {
            continue;
        }
        tensor.with_values(|vs| {
            for v in vs {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        });
    }
    hash
}

/// Checksums for all four groups: image path, translation decoder, language
/// model, classifier.
pub fn all_group_checksums(params: &MarmotParams) -> [u64; 4] {
    [
        group_checksum(params, ParamGroup::ImagePath),
        group_checksum(params, ParamGroup::TranslationDecoder),
        group_checksum(params, ParamGroup::LanguageModel),
        group_checksum(params, ParamGroup::Classifier),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
    pub cause: String,
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy per epoch; `None` when no validation set given.
    pub val_accuracy: Vec<Option<f64>>,
    /// Per-epoch post-update group checksums ([`all_group_checksums`]).
    pub group_checksums: Vec<[u64; 4]>,
    pub seed: u64,
    pub config: TrainConfig,
    pub diverged: Option<DivergenceInfo>,
    pub params: MarmotParams,
}

fn require_labels(examples: &[MultimodalExample]) -> Result<()> {
    for e in examples {
        if e.label.is_none() {
            return Err(TrainError::UnlabeledExample { id: e.id.clone() });
        }
    }
    Ok(())
}

fn validation_accuracy(
    val_set: &[MultimodalExample],
    params: &MarmotParams,
) -> Result<Option<f64>> {
    if val_set.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for e in val_set {
        let p = predict(e, params, 0.5)?;
        if p.class == e.label.expect("validated upstream") {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / val_set.len() as f64))
}

/// Full training loop. Deterministic for a given config: model init comes
/// from `cfg.seed` and each epoch's shuffle from a stream derived from it.
/// A non-finite loss or gradient aborts with the report accumulated so far
/// inside the error.
pub fn train(
    train_set: &[MultimodalExample],
    val_set: &[MultimodalExample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    require_labels(train_set)?;
    require_labels(val_set)?;

    let mut init_rng = SeedRng::new(cfg.seed);
    let params = MarmotParams::init(model_config, &mut init_rng)?;
    let mut shuffle_rng = init_rng.derive(0x5348_5546);
    let dummy = DummyContent::default_for(model_config);
    let named = params.named_params();
    let mut optimizer = AdamW::new(cfg.adam, &named);

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_accuracy: Vec::with_capacity(cfg.epochs),
        group_checksums: Vec::with_capacity(cfg.epochs),
        seed: cfg.seed,
        config: cfg.clone(),
        diverged: None,
        params,
    };

    let mut indices: Vec<usize> = (0..n).collect();
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let flags = trainable_groups(epoch, cfg);
        shuffle_rng.shuffle(&mut indices);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            report.params.zero_grads();
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let example = &train_set[idx];
                let out = forward_with(example, &report.params, &dummy, None)?;
                let label = example.label.expect("validated upstream") as usize;
                losses.push(out.logits.cross_entropy(label).map_err(ModelError::from)?);
            }
            // fold in value order so the batch mean depends on the batch's
            // contents, not on the shuffle order inside it
            losses.sort_by(|a, b| a.value().total_cmp(&b.value()));
            let mut iter = losses.into_iter();
            let mut batch_loss = iter.next().expect("chunks are nonempty");
            for ce in iter {
                batch_loss = batch_loss.add(&ce).map_err(ModelError::from)?;
            }
            let loss = batch_loss.scale(1.0 / chunk.len() as f64);
            let loss_value = loss.value();
            let abort = |cause: String, mut report: TrainReport| {
                report.diverged = Some(DivergenceInfo {
                    epoch,
                    step: global_step,
                    cause: cause.clone(),
                });
                TrainError::Diverged {
                    epoch,
                    step: global_step,
                    cause,
                    report: Box::new(report),
                }
            };
            if !loss_value.is_finite() {
                return Err(abort(format!("batch loss is {loss_value}"), report));
            }
            loss.backward().map_err(ModelError::from)?;
            let lr = lr_at(global_step, total_steps, cfg);
            if let Err(e) = optimizer.step(&named, lr, &flags) {
                return Err(abort(e.to_string(), report));
            }
            loss_sum += loss_value;
            batches += 1;
            global_step += 1;
        }
        report.train_loss.push(loss_sum / batches as f64);
        let acc = validation_accuracy(val_set, &report.params)?;
        report.val_accuracy.push(acc);
        report.group_checksums.push(all_group_checksums(&report.params));
    }
    Ok(report)
}

/// Metric a grid search optimizes on the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Accuracy,
    /// F1 over the positive class.
    F1Positive,
    Auc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` when the metric was undefined or the cell diverged.
    pub score: Option<f64>,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub best_index: usize,
    pub best_config: TrainConfig,
    pub metric: SelectionMetric,
}

fn metric_on(
    val_set: &[MultimodalExample],
    params: &MarmotParams,
    metric: SelectionMetric,
) -> Result<Option<f64>> {
    let mut preds = Vec::with_capacity(val_set.len());
    let mut probs = Vec::with_capacity(val_set.len());
    let mut labels = Vec::with_capacity(val_set.len());
    for e in val_set {
        let Prediction { class, p_positive } = predict(e, params, 0.5)?;
        preds.push(class);
        probs.push(p_positive);
        labels.push(e.label.expect("validated upstream"));
    }
    Ok(match metric {
        SelectionMetric::Accuracy => {
            let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            Some(correct as f64 / labels.len() as f64)
        }
        SelectionMetric::F1Positive => {
            let counts = metrics::confusion(&preds, &labels)
                .map_err(|e| TrainError::BadConfig(e.to_string()))?;
            metrics::scores(counts, counts.n0(), counts.n1())
                .map_err(|e| TrainError::BadConfig(e.to_string()))?
                .f1_1
        }
        SelectionMetric::Auc => match metrics::auc(&probs, &labels) {
            Ok(a) => Some(a),
            Err(metrics::MetricsError::SingleClass { .. }) => None,
            Err(e) => return Err(TrainError::BadConfig(e.to_string())),
        },
    })
}

/// Train one model per grid cell and pick the best validation score. Cells
/// iterate learning rate, then batch size, then epochs; ties keep the
/// earliest cell. A diverging cell scores `None` instead of failing the
/// whole search.
pub fn grid_search(
    train_set: &[MultimodalExample],
    val_set: &[MultimodalExample],
    model_config: &ModelConfig,
    base: &TrainConfig,
    spec: &GridSpec,
    metric: SelectionMetric,
) -> Result<GridOutcome> {
    if spec.learning_rates.is_empty() || spec.batch_sizes.is_empty() || spec.epochs.is_empty() {
        return Err(TrainError::BadConfig("grid has an empty dimension".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::BadConfig(
            "grid search needs a validation set to score".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut best_index = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_config = base.clone();
    for &lr in &spec.learning_rates {
        for &batch_size in &spec.batch_sizes {
            for &epochs in &spec.epochs {
                let mut cfg = base.clone();
                cfg.learning_rate = lr;
                cfg.batch_size = batch_size;
                cfg.epochs = epochs;
                cfg.freeze_decoder_epochs = cfg.freeze_decoder_epochs.min(epochs);
                cfg.freeze_encoder_epochs = cfg.freeze_encoder_epochs.min(epochs);
                let score = match train(train_set, val_set, model_config, &cfg) {
                    Ok(report) => metric_on(val_set, &report.params, metric)?,
                    Err(TrainError::Diverged { .. }) => None,
                    Err(e) => return Err(e),
                };
                if let Some(s) = score {
                    if s > best_score {
                        best_score = s;
                        best_index = cells.len();
                        best_config = cfg.clone();
                    }
                }
                cells.push(GridCell {
                    learning_rate: lr,
                    batch_size,
                    epochs,
                    score,
                });
            }
        }
    }
    Ok(GridOutcome {
        cells,
        best_index,
        best_config,
        metric,
    })
}

/// Seed for ensemble member `member`, derived from the master seed so
/// members are independent but reproducible.
pub fn member_seed(master: u64, member: usize) -> u64 {
    SeedRng::new(master).derive(member as u64).seed()
}

/// Train `members` independent models differing only in seed. The count must
/// be odd so majority votes cannot tie.
pub fn deep_ensemble(
    train_set: &[MultimodalExample],
    val_set: &[MultimodalExample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    members: usize,
) -> Result<Vec<TrainReport>> {
    if members % 2 == 0 {
        return Err(TrainError::EvenEnsemble(members));
    }
    (0..members)
        .map(|i| {
            let mut member_cfg = cfg.clone();
            member_cfg.seed = member_seed(cfg.seed, i);
            train(train_set, val_set, model_config, &member_cfg)
        })
        .collect()
}

/// Majority class over member votes; ties (possible only for even counts)
/// resolve negative.
pub fn majority_vote(votes: &[u8]) -> u8 {
    let positive = votes.iter().filter(|&&v| v == 1).count();
    u8::from(2 * positive > votes.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsemblePrediction {
    pub class: u8,
    pub votes_positive: usize,
    /// Mean of member probabilities; used as the ensemble's score for ROC.
    pub mean_p_positive: f64,
}

/// Majority vote across members, with the mean probability as a ranking
/// score.
pub fn ensemble_predict(
    members: &[&MarmotParams],
    example: &MultimodalExample,
    threshold: f64,
) -> Result<EnsemblePrediction> {
    if members.is_empty() {
        return Err(TrainError::BadConfig("ensemble has no members".into()));
    }
    let mut votes = Vec::with_capacity(members.len());
    let mut p_sum = 0.0;
    for params in members {
        let p = predict(example, params, threshold)?;
        votes.push(p.class);
        p_sum += p.p_positive;
    }
    Ok(EnsemblePrediction {
        class: majority_vote(&votes),
        votes_positive: votes.iter().filter(|&&v| v == 1).count(),
        mean_p_positive: p_sum / members.len() as f64,
    })
}
