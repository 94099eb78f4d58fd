//! Hallucination predictors.
//!
//! Per-token models score each row of a per-token [`FeatureMatrix`] and the
//! predicted index is the first row whose score crosses a threshold. Per-sample
//! models encode the whole sequence and point at one position.

mod dense;
pub mod encoders;
pub mod forest;
pub mod gradcheck;
mod model_file;
pub mod optim;
pub mod tape;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dense::DenseClassifier;
pub use encoders::{EncoderConfig, EncoderKind, PointerNetwork, RecurrentCell};
pub use forest::{ForestConfig, RandomForest};
pub use model_file::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION};

use crate::features::{FeatureMatrix, FeatureMode, Standardizer, TokenLabel, FEATURE_LAYOUT_VERSION};
use optim::Adam;
use tape::Tape;

/// Longest sequence fed to an encoder.
pub const MAX_SEQUENCE_LEN: usize = 2048;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("no training data")]
    Empty,
    #[error("training rows contain a single class ({0})")]
    SingleClass(&'static str),
    #[error("cannot downsample: no hallucinated rows")]
    NoHallucinated,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("sample {sample} has no gold index")]
    Unlabeled { sample: usize },
    #[error("sample {sample}: gold index {gold} outside 1..={len}")]
    GoldOutOfRange { sample: usize, gold: usize, len: usize },
    #[error("sample {sample}: gold index {gold} lies beyond the {cap}-token encoder limit")]
    GoldTruncated { sample: usize, gold: usize, cap: usize },
    #[error("feature layout mismatch: model expects {expected}, matrix is {found}")]
    Layout { expected: String, found: String },
    #[error("{kind} models cannot be used for {operation}")]
    WrongKind { kind: ModelKind, operation: &'static str },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model file was built for feature layout {found}, this build uses {expected}")]
    LayoutVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    TreeEnsemble,
    LinearLogistic,
    FeedForward,
    RecurrentPointer,
    ConvolutionalPointer,
    AttentionPointer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::TreeEnsemble,
        ModelKind::LinearLogistic,
        ModelKind::FeedForward,
        ModelKind::RecurrentPointer,
        ModelKind::ConvolutionalPointer,
        ModelKind::AttentionPointer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TreeEnsemble => "tree-ensemble",
            ModelKind::LinearLogistic => "linear-logistic",
            ModelKind::FeedForward => "feed-forward",
            ModelKind::RecurrentPointer => "recurrent-pointer",
            ModelKind::ConvolutionalPointer => "convolutional-pointer",
            ModelKind::AttentionPointer => "attention-pointer",
        }
    }

    pub fn mode(self) -> FeatureMode {
        match self.encoder() {
            Some(_) => FeatureMode::PerSample,
            None => FeatureMode::PerToken,
        }
    }

    pub fn encoder(self) -> Option<EncoderKind> {
        match self {
            ModelKind::RecurrentPointer => Some(EncoderKind::Recurrent),
            ModelKind::ConvolutionalPointer => Some(EncoderKind::Convolutional),
            ModelKind::AttentionPointer => Some(EncoderKind::Attention),
            _ => None,
        }
    }

    pub fn pointer(encoder: EncoderKind) -> Self {
        match encoder {
            EncoderKind::Recurrent => ModelKind::RecurrentPointer,
            EncoderKind::Convolutional => ModelKind::ConvolutionalPointer,
            EncoderKind::Attention => ModelKind::AttentionPointer,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Correct rows kept per hallucinated row.
    pub downsample_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub forest: ForestConfig,
    pub feed_forward_hidden: usize,
    /// Encoder shape; `None` selects the default for the model kind.
    pub encoder: Option<EncoderConfig>,
    /// Split regime recorded in the training metadata.
    pub regime: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            downsample_ratio: 3.0,
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            forest: ForestConfig::default(),
            feed_forward_hidden: 100,
            encoder: None,
            regime: "all-in-one".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PredictError> {
        if !(self.downsample_ratio.is_finite() && self.downsample_ratio >= 1.0) {
            return Err(PredictError::Config(format!(
                "downsample ratio {} must be ≥ 1",
                self.downsample_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PredictError::Config("epochs and batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PredictError::Config("learning rate must be positive".into()));
        }
        if self.forest.trees == 0 || self.forest.max_depth == 0 {
            return Err(PredictError::Config("forest needs ≥ 1 tree of depth ≥ 1".into()));
        }
        if let Some(e) = &self.encoder {
            e.validate().map_err(PredictError::Config)?;
        }
        Ok(())
    }

    pub fn encoder_for(&self, kind: EncoderKind) -> EncoderConfig {
        match &self.encoder {
            Some(e) => EncoderConfig { kind, ..e.clone() },
            None => EncoderConfig::default_for(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub downsample_ratio: f64,
    pub regime: String,
    /// Rows (per-token) or samples (per-sample) seen by the trainer.
    pub training_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forest: Option<ForestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feed_forward_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TrainingMeta {
    fn new(config: &TrainConfig, examples: usize) -> Self {
        Self {
            seed: config.seed,
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            downsample_ratio: config.downsample_ratio,
            regime: config.regime.clone(),
            training_examples: examples,
            forest: None,
            feed_forward_hidden: None,
            encoder: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Forest(RandomForest),
    Dense(DenseClassifier),
    Pointer {
        network: PointerNetwork,
        standardizer: Standardizer,
    },
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub kind: ModelKind,
    pub feature_layout_version: u32,
    pub width: usize,
    pub training_meta: TrainingMeta,
    pub body: ModelBody,
}

impl PartialEq for PointerNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.input_dim == other.input_dim && self.params == other.params
    }
}

impl PredictorModel {
    pub fn mode(&self) -> FeatureMode {
        self.kind.mode()
    }

    pub fn check_layout(&self, matrix: &FeatureMatrix) -> Result<(), PredictError> {
        if matrix.mode != self.mode() || matrix.width() != self.width {
            return Err(PredictError::Layout {
                expected: format!("{} × {}", self.mode().as_str(), self.width),
                found: format!("{} × {}", matrix.mode.as_str(), matrix.width()),
            });
        }
        Ok(())
    }

    /// Per-row hallucination scores in `[0, 1]` (per-token models only).
    pub fn score_tokens(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>, PredictError> {
        self.check_layout(matrix)?;
        match &self.body {
            ModelBody::Forest(f) => Ok(matrix.rows.rows().into_iter().map(|r| f.predict(r)).collect()),
            ModelBody::Dense(d) => Ok(if matrix.is_empty() { Vec::new() } else { d.predict(&matrix.rows) }),
            ModelBody::Pointer { .. } => Err(PredictError::WrongKind {
                kind: self.kind,
                operation: "token scoring",
            }),
        }
    }

    /// Pointer logits over the (capped) sequence (per-sample models only).
    pub fn pointer_logits(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>, PredictError> {
        self.check_layout(matrix)?;
        match &self.body {
            ModelBody::Pointer {
                network,
                standardizer,
            } => {
                if matrix.is_empty() {
                    return Ok(Vec::new());
                }
                let len = matrix.len().min(MAX_SEQUENCE_LEN);
                let x = standardizer.apply(&matrix.rows.slice(s![..len, ..]).to_owned());
                Ok(network.logits(&x))
            }
            _ => Err(PredictError::WrongKind {
                kind: self.kind,
                operation: "pointer prediction",
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        match &self.body {
            ModelBody::Forest(f) => f
                .trees
                .iter()
                .all(|t| t.threshold.iter().chain(&t.value).all(|v| v.is_finite())),
            ModelBody::Dense(d) => d.params.all_finite(),
            ModelBody::Pointer { network, .. } => network.params.all_finite(),
        }
    }
}

/// Labeled per-token rows pooled across records.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRows {
    pub features: Array2<f64>,
    /// `true` for the hallucinated row of a record.
    pub labels: Vec<bool>,
}

impl TokenRows {
    /// Rows up to and including each record's gold index.
    pub fn from_matrices(matrices: &[FeatureMatrix]) -> Result<Self, PredictError> {
        let width = matrices.first().map_or(0, FeatureMatrix::width);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, m) in matrices.iter().enumerate() {
            let expected = FeatureMode::PerToken;
            if m.mode != expected || m.width() != width {
                return Err(PredictError::Layout {
                    expected: format!("{} × {}", expected.as_str(), width),
                    found: format!("{} × {}", m.mode.as_str(), m.width()),
                });
            }
            let row_labels = m.labels().ok_or(PredictError::Unlabeled { sample: i })?;
            for (row, label) in m.rows.rows().into_iter().zip(row_labels) {
                let hallucinated = match label {
                    TokenLabel::Correct => false,
                    TokenLabel::Hallucinated => true,
                    TokenLabel::Unlabeled => break,
                };
                data.extend(row.iter().copied());
                labels.push(hallucinated);
            }
        }
        let features = Array2::from_shape_vec((labels.len(), width), data).expect("row-major rows");
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hallucinated(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            features: self.features.select(ndarray::Axis(0), keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Keep every hallucinated row and a seeded uniform sample of
/// `round(ratio × #hallucinated)` correct rows (all of them if fewer exist).
/// Selected rows keep their original order.
pub fn downsample(rows: &TokenRows, ratio: f64, seed: u64) -> Result<TokenRows, PredictError> {
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(PredictError::Config(format!("downsample ratio {ratio} must be ≥ 1")));
    }
    let positive: Vec<usize> = (0..rows.len()).filter(|&i| rows.labels[i]).collect();
    if positive.is_empty() {
        return Err(PredictError::NoHallucinated);
    }
    let negative: Vec<usize> = (0..rows.len()).filter(|&i| !rows.labels[i]).collect();
    let target = (ratio * positive.len() as f64).round() as usize;
    let mut keep = positive;
    if negative.len() <= target {
        keep.extend(negative);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, negative.len(), target);
        keep.extend(picked.into_iter().map(|i| negative[i]));
    }
    keep.sort_unstable();
    Ok(rows.select(&keep))
}

/// Fit a per-token classifier on already downsampled rows.
pub fn train_token_classifier(
    rows: &TokenRows,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<PredictorModel, PredictError> {
    config.validate()?;
    if kind.mode() != FeatureMode::PerToken {
        return Err(PredictError::WrongKind {
            kind,
            operation: "per-token training",
        });
    }
    if rows.is_empty() {
        return Err(PredictError::Empty);
    }
    match rows.hallucinated() {
        0 => return Err(PredictError::SingleClass("all correct")),
        n if n == rows.len() => return Err(PredictError::SingleClass("all hallucinated")),
        _ => {}
    }
    let mut meta = TrainingMeta::new(config, rows.len());
    let x = &rows.features;
    let constant = x
        .columns()
        .into_iter()
        .all(|c| c.iter().all(|&v| v == c[0]));
    if constant {
        let msg = "all feature columns are constant; the model will score every row alike".to_string();
        log::warn!("{msg}");
        meta.warnings.push(msg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let body = match kind {
        ModelKind::TreeEnsemble => {
            meta.forest = Some(config.forest.clone());
            ModelBody::Forest(RandomForest::fit(x, &rows.labels, &config.forest, &mut rng))
        }
        ModelKind::LinearLogistic | ModelKind::FeedForward => {
            let hidden = (kind == ModelKind::FeedForward).then_some(config.feed_forward_hidden);
            meta.feed_forward_hidden = hidden;
            let training = dense::DenseTraining {
                epochs: config.epochs,
                batch_size: config.batch_size,
                learning_rate: config.learning_rate,
            };
            ModelBody::Dense(DenseClassifier::fit(x, &rows.labels, hidden, &training, &mut rng))
        }
        _ => unreachable!("per-sample kinds rejected above"),
    };
    Ok(PredictorModel {
        kind,
        feature_layout_version: FEATURE_LAYOUT_VERSION,
        width: x.ncols(),
        training_meta: meta,
        body,
    })
}

/// Pool labeled rows, downsample with the configured ratio and fit.
pub fn train_token_model(
    matrices: &[FeatureMatrix],
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<PredictorModel, PredictError> {
    if matrices.is_empty() {
        return Err(PredictError::Empty);
    }
    let rows = TokenRows::from_matrices(matrices)?;
    if rows.is_empty() {
        return Err(PredictError::Empty);
    }
    let rows = downsample(&rows, config.downsample_ratio, config.seed)?;
    train_token_classifier(&rows, kind, config)
}

/// First 1-based index whose score reaches `threshold`.
pub fn scan(scores: &[f64], threshold: f64) -> Option<usize> {
    scores.iter().position(|&s| s >= threshold).map(|i| i + 1)
}

pub fn predict_scan(
    model: &PredictorModel,
    matrix: &FeatureMatrix,
    threshold: f64,
) -> Result<Option<usize>, PredictError> {
    Ok(scan(&model.score_tokens(matrix)?, threshold))
}

/// 1-based position of the largest value; ties go to the earliest position.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = tape::log_sum_exp(logits.iter().copied());
    logits.iter().map(|&z| (z - lse).exp()).collect()
}

pub fn predict_pointer(model: &PredictorModel, matrix: &FeatureMatrix) -> Result<usize, PredictError> {
    if matrix.is_empty() {
        return Err(PredictError::Layout {
            expected: "a non-empty sequence".into(),
            found: "an empty matrix".into(),
        });
    }
    let logits = model.pointer_logits(matrix)?;
    Ok(argmax_first(&logits).expect("non-empty logits"))
}

/// Predicted index under the decision rule of the model's mode.
pub fn predict_index(
    model: &PredictorModel,
    matrix: &FeatureMatrix,
    threshold: f64,
) -> Result<Option<usize>, PredictError> {
    match model.mode() {
        FeatureMode::PerToken => predict_scan(model, matrix, threshold),
        FeatureMode::PerSample => predict_pointer(model, matrix).map(Some),
    }
}

pub fn train_pointer(
    matrices: &[FeatureMatrix],
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<PredictorModel, PredictError> {
    config.validate()?;
    let Some(encoder_kind) = kind.encoder() else {
        return Err(PredictError::WrongKind {
            kind,
            operation: "pointer training",
        });
    };
    if matrices.is_empty() {
        return Err(PredictError::Empty);
    }
    let width = matrices[0].width();
    let mut samples = Vec::with_capacity(matrices.len());
    for (i, m) in matrices.iter().enumerate() {
        if m.mode != FeatureMode::PerSample || m.width() != width {
            return Err(PredictError::Layout {
                expected: format!("per-sample × {width}"),
                found: format!("{} × {}", m.mode.as_str(), m.width()),
            });
        }
        let gold = m.gold_index.ok_or(PredictError::Unlabeled { sample: i })?;
        if gold == 0 || gold > m.len() {
            return Err(PredictError::GoldOutOfRange {
                sample: i,
                gold,
                len: m.len(),
            });
        }
        if gold > MAX_SEQUENCE_LEN {
            return Err(PredictError::GoldTruncated {
                sample: i,
                gold,
                cap: MAX_SEQUENCE_LEN,
            });
        }
        let len = m.len().min(MAX_SEQUENCE_LEN);
        samples.push((m.rows.slice(s![..len, ..]).to_owned(), gold - 1));
    }
    let standardizer = Standardizer::fit(samples.iter().flat_map(|(x, _)| x.rows()), width);
    let samples: Vec<(Array2<f64>, usize)> = samples
        .into_iter()
        .map(|(x, t)| (standardizer.apply(&x), t))
        .collect();

    let encoder = config.encoder_for(encoder_kind);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = PointerNetwork::new(&encoder, width, &mut rng).map_err(PredictError::Config)?;
    let mut adam = Adam::new(&network.params, config.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = network.params.zero_grads();
            for &i in batch {
                let (x, target) = &samples[i];
                let mut tape = Tape::new(&network.params);
                let xv = tape.constant(x.clone());
                let loss = network.loss_on(&mut tape, xv, *target);
                total += tape.scalar(loss);
                tape.backward(loss, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.mapv_inplace(|v| v * scale);
            }
            adam.step(&mut network.params, &grads);
        }
        log::info!(
            "{kind} epoch {}/{}: mean loss {:.6}",
            epoch + 1,
            config.epochs,
            total / samples.len() as f64
        );
    }
    if !network.params.all_finite() {
        return Err(PredictError::Config("training diverged to non-finite parameters".into()));
    }
    let mut meta = TrainingMeta::new(config, samples.len());
    meta.encoder = Some(encoder);
    Ok(PredictorModel {
        kind,
        feature_layout_version: FEATURE_LAYOUT_VERSION,
        width,
        training_meta: meta,
        body: ModelBody::Pointer {
            network,
            standardizer,
        },
    })
}

/// Train any model kind on labeled matrices of the matching mode.
pub fn train(
    matrices: &[FeatureMatrix],
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<PredictorModel, PredictError> {
    match kind.mode() {
        FeatureMode::PerToken => train_token_model(matrices, kind, config),
        FeatureMode::PerSample => train_pointer(matrices, kind, config),
    }
}
