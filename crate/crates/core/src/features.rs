//! Numeric features derived from generation-time signals.
//!
//! Row layout (version [`FEATURE_LAYOUT_VERSION`]):
//!
//! | columns    | content                                            |
//! |------------|----------------------------------------------------|
//! | 0..100     | top-k probabilities, descending, zero padded       |
//! | 100..108   | token-type one-hot in [`TokenType::ALL`] order     |
//! | 108        | raw 1-based token index (per-token mode only)      |

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GenerationRecord, LogProbStep, MAX_TOP_K};
use crate::syntax::TokenType;

pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const PROB_SLOTS: usize = MAX_TOP_K;
pub const TYPE_OFFSET: usize = PROB_SLOTS;
pub const POSITION_COLUMN: usize = PROB_SLOTS + TokenType::COUNT;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("step has no probability mass")]
    ZeroMass,
    #[error("record {id}: {annotations} annotations for {tokens} tokens")]
    Misaligned {
        id: String,
        annotations: usize,
        tokens: usize,
    },
    #[error("record {id} has no gold_index but labels were requested")]
    Unlabeled { id: String },
    #[error("feature container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    /// 1-based.
    pub token_index: usize,
    /// Byte span within the generated text.
    pub span: (usize, usize),
    pub token_type: TokenType,
    pub chosen_prob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    PerToken,
    PerSample,
}

impl FeatureMode {
    pub fn width(self) -> usize {
        match self {
            FeatureMode::PerToken => POSITION_COLUMN + 1,
            FeatureMode::PerSample => POSITION_COLUMN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::PerToken => "per-token",
            FeatureMode::PerSample => "per-sample",
        }
    }
}

/// Per-token training label relative to the gold index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenLabel {
    Correct,
    Hallucinated,
    /// After the gold index: correctness undefined, excluded from training.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub mode: FeatureMode,
    pub rows: Array2<f64>,
    pub gold_index: Option<usize>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn labels(&self) -> Option<Vec<TokenLabel>> {
        let gold = self.gold_index?;
        Some(
            (1..=self.len())
                .map(|i| match i.cmp(&gold) {
                    std::cmp::Ordering::Less => TokenLabel::Correct,
                    std::cmp::Ordering::Equal => TokenLabel::Hallucinated,
                    std::cmp::Ordering::Greater => TokenLabel::Unlabeled,
                })
                .collect(),
        )
    }

    pub fn top1(&self, row: usize) -> f64 {
        self.rows[[row, 0]]
    }

    pub fn token_type(&self, row: usize) -> TokenType {
        let onehot = self
            .rows
            .row(row)
            .slice(ndarray::s![TYPE_OFFSET..TYPE_OFFSET + TokenType::COUNT])
            .to_owned();
        let idx = onehot.iter().position(|&v| v == 1.0).unwrap_or(0);
        TokenType::ALL[idx]
    }
}

/// Top-k probabilities, descending, zero padded to [`PROB_SLOTS`].
pub fn step_probabilities(step: &LogProbStep) -> [f64; PROB_SLOTS] {
    let mut probs: Vec<f64> = step.entries.iter().map(|e| e.1.exp()).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    let mut out = [0.0; PROB_SLOTS];
    for (slot, p) in out.iter_mut().zip(probs) {
        *slot = p.clamp(0.0, 1.0);
    }
    out
}

/// Shannon entropy (nats) of the top-k distribution renormalized to 1.
pub fn step_entropy(step: &LogProbStep) -> Result<f64, FeatureError> {
    let max = step
        .entries
        .iter()
        .map(|e| e.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FeatureError::ZeroMass);
    }
    let mass: f64 = step.entries.iter().map(|e| (e.1 - max).exp()).sum();
    let log_z = max + mass.ln();
    let h = -step
        .entries
        .iter()
        .map(|e| {
            let lp = e.1 - log_z;
            let p = lp.exp();
            if p > 0.0 {
                p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Build one feature row per token.
pub fn featurize(
    record: &GenerationRecord,
    annotations: &[TokenAnnotation],
    mode: FeatureMode,
) -> Result<FeatureMatrix, FeatureError> {
    if annotations.len() != record.tokens.len() || record.steps.len() != record.tokens.len() {
        return Err(FeatureError::Misaligned {
            id: record.id.clone(),
            annotations: annotations.len(),
            tokens: record.tokens.len(),
        });
    }
    let width = mode.width();
    let mut rows = Array2::zeros((annotations.len(), width));
    for (i, (ann, step)) in annotations.iter().zip(&record.steps).enumerate() {
        let mut row = rows.row_mut(i);
        for (j, p) in step_probabilities(step).into_iter().enumerate() {
            row[j] = p;
        }
        row[TYPE_OFFSET + ann.token_type.one_hot_index()] = 1.0;
        if mode == FeatureMode::PerToken {
            row[POSITION_COLUMN] = ann.token_index as f64;
        }
    }
    Ok(FeatureMatrix {
        mode,
        rows,
        gold_index: record.gold_index,
    })
}

/// Like [`featurize`] but fails when the record carries no gold index.
pub fn featurize_labeled(
    record: &GenerationRecord,
    annotations: &[TokenAnnotation],
    mode: FeatureMode,
) -> Result<FeatureMatrix, FeatureError> {
    if record.gold_index.is_none() {
        return Err(FeatureError::Unlabeled {
            id: record.id.clone(),
        });
    }
    featurize(record, annotations, mode)
}

/// Per-column mean and standard deviation, used by the neural pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = ArrayView1<'a, f64>>, width: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for row in rows {
            n += 1;
            for (j, &x) in row.iter().enumerate() {
                let d = x - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (x - mean[j]);
            }
        }
        let std = m2
            .iter()
            .map(|&v| {
                let s = if n > 1 { (v / n as f64).sqrt() } else { 0.0 };
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mut out = rows.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Metadata of one matrix inside a feature container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub id: String,
    pub rows: usize,
    pub gold_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format: String,
    pub feature_layout_version: u32,
    pub mode: FeatureMode,
    pub columns: usize,
    pub seed: u64,
    pub entries: Vec<ContainerEntry>,
}

const CONTAINER_MAGIC: &[u8; 8] = b"HALLOCFM";

/// Write matrices as: magic, u64 LE header length, JSON header, then each
/// matrix column by column as little-endian f64.
pub fn write_container<W: Write>(
    mut out: W,
    mode: FeatureMode,
    seed: u64,
    matrices: &[(String, FeatureMatrix)],
) -> Result<(), FeatureError> {
    let header = ContainerHeader {
        format: "halloc-features".into(),
        feature_layout_version: FEATURE_LAYOUT_VERSION,
        mode,
        columns: mode.width(),
        seed,
        entries: matrices
            .iter()
            .map(|(id, m)| ContainerEntry {
                id: id.clone(),
                rows: m.len(),
                gold_index: m.gold_index,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| FeatureError::Container(e.to_string()))?;
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (id, m) in matrices {
        if m.mode != mode || m.width() != header.columns {
            return Err(FeatureError::Container(format!(
                "matrix {id} does not match container mode {}",
                mode.as_str()
            )));
        }
        for col in m.rows.columns() {
            for &v in col {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(
    mut input: R,
) -> Result<(ContainerHeader, Vec<(String, FeatureMatrix)>), FeatureError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(FeatureError::Container("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: ContainerHeader =
        serde_json::from_slice(&json).map_err(|e| FeatureError::Container(e.to_string()))?;
    if header.feature_layout_version != FEATURE_LAYOUT_VERSION {
        return Err(FeatureError::Container(format!(
            "feature layout version {} is not supported (expected {FEATURE_LAYOUT_VERSION})",
            header.feature_layout_version
        )));
    }
    let mut out = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        let mut rows = Array2::zeros((entry.rows, header.columns));
        let mut buf = [0u8; 8];
        for c in 0..header.columns {
            for r in 0..entry.rows {
                input.read_exact(&mut buf)?;
                rows[[r, c]] = f64::from_le_bytes(buf);
            }
        }
        out.push((
            entry.id.clone(),
            FeatureMatrix {
                mode: header.mode,
                rows,
                gold_index: entry.gold_index,
            },
        ));
    }
    Ok((header, out))
}
