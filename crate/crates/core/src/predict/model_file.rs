//! JSON model files with base64 little-endian numeric blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::DenseClassifier;
use super::encoders::{EncoderConfig, PointerNetwork};
use super::forest::{RandomForest, Tree};
use super::tape::{ParamId, ParamSet};
use super::{ModelBody, ModelKind, PredictError, PredictorModel, TrainingMeta};
use crate::features::{FeatureMode, Standardizer, FEATURE_LAYOUT_VERSION};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const FORMAT: &str = "halloc-model";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    format_version: u32,
    kind: ModelKind,
    feature_layout_version: u32,
    mode: FeatureMode,
    width: usize,
    training_meta: TrainingMeta,
    body: BodyFile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum BodyFile {
    Forest {
        n_features: usize,
        trees: Vec<TreeFile>,
    },
    Dense {
        hidden: Option<usize>,
        standardizer: StandardizerFile,
        tensors: Vec<TensorFile>,
    },
    Pointer {
        encoder: EncoderConfig,
        input_dim: usize,
        standardizer: StandardizerFile,
        tensors: Vec<TensorFile>,
    },
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    nodes: usize,
    feature: String,
    threshold: String,
    left: String,
    right: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct StandardizerFile {
    mean: String,
    std: String,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    name: String,
    shape: [usize; 2],
    data: String,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn encode_u32(values: &[u32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_bytes(text: &str, width: usize, count: usize, what: &str) -> Result<Vec<u8>, PredictError> {
    let bytes = B64
        .decode(text)
        .map_err(|e| PredictError::Format(format!("{what}: {e}")))?;
    if bytes.len() != width * count {
        return Err(PredictError::Format(format!(
            "{what}: expected {count} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn decode_f64(text: &str, count: usize, what: &str) -> Result<Vec<f64>, PredictError> {
    Ok(decode_bytes(text, 8, count, what)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn decode_u32(text: &str, count: usize, what: &str) -> Result<Vec<u32>, PredictError> {
    Ok(decode_bytes(text, 4, count, what)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn standardizer_file(s: &Standardizer) -> StandardizerFile {
    StandardizerFile {
        mean: encode_f64(&s.mean),
        std: encode_f64(&s.std),
    }
}

fn read_standardizer(f: &StandardizerFile, width: usize) -> Result<Standardizer, PredictError> {
    Ok(Standardizer {
        mean: decode_f64(&f.mean, width, "standardizer mean")?,
        std: decode_f64(&f.std, width, "standardizer std")?,
    })
}

fn tensors(params: &ParamSet) -> Vec<TensorFile> {
    params
        .iter()
        .map(|(name, v)| TensorFile {
            name: name.to_string(),
            shape: [v.nrows(), v.ncols()],
            data: encode_f64(&v.iter().copied().collect::<Vec<_>>()),
        })
        .collect()
}

/// Overwrite the freshly built `params` with stored tensors, matching names and shapes.
fn load_tensors(params: &mut ParamSet, stored: &[TensorFile]) -> Result<(), PredictError> {
    if stored.len() != params.len() {
        return Err(PredictError::Format(format!(
            "expected {} tensors, found {}",
            params.len(),
            stored.len()
        )));
    }
    for (i, t) in stored.iter().enumerate() {
        let id = ParamId(i);
        let expected = params.get(id).dim();
        if params.name(id) != t.name || expected != (t.shape[0], t.shape[1]) {
            return Err(PredictError::Format(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                params.name(id),
                expected,
                t.name,
                t.shape
            )));
        }
        let data = decode_f64(&t.data, t.shape[0] * t.shape[1], &t.name)?;
        *params.get_mut(id) = Array2::from_shape_vec(expected, data).expect("checked length");
    }
    if !params.all_finite() {
        return Err(PredictError::Format("non-finite parameter".into()));
    }
    Ok(())
}

fn to_file(model: &PredictorModel) -> ModelFile {
    let body = match &model.body {
        ModelBody::Forest(f) => BodyFile::Forest {
            n_features: f.n_features,
            trees: f
                .trees
                .iter()
                .map(|t| TreeFile {
                    nodes: t.len(),
                    feature: encode_u32(&t.feature),
                    threshold: encode_f64(&t.threshold),
                    left: encode_u32(&t.left),
                    right: encode_u32(&t.right),
                    value: encode_f64(&t.value),
                })
                .collect(),
        },
        ModelBody::Dense(d) => BodyFile::Dense {
            hidden: d.hidden,
            standardizer: standardizer_file(&d.standardizer),
            tensors: tensors(&d.params),
        },
        ModelBody::Pointer {
            network,
            standardizer,
        } => BodyFile::Pointer {
            encoder: network.config.clone(),
            input_dim: network.input_dim,
            standardizer: standardizer_file(standardizer),
            tensors: tensors(&network.params),
        },
    };
    ModelFile {
        format: FORMAT.into(),
        format_version: MODEL_FORMAT_VERSION,
        kind: model.kind,
        feature_layout_version: model.feature_layout_version,
        mode: model.mode(),
        width: model.width,
        training_meta: model.training_meta.clone(),
        body,
    }
}

fn from_file(file: ModelFile) -> Result<PredictorModel, PredictError> {
    if file.mode != file.kind.mode() {
        return Err(PredictError::Format(format!(
            "{} models are {}, file says {}",
            file.kind,
            file.kind.mode().as_str(),
            file.mode.as_str()
        )));
    }
    let width = file.width;
    let body = match (file.body, file.kind) {
        (BodyFile::Forest { n_features, trees }, ModelKind::TreeEnsemble) => {
            if n_features != width {
                return Err(PredictError::Format("forest width disagrees with header".into()));
            }
            let trees = trees
                .iter()
                .map(|t| {
                    let n = t.nodes;
                    let tree = Tree {
                        feature: decode_u32(&t.feature, n, "tree feature")?,
                        threshold: decode_f64(&t.threshold, n, "tree threshold")?,
                        left: decode_u32(&t.left, n, "tree left")?,
                        right: decode_u32(&t.right, n, "tree right")?,
                        value: decode_f64(&t.value, n, "tree value")?,
                    };
                    if !tree.is_well_formed(width) {
                        return Err(PredictError::Format("malformed tree".into()));
                    }
                    Ok(tree)
                })
                .collect::<Result<Vec<_>, PredictError>>()?;
            ModelBody::Forest(RandomForest { n_features, trees })
        }
        (
            BodyFile::Dense {
                hidden,
                standardizer,
                tensors,
            },
            ModelKind::LinearLogistic | ModelKind::FeedForward,
        ) => {
            if hidden.is_some() != (file.kind == ModelKind::FeedForward) {
                return Err(PredictError::Format("hidden layer disagrees with model kind".into()));
            }
            let mut model = DenseClassifier::new(width, hidden, &mut ChaCha8Rng::seed_from_u64(0));
            model.standardizer = read_standardizer(&standardizer, width)?;
            load_tensors(&mut model.params, &tensors)?;
            ModelBody::Dense(model)
        }
        (
            BodyFile::Pointer {
                encoder,
                input_dim,
                standardizer,
                tensors,
            },
            kind,
        ) if kind.encoder() == Some(encoder.kind) => {
            if input_dim != width {
                return Err(PredictError::Format("encoder input width disagrees with header".into()));
            }
            let mut network = PointerNetwork::new(&encoder, input_dim, &mut ChaCha8Rng::seed_from_u64(0))
                .map_err(PredictError::Format)?;
            load_tensors(&mut network.params, &tensors)?;
            ModelBody::Pointer {
                network,
                standardizer: read_standardizer(&standardizer, width)?,
            }
        }
        (_, kind) => {
            return Err(PredictError::Format(format!("body does not match model kind {kind}")));
        }
    };
    Ok(PredictorModel {
        kind: file.kind,
        feature_layout_version: file.feature_layout_version,
        width,
        training_meta: file.training_meta,
        body,
    })
}

pub fn write_model<W: Write>(model: &PredictorModel, mut out: W) -> Result<(), PredictError> {
    serde_json::to_writer_pretty(&mut out, &to_file(model))
        .map_err(|e| PredictError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<PredictorModel, PredictError> {
    let value: serde_json::Value =
        serde_json::from_reader(input).map_err(|e| PredictError::Format(e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(PredictError::Format(format!("not a {FORMAT} file")));
    }
    let version = |key: &str| {
        value
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as u32)
            .ok_or_else(|| PredictError::Format(format!("missing {key}")))
    };
    let found = version("format_version")?;
    if found != MODEL_FORMAT_VERSION {
        return Err(PredictError::Version {
            found,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let layout = version("feature_layout_version")?;
    if layout != FEATURE_LAYOUT_VERSION {
        return Err(PredictError::LayoutVersion {
            found: layout,
            expected: FEATURE_LAYOUT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| PredictError::Format(e.to_string()))?;
    from_file(file)
}

pub fn save_model(model: &PredictorModel, path: &Path) -> Result<(), PredictError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(model, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PredictorModel, PredictError> {
    read_model(BufReader::new(File::open(path)?))
}
