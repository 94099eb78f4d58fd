//! Cross-validated evaluation under the three split regimes, cross-LLM
//! generalization matrices, and the corpus statistics tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::GenerationRecord;
use crate::features::{self, FeatureError, FeatureMatrix, FeatureMode, TokenAnnotation};
use crate::predict::{self, ModelKind, PredictError, PredictorModel, TrainConfig};
use crate::syntax::{self, SyntaxError, TokenType};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("group {group:?} has {size} records, fewer than {k} folds")]
    GroupTooSmall { group: String, size: usize, k: usize },
    #[error("fold count must be at least 2, got {0}")]
    FoldCount(usize),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {0:?} has no gold index")]
    Unlabeled(String),
    #[error("record {0:?} is not covered by the split plan")]
    NotInPlan(String),
    #[error("cross-model evaluation needs at least two model groups, found {0}")]
    SingleGroup(usize),
    #[error("{kind} is a {model_mode} model but {mode} evaluation was requested")]
    ModeMismatch {
        kind: ModelKind,
        model_mode: &'static str,
        mode: &'static str,
    },
    #[error("record {id}: {source}")]
    Syntax { id: String, source: SyntaxError },
    #[error("record {id}: {source}")]
    Feature { id: String, source: FeatureError },
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    AllInOne,
    OnePerDataset,
    OnePerLlm,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::AllInOne, Regime::OnePerDataset, Regime::OnePerLlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::AllInOne => "all-in-one",
            Regime::OnePerDataset => "one-per-dataset",
            Regime::OnePerLlm => "one-per-llm",
        }
    }

    pub fn group_of<K: Keyed + ?Sized>(self, item: &K) -> String {
        match self {
            Regime::AllInOne => "all".into(),
            Regime::OnePerDataset => item.dataset().into(),
            Regime::OnePerLlm => item.model().into(),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown regime {s:?}"))
    }
}

/// Anything carrying the keys the split regimes group by.
pub trait Keyed {
    fn id(&self) -> &str;
    fn dataset(&self) -> &str;
    fn model(&self) -> &str;
}

impl Keyed for GenerationRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn dataset(&self) -> &str {
        &self.dataset
    }
    fn model(&self) -> &str {
        &self.model
    }
}

/// A record reduced to what evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub dataset: String,
    pub model: String,
    pub matrix: FeatureMatrix,
}

impl Keyed for Sample {
    fn id(&self) -> &str {
        &self.id
    }
    fn dataset(&self) -> &str {
        &self.dataset
    }
    fn model(&self) -> &str {
        &self.model
    }
}

impl Sample {
    pub fn from_record(record: &GenerationRecord, mode: FeatureMode) -> Result<Self, HarnessError> {
        let annotations = syntax::annotate_tokens(record).map_err(|source| HarnessError::Syntax {
            id: record.id.clone(),
            source,
        })?;
        Self::from_annotated(record, &annotations, mode)
    }

    pub fn from_annotated(
        record: &GenerationRecord,
        annotations: &[TokenAnnotation],
        mode: FeatureMode,
    ) -> Result<Self, HarnessError> {
        let matrix = features::featurize(record, annotations, mode).map_err(|source| HarnessError::Feature {
            id: record.id.clone(),
            source,
        })?;
        Ok(Self {
            id: record.id.clone(),
            dataset: record.dataset.clone(),
            model: record.model.clone(),
            matrix,
        })
    }
}

pub fn build_samples(records: &[GenerationRecord], mode: FeatureMode) -> Result<Vec<Sample>, HarnessError> {
    records.iter().map(|r| Sample::from_record(r, mode)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub regime: Regime,
    pub k: usize,
    pub seed: u64,
    /// Group key → folds → record ids.
    pub groups: BTreeMap<String, Vec<Vec<String>>>,
}

impl SplitPlan {
    /// Record id → (group, fold).
    pub fn assignments(&self) -> BTreeMap<&str, (&str, usize)> {
        let mut out = BTreeMap::new();
        for (g, folds) in &self.groups {
            for (f, ids) in folds.iter().enumerate() {
                for id in ids {
                    out.insert(id.as_str(), (g.as_str(), f));
                }
            }
        }
        out
    }
}

/// Within each group: sort ids, shuffle with `seed`, deal round-robin into `k` folds.
pub fn make_folds<K: Keyed>(records: &[K], regime: Regime, k: usize, seed: u64) -> Result<SplitPlan, HarnessError> {
    if k < 2 {
        return Err(HarnessError::FoldCount(k));
    }
    let mut seen = HashSet::new();
    let mut members: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        if !seen.insert(r.id()) {
            return Err(HarnessError::DuplicateId(r.id().to_string()));
        }
        members.entry(regime.group_of(r)).or_default().push(r.id().to_string());
    }
    let mut groups = BTreeMap::new();
    for (group, mut ids) in members {
        if ids.len() < k {
            return Err(HarnessError::GroupTooSmall {
                size: ids.len(),
                group,
                k,
            });
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let mut folds = vec![Vec::new(); k];
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].push(id);
        }
        groups.insert(group, folds);
    }
    Ok(SplitPlan {
        regime,
        k,
        seed,
        groups,
    })
}

/// What to evaluate: a trainable model kind or one of the reference predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ModelSpec {
    Trained {
        kind: ModelKind,
        config: TrainConfig,
        /// Scan threshold for per-token models.
        threshold: f64,
    },
    /// Predicts each record's gold index.
    Oracle,
    /// Always predicts the same index.
    ConstantIndex { index: usize },
}

impl ModelSpec {
    pub fn trained(kind: ModelKind, config: TrainConfig) -> Self {
        ModelSpec::Trained {
            kind,
            config,
            threshold: 0.5,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::Trained { kind, .. } => kind.as_str().into(),
            ModelSpec::Oracle => "oracle".into(),
            ModelSpec::ConstantIndex { index } => format!("constant-{index}"),
        }
    }

    fn check_mode(&self, mode: FeatureMode) -> Result<(), HarnessError> {
        if let ModelSpec::Trained { kind, .. } = self {
            if kind.mode() != mode {
                return Err(HarnessError::ModeMismatch {
                    kind: *kind,
                    model_mode: kind.mode().as_str(),
                    mode: mode.as_str(),
                });
            }
        }
        Ok(())
    }

    fn fit(&self, train: &[&Sample], regime: &str) -> Result<Predictor, HarnessError> {
        match self {
            ModelSpec::Trained {
                kind,
                config,
                threshold,
            } => {
                let matrices: Vec<FeatureMatrix> = train.iter().map(|s| s.matrix.clone()).collect();
                let config = TrainConfig {
                    regime: regime.to_string(),
                    ..config.clone()
                };
                let model = predict::train(&matrices, *kind, &config)?;
                Ok(Predictor::Model(Box::new(model), *threshold))
            }
            ModelSpec::Oracle => Ok(Predictor::Oracle),
            ModelSpec::ConstantIndex { index } => Ok(Predictor::Constant(*index)),
        }
    }
}

enum Predictor {
    Model(Box<PredictorModel>, f64),
    Oracle,
    Constant(usize),
}

impl Predictor {
    fn predict(&self, sample: &Sample) -> Result<Option<usize>, HarnessError> {
        Ok(match self {
            Predictor::Model(m, threshold) => predict::predict_index(m, &sample.matrix, *threshold)?,
            Predictor::Oracle => sample.matrix.gold_index,
            Predictor::Constant(i) => Some(*i),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub matches: usize,
    pub evaluated: usize,
    /// Records for which the per-token scan flagged nothing.
    pub unflagged: usize,
}

impl Counts {
    pub fn accuracy(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.matches as f64 / self.evaluated as f64)
    }

    fn add(&mut self, other: &Counts) {
        self.matches += other.matches;
        self.evaluated += other.evaluated;
        self.unflagged += other.unflagged;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub train_group: String,
    pub test_group: String,
    pub model: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub accuracy: Option<f64>,
}

impl Cell {
    fn new(train_group: &str, test_group: &str, model: &str, counts: Counts) -> Self {
        Self {
            train_group: train_group.into(),
            test_group: test_group.into(),
            model: model.into(),
            accuracy: counts.accuracy(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `all-in-one`, `one-per-dataset`, `one-per-llm`, or `cross-llm`.
    pub protocol: String,
    pub mode: FeatureMode,
    pub model: String,
    pub k: usize,
    pub seed: u64,
    pub config_digest: String,
    pub cells: Vec<Cell>,
    /// Pooled over every evaluated record.
    pub overall: Counts,
    pub overall_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn cell(&self, train_group: &str, test_group: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.train_group == train_group && c.test_group == test_group)
    }

    /// `eval-<protocol>-<mode>-<model>-seed<seed>`
    pub fn file_stem(&self) -> String {
        report_stem(&self.protocol, self.mode, &self.model, self.seed)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "protocol", "mode", "model", "train_group", "test_group", "matches", "evaluated", "unflagged",
            "accuracy", "seed", "config_digest",
        ])?;
        for c in &self.cells {
            w.write_record([
                self.protocol.clone(),
                self.mode.as_str().into(),
                c.model.clone(),
                c.train_group.clone(),
                c.test_group.clone(),
                c.counts.matches.to_string(),
                c.counts.evaluated.to_string(),
                c.counts.unflagged.to_string(),
                c.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
                self.seed.to_string(),
                self.config_digest.clone(),
            ])?;
        }
        csv_string(w)
    }
}

pub fn report_stem(protocol: &str, mode: FeatureMode, model: &str, seed: u64) -> String {
    format!("eval-{protocol}-{}-{model}-seed{seed}", mode.as_str())
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String, HarnessError> {
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Hex SHA-256 over the canonical JSON of everything that determines a report.
pub fn config_digest(protocol: &str, mode: FeatureMode, spec: &ModelSpec, k: usize, seed: u64) -> String {
    let value = serde_json::json!({
        "protocol": protocol,
        "mode": mode,
        "spec": spec,
        "k": k,
        "seed": seed,
    });
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_labeled(samples: &[Sample]) -> Result<(), HarnessError> {
    match samples.iter().find(|s| s.matrix.gold_index.is_none()) {
        Some(s) => Err(HarnessError::Unlabeled(s.id.clone())),
        None => Ok(()),
    }
}

fn score(predictor: &Predictor, test: &[&Sample]) -> Result<Counts, HarnessError> {
    let mut counts = Counts::default();
    for s in test {
        let predicted = predictor.predict(s)?;
        counts.evaluated += 1;
        match predicted {
            None => counts.unflagged += 1,
            Some(i) if Some(i) == s.matrix.gold_index => counts.matches += 1,
            Some(_) => {}
        }
    }
    Ok(counts)
}

/// k-fold cross-validation within each group of `plan`; accuracy is pooled
/// over the held-out predictions of all folds.
fn cross_validate(
    plan: &SplitPlan,
    by_id: &HashMap<&str, &Sample>,
    spec: &ModelSpec,
) -> Result<BTreeMap<String, Counts>, HarnessError> {
    let mut out = BTreeMap::new();
    for (group, folds) in &plan.groups {
        let lookup = |id: &String| by_id.get(id.as_str()).copied().ok_or_else(|| HarnessError::NotInPlan(id.clone()));
        let mut counts = Counts::default();
        for held_out in 0..folds.len() {
            let train: Vec<&Sample> = folds
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != held_out)
                .flat_map(|(_, ids)| ids)
                .map(lookup)
                .collect::<Result<_, _>>()?;
            let test: Vec<&Sample> = folds[held_out].iter().map(lookup).collect::<Result<_, _>>()?;
            let predictor = spec.fit(&train, plan.regime.as_str())?;
            let fold_counts = score(&predictor, &test)?;
            log::info!(
                "{} group {group} fold {}/{}: {}/{}",
                spec.label(),
                held_out + 1,
                folds.len(),
                fold_counts.matches,
                fold_counts.evaluated
            );
            counts.add(&fold_counts);
        }
        out.insert(group.clone(), counts);
    }
    Ok(out)
}

fn index_samples<'a>(samples: &'a [Sample]) -> Result<HashMap<&'a str, &'a Sample>, HarnessError> {
    let mut by_id = HashMap::with_capacity(samples.len());
    for s in samples {
        if by_id.insert(s.id.as_str(), s).is_some() {
            return Err(HarnessError::DuplicateId(s.id.clone()));
        }
    }
    Ok(by_id)
}

pub fn evaluate(
    plan: &SplitPlan,
    samples: &[Sample],
    spec: &ModelSpec,
    mode: FeatureMode,
) -> Result<EvalReport, HarnessError> {
    spec.check_mode(mode)?;
    check_labeled(samples)?;
    let by_id = index_samples(samples)?;
    let planned = plan.assignments();
    if let Some(s) = samples.iter().find(|s| !planned.contains_key(s.id.as_str())) {
        return Err(HarnessError::NotInPlan(s.id.clone()));
    }
    let per_group = cross_validate(plan, &by_id, spec)?;
    let label = spec.label();
    let mut overall = Counts::default();
    let cells = per_group
        .iter()
        .map(|(g, c)| {
            overall.add(c);
            Cell::new(g, g, &label, c.clone())
        })
        .collect();
    let protocol = plan.regime.as_str();
    Ok(EvalReport {
        protocol: protocol.into(),
        mode,
        model: label,
        k: plan.k,
        seed: plan.seed,
        config_digest: config_digest(protocol, mode, spec, plan.k, plan.seed),
        overall_accuracy: overall.accuracy(),
        overall,
        cells,
    })
}

/// Train on each LLM's records and test on every LLM's records. Diagonal
/// cells use k-fold cross-validation within the group; off-diagonal cells
/// train on the whole source group and test on the whole target group.
pub fn cross_matrix(
    samples: &[Sample],
    spec: &ModelSpec,
    mode: FeatureMode,
    k: usize,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    spec.check_mode(mode)?;
    check_labeled(samples)?;
    let by_id = index_samples(samples)?;
    let plan = make_folds(samples, Regime::OnePerLlm, k, seed)?;
    if plan.groups.len() < 2 {
        return Err(HarnessError::SingleGroup(plan.groups.len()));
    }
    let diagonal = cross_validate(&plan, &by_id, spec)?;
    let members: BTreeMap<&str, Vec<&Sample>> = plan
        .groups
        .iter()
        .map(|(g, folds)| {
            let mut ids: Vec<&String> = folds.iter().flatten().collect();
            ids.sort();
            (g.as_str(), ids.into_iter().map(|id| by_id[id.as_str()]).collect())
        })
        .collect();
    let label = spec.label();
    let mut cells = Vec::new();
    let mut overall = Counts::default();
    for (source, train) in &members {
        let mut predictor = None;
        for (target, test) in &members {
            let counts = if source == target {
                diagonal[*source].clone()
            } else {
                if predictor.is_none() {
                    predictor = Some(spec.fit(train, "one-per-llm")?);
                }
                score(predictor.as_ref().expect("fitted"), test)?
            };
            overall.add(&counts);
            cells.push(Cell::new(source, target, &label, counts));
        }
    }
    let protocol = "cross-llm";
    Ok(EvalReport {
        protocol: protocol.into(),
        mode,
        model: label,
        k,
        seed,
        config_digest: config_digest(protocol, mode, spec, k, seed),
        overall_accuracy: overall.accuracy(),
        overall,
        cells,
    })
}

/// A record with its per-token annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedRecord {
    pub record: GenerationRecord,
    pub annotations: Vec<TokenAnnotation>,
}

impl AnnotatedRecord {
    pub fn new(record: GenerationRecord) -> Result<Self, HarnessError> {
        let annotations = syntax::annotate_tokens(&record).map_err(|source| HarnessError::Syntax {
            id: record.id.clone(),
            source,
        })?;
        Ok(Self { record, annotations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    Model,
    Dataset,
    All,
}

impl GroupBy {
    fn key(self, r: &GenerationRecord) -> String {
        match self {
            GroupBy::Model => r.model.clone(),
            GroupBy::Dataset => r.dataset.clone(),
            GroupBy::All => "all".into(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupBy::Model => "model",
            GroupBy::Dataset => "dataset",
            GroupBy::All => "all",
        }
    }
}

/// Which tokens count towards the denominator of a hallucination rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateDenominator {
    /// Tokens at positions up to and including the gold index.
    Prefix,
    /// Every generated token.
    All,
}

impl FromStr for RateDenominator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefix" => Ok(RateDenominator::Prefix),
            "all" => Ok(RateDenominator::All),
            _ => Err(format!("unknown rate denominator {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub hallucinated: usize,
    pub total: usize,
    pub rate: f64,
}

/// Group → token type → rate. Types with an empty denominator are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub group_by: GroupBy,
    pub denominator: RateDenominator,
    pub groups: BTreeMap<String, BTreeMap<TokenType, RateCell>>,
}

impl RateTable {
    pub fn rate(&self, group: &str, t: TokenType) -> Option<f64> {
        self.groups.get(group)?.get(&t).map(|c| c.rate)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([self.group_by.as_str(), "token_type", "hallucinated", "total", "rate"])?;
        for (g, row) in &self.groups {
            for (t, c) in row {
                w.write_record([
                    g.clone(),
                    t.name().into(),
                    c.hallucinated.to_string(),
                    c.total.to_string(),
                    format!("{:.6}", c.rate),
                ])?;
            }
        }
        csv_string(w)
    }
}

pub fn type_rate_table(records: &[AnnotatedRecord], group_by: GroupBy, denominator: RateDenominator) -> RateTable {
    let mut counts: BTreeMap<String, BTreeMap<TokenType, (usize, usize)>> = BTreeMap::new();
    for a in records {
        let Some(gold) = a.record.gold_index else {
            log::debug!("record {} is unlabeled; skipped in rate table", a.record.id);
            continue;
        };
        let row = counts.entry(group_by.key(&a.record)).or_default();
        for ann in &a.annotations {
            let i = ann.token_index;
            if denominator == RateDenominator::Prefix && i > gold {
                break;
            }
            let c = row.entry(ann.token_type).or_default();
            c.1 += 1;
            if i == gold {
                c.0 += 1;
            }
        }
    }
    let groups = counts
        .into_iter()
        .map(|(g, row)| {
            let row = row
                .into_iter()
                .filter(|(_, (_, total))| *total > 0)
                .map(|(t, (h, total))| {
                    (
                        t,
                        RateCell {
                            hallucinated: h,
                            total,
                            rate: h as f64 / total as f64,
                        },
                    )
                })
                .collect();
            (g, row)
        })
        .collect();
    RateTable {
        group_by,
        denominator,
        groups,
    }
}

/// Group → token type → share of all generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionTable {
    pub group_by: GroupBy,
    pub groups: BTreeMap<String, BTreeMap<TokenType, f64>>,
}

impl ProportionTable {
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([self.group_by.as_str(), "token_type", "proportion"])?;
        for (g, row) in &self.groups {
            for (t, p) in row {
                w.write_record([g.clone(), t.name().into(), format!("{p:.6}")])?;
            }
        }
        csv_string(w)
    }
}

pub fn type_proportion_table(records: &[AnnotatedRecord], group_by: GroupBy) -> ProportionTable {
    let mut counts: BTreeMap<String, BTreeMap<TokenType, usize>> = BTreeMap::new();
    for a in records {
        let row = counts.entry(group_by.key(&a.record)).or_default();
        for ann in &a.annotations {
            *row.entry(ann.token_type).or_default() += 1;
        }
    }
    let groups = counts
        .into_iter()
        .filter_map(|(g, row)| {
            let total: usize = row.values().sum();
            (total > 0).then(|| {
                let row = row
                    .into_iter()
                    .map(|(t, n)| (t, n as f64 / total as f64))
                    .collect();
                (g, row)
            })
        })
        .collect();
    ProportionTable { group_by, groups }
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Equal-width bins over `[histogram_min, histogram_max]`.
    pub histogram_min: f64,
    pub histogram_max: f64,
    pub histogram: Vec<usize>,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(values: &[f64], range: (f64, f64)) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut histogram = vec![0; HISTOGRAM_BINS];
    let width = (range.1 - range.0) / HISTOGRAM_BINS as f64;
    for &v in &sorted {
        let bin = (((v - range.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Some(Summary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        histogram_min: range.0,
        histogram_max: range.1,
        histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    ChosenProb,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Position {
    Gold,
    PreGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    /// `model`, `dataset` or `token-type`.
    pub grouping: String,
    pub group: String,
    pub signal: Signal,
    pub position: Position,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub entries: Vec<DistributionEntry>,
}

impl DistributionReport {
    pub fn find(&self, grouping: &str, group: &str, signal: Signal, position: Position) -> Option<&Summary> {
        self.entries
            .iter()
            .find(|e| e.grouping == grouping && e.group == group && e.signal == signal && e.position == position)
            .map(|e| &e.summary)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "grouping", "group", "signal", "position", "count", "mean", "min", "q1", "median", "q3", "max",
            "histogram",
        ])?;
        for e in &self.entries {
            let s = &e.summary;
            let signal = match e.signal {
                Signal::ChosenProb => "chosen-prob",
                Signal::Entropy => "entropy",
            };
            let position = match e.position {
                Position::Gold => "gold",
                Position::PreGold => "pre-gold",
            };
            let hist: Vec<String> = s.histogram.iter().map(usize::to_string).collect();
            w.write_record([
                e.grouping.clone(),
                e.group.clone(),
                signal.into(),
                position.into(),
                s.count.to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.min),
                format!("{:.6}", s.q1),
                format!("{:.6}", s.median),
                format!("{:.6}", s.q3),
                format!("{:.6}", s.max),
                hist.join(" "),
            ])?;
        }
        csv_string(w)
    }
}

/// Distributions of the chosen-token probability and the step entropy at
/// the gold position versus the positions before it, grouped by model,
/// dataset and token type. Empty groups are omitted.
pub fn distribution_report(records: &[AnnotatedRecord]) -> DistributionReport {
    type Key = (String, String, Signal, Position);
    let mut values: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for a in records {
        let Some(gold) = a.record.gold_index else { continue };
        for ann in a.annotations.iter().take_while(|ann| ann.token_index <= gold) {
            let position = if ann.token_index == gold { Position::Gold } else { Position::PreGold };
            for (grouping, group) in [
                ("model", a.record.model.clone()),
                ("dataset", a.record.dataset.clone()),
                ("token-type", ann.token_type.name().to_string()),
            ] {
                for (signal, v) in [(Signal::ChosenProb, ann.chosen_prob), (Signal::Entropy, ann.entropy)] {
                    values
                        .entry((grouping.to_string(), group.clone(), signal, position))
                        .or_default()
                        .push(v);
                }
            }
        }
    }
    let entropy_max = (crate::corpus::MAX_TOP_K as f64).ln();
    let entries = values
        .into_iter()
        .filter_map(|((grouping, group, signal, position), v)| {
            let range = match signal {
                Signal::ChosenProb => (0.0, 1.0),
                Signal::Entropy => (0.0, entropy_max),
            };
            summarize(&v, range).map(|summary| DistributionEntry {
                grouping,
                group,
                signal,
                position,
                summary,
            })
        })
        .collect();
    DistributionReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Language, LogProbStep, Task};
    use crate::predict::ForestConfig;
    use crate::synthetic::{planted_corpus, PlantedConfig};

    fn key(id: usize, dataset: &str, model: &str) -> GenerationRecord {
        GenerationRecord {
            id: format!("r{id:03}"),
            task: Task::CG,
            dataset: dataset.into(),
            model: model.into(),
            language: Language::Python,
            problem_id: "p".into(),
            context_prefix: None,
            tokens: vec!["x".into()],
            is_eos: false,
            steps: vec![LogProbStep::greedy(vec![("x".into(), -0.1)])],
            error_message: None,
            gold_index: None,
        }
    }

    #[test]
    fn folds_partition_each_group() {
        let records: Vec<_> = (0..100).map(|i| key(i, "mbpp", "m")).collect();
        let plan = make_folds(&records, Regime::AllInOne, 5, 0).unwrap();
        let folds = &plan.groups["all"];
        assert!(folds.iter().all(|f| f.len() == 20));
        let all: HashSet<_> = folds.iter().flatten().collect();
        assert_eq!(all.len(), 100);

        let records: Vec<_> = (0..100)
            .map(|i| key(i, if i < 50 { "mbpp" } else { "defects4j" }, "m"))
            .collect();
        let plan = make_folds(&records, Regime::OnePerDataset, 5, 0).unwrap();
        assert_eq!(plan.groups.len(), 2);
        assert!(plan.groups.values().all(|f| f.iter().all(|f| f.len() == 10)));

        let records: Vec<_> = (0..13).map(|i| key(i, "d", "m")).collect();
        let plan = make_folds(&records, Regime::AllInOne, 5, 3).unwrap();
        let sizes: Vec<_> = plan.groups["all"].iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

        let few: Vec<_> = (0..3).map(|i| key(i, "d", "m")).collect();
        match make_folds(&few, Regime::AllInOne, 5, 0) {
            Err(HarnessError::GroupTooSmall { group, .. }) => assert_eq!(group, "all"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn folds_ignore_input_order() {
        let mut records: Vec<_> = (0..30).map(|i| key(i, "d", "m")).collect();
        let a = make_folds(&records, Regime::AllInOne, 5, 9).unwrap();
        records.reverse();
        let b = make_folds(&records, Regime::AllInOne, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    fn samples(golds: &[usize], mode: FeatureMode) -> Vec<Sample> {
        golds
            .iter()
            .enumerate()
            .map(|(i, &g)| Sample {
                id: format!("s{i:03}"),
                dataset: if i % 2 == 0 { "a".into() } else { "b".into() },
                model: if i % 3 == 0 { "m1".into() } else { "m2".into() },
                matrix: FeatureMatrix {
                    mode,
                    rows: ndarray::Array2::zeros((g + 2, mode.width())),
                    gold_index: Some(g),
                },
            })
            .collect()
    }

    #[test]
    fn reference_predictors() {
        let golds: Vec<usize> = (0..50).map(|i| if i % 5 < 2 { 1 } else { 2 + i % 4 }).collect();
        for mode in [FeatureMode::PerToken, FeatureMode::PerSample] {
            let s = samples(&golds, mode);
            for regime in Regime::ALL {
                let plan = make_folds(&s, regime, 5, 0).unwrap();
                let r = evaluate(&plan, &s, &ModelSpec::Oracle, mode).unwrap();
                assert_eq!(r.overall_accuracy, Some(1.0));
                let r = evaluate(&plan, &s, &ModelSpec::ConstantIndex { index: 1 }, mode).unwrap();
                assert_eq!(r.overall_accuracy, Some(0.4));
            }
        }
    }

    #[test]
    fn unlabeled_records_are_rejected() {
        let mut s = samples(&[1, 2, 3, 1, 2], FeatureMode::PerToken);
        s[2].matrix.gold_index = None;
        let plan = make_folds(&s, Regime::AllInOne, 5, 0).unwrap();
        assert!(matches!(
            evaluate(&plan, &s, &ModelSpec::Oracle, FeatureMode::PerToken),
            Err(HarnessError::Unlabeled(id)) if id == "s002"
        ));
    }

    #[test]
    fn cross_matrix_shape() {
        let golds: Vec<usize> = (0..30).map(|i| 1 + i % 3).collect();
        let s = samples(&golds, FeatureMode::PerSample);
        let r = cross_matrix(&s, &ModelSpec::Oracle, FeatureMode::PerSample, 5, 0).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!(r.cells.iter().all(|c| c.accuracy == Some(1.0)));
        let single: Vec<_> = s.into_iter().filter(|x| x.model == "m1").collect();
        assert!(matches!(
            cross_matrix(&single, &ModelSpec::Oracle, FeatureMode::PerSample, 5, 0),
            Err(HarnessError::SingleGroup(1))
        ));
    }

    #[test]
    fn trained_forest_beats_chance_on_planted_data() {
        let records = planted_corpus(&PlantedConfig {
            records: 100,
            max_tokens: 15,
            ..Default::default()
        });
        let s = build_samples(&records, FeatureMode::PerToken).unwrap();
        let plan = make_folds(&s, Regime::AllInOne, 5, 0).unwrap();
        let spec = ModelSpec::trained(
            ModelKind::TreeEnsemble,
            TrainConfig {
                forest: ForestConfig { trees: 10, ..Default::default() },
                ..Default::default()
            },
        );
        let r = evaluate(&plan, &s, &spec, FeatureMode::PerToken).unwrap();
        assert!(r.overall_accuracy.unwrap() > 0.8, "{:?}", r.overall);
        assert!(matches!(
            evaluate(&plan, &s, &spec, FeatureMode::PerSample),
            Err(HarnessError::ModeMismatch { .. })
        ));
        let again = evaluate(&plan, &s, &spec, FeatureMode::PerToken).unwrap();
        assert_eq!(r, again);
        assert_eq!(r.config_digest.len(), 64);
        assert!(r.to_csv().unwrap().lines().count() == 2);
    }

    fn annotated(types: &[TokenType], gold: Option<usize>, probs: &[f64]) -> AnnotatedRecord {
        let mut record = key(0, "d", "m");
        record.tokens = types.iter().map(|_| "x".to_string()).collect();
        record.steps = types.iter().map(|_| LogProbStep::greedy(vec![("x".into(), -0.1)])).collect();
        record.gold_index = gold;
        let annotations = types
            .iter()
            .enumerate()
            .map(|(i, &t)| TokenAnnotation {
                token_index: i + 1,
                span: (i, i + 1),
                token_type: t,
                chosen_prob: probs.get(i).copied().unwrap_or(0.5),
                entropy: 0.0,
            })
            .collect();
        AnnotatedRecord { record, annotations }
    }

    #[test]
    fn rate_table_hand_count() {
        use TokenType::*;
        let types = [Keyword, Space, Operator, Identifier, Operator, Constant, Keyword, Operator, Delimiter, Eos];
        let r = annotated(&types, Some(5), &[]);
        let t = type_rate_table(std::slice::from_ref(&r), GroupBy::Model, RateDenominator::Prefix);
        assert_eq!(t.rate("m", Operator), Some(0.5));
        assert_eq!(t.rate("m", Keyword), Some(0.0));
        assert_eq!(t.rate("m", Delimiter), None);
        let t = type_rate_table(&[r], GroupBy::Model, RateDenominator::All);
        assert_eq!(t.rate("m", Operator), Some(1.0 / 3.0));
        assert_eq!(t.rate("m", Delimiter), Some(0.0));
        assert_eq!(t.rate("m", TypeIdentifier), None);
    }

    #[test]
    fn proportions() {
        use TokenType::*;
        let r = annotated(&[Keyword, Space, Identifier, Identifier], None, &[]);
        let t = type_proportion_table(&[r], GroupBy::All);
        let row = &t.groups["all"];
        assert_eq!(row[&Identifier], 0.5);
        assert_eq!(row[&Keyword], 0.25);
        assert_eq!(row[&Space], 0.25);
        assert!((row.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distribution_of_synthetic_probabilities() {
        use TokenType::*;
        let records: Vec<_> = (0..5)
            .map(|_| annotated(&[Keyword, Identifier, Operator, Constant], Some(3), &[0.9, 0.9, 0.1, 0.9]))
            .collect();
        let d = distribution_report(&records);
        let gold = d.find("model", "m", Signal::ChosenProb, Position::Gold).unwrap();
        let pre = d.find("model", "m", Signal::ChosenProb, Position::PreGold).unwrap();
        assert_eq!(gold.median, 0.1);
        assert_eq!(pre.median, 0.9);
        let ent = d.find("dataset", "d", Signal::Entropy, Position::PreGold).unwrap();
        assert_eq!((ent.min, ent.max), (0.0, 0.0));
        assert!(d.find("token-type", "Constant", Signal::ChosenProb, Position::Gold).is_none());
        assert!(d.to_csv().unwrap().lines().count() > 1);
    }
}
