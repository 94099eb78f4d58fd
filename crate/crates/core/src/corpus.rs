//! Instance and canonical-solution files.
//!
//! Both files are line-delimited JSON. An instance line carries one LLM
//! generation: the token strings exactly as the model segmented them, the
//! top-k log-probabilities at every decoding step and, once labeled, the
//! 1-based index of the first hallucinated token. See `docs/schema.md`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::{self, NormalizedProgram};

/// Version written to (and required from) every instance line.
pub const SCHEMA_VERSION: u32 = 1;

/// Maximum number of alternatives stored per decoding step.
pub const MAX_TOP_K: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { line: usize, found: u32 },
    #[error("line {line} (record {id}): schema error: {message}")]
    Schema {
        line: usize,
        id: String,
        message: String,
    },
    #[error("line {line} (record {id}): integrity error: {message}")]
    Integrity {
        line: usize,
        id: String,
        message: String,
    },
    #[error("line {line}: {source}")]
    Language {
        line: usize,
        #[source]
        source: UnknownLanguage,
    },
    #[error("line {line}: empty solution text for problem {problem_id}")]
    EmptySolution { line: usize, problem_id: String },
    #[error("problem {problem_id} is listed with both {first} and {second} solutions")]
    MixedLanguage {
        problem_id: String,
        first: Language,
        second: Language,
    },
}

#[derive(Debug, Error)]
#[error("unknown language tag {0:?} (expected python or java)")]
pub struct UnknownLanguage(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    CG,
    APR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    Java,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Python => "python",
            Language::Java => "java",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = UnknownLanguage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "python" | "py" => Ok(Language::Python),
            "java" => Ok(Language::Java),
            _ => Err(UnknownLanguage(s.to_string())),
        }
    }
}

/// Which alternative the model actually emitted at a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chosen {
    /// Index into [`LogProbStep::entries`].
    Entry(usize),
    /// The emitted token is absent from the stored top-k; carries its own logprob.
    NotInTopK(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbStep {
    /// `(token_text, logprob)`, sorted by logprob descending.
    pub entries: Vec<(String, f64)>,
    pub chosen: Chosen,
}

impl LogProbStep {
    /// Greedy step: the emitted token is the top entry.
    pub fn greedy(entries: Vec<(String, f64)>) -> Self {
        Self {
            entries,
            chosen: Chosen::Entry(0),
        }
    }

    /// Logprob of the emitted token, `None` when `chosen` points past the entries.
    pub fn chosen_logprob(&self) -> Option<f64> {
        match self.chosen {
            Chosen::Entry(i) => self.entries.get(i).map(|e| e.1),
            Chosen::NotInTopK(lp) => Some(lp),
        }
    }
}

/// One LLM output.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub id: String,
    pub task: Task,
    pub dataset: String,
    pub model: String,
    pub language: Language,
    pub problem_id: String,
    /// Prompt-provided code preceding the generated region (e.g. a signature).
    pub context_prefix: Option<String>,
    pub tokens: Vec<String>,
    /// When set, the final token is the EOS sentinel (its text is empty).
    pub is_eos: bool,
    pub steps: Vec<LogProbStep>,
    pub error_message: Option<String>,
    /// 1-based index of the first hallucinated token.
    pub gold_index: Option<usize>,
}

impl GenerationRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 1-based index of the EOS sentinel, if the record has one.
    pub fn eos_index(&self) -> Option<usize> {
        (self.is_eos && !self.tokens.is_empty()).then_some(self.tokens.len())
    }

    pub fn is_eos_token(&self, index: usize) -> bool {
        self.eos_index() == Some(index)
    }

    /// Tokens that contribute source text (everything but the EOS sentinel).
    pub fn text_tokens(&self) -> &[String] {
        match self.eos_index() {
            Some(n) => &self.tokens[..n - 1],
            None => &self.tokens,
        }
    }

    /// The generated source: concatenation of all non-EOS tokens.
    pub fn generated_text(&self) -> String {
        self.text_tokens().concat()
    }

    pub fn prefix(&self) -> &str {
        self.context_prefix.as_deref().unwrap_or("")
    }

    /// Byte span of every token within the generated text. The EOS
    /// sentinel gets the empty span at the end.
    pub fn token_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.tokens
            .iter()
            .map(|t| {
                let span = (start, start + t.len());
                start += t.len();
                span
            })
            .collect()
    }

    /// 1-based index of the token whose span contains `offset` (an offset
    /// into the generated text). Offsets at or past the end resolve to the
    /// last token.
    pub fn token_at(&self, offset: usize) -> Option<usize> {
        let spans = self.token_spans();
        let text_count = self.text_tokens().len();
        spans[..text_count]
            .iter()
            .position(|&(s, e)| s <= offset && offset < e)
            .map(|i| i + 1)
            .or_else(|| (!self.tokens.is_empty()).then_some(self.tokens.len()))
    }
}

/// A broken invariant reported by [`validate_record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    StepsLengthMismatch { tokens: usize, steps: usize },
    GoldIndexOutOfRange { index: usize, len: usize },
    EosNotEmpty,
    EmptyStep { step: usize },
    TooManyEntries { step: usize, count: usize },
    NonFiniteLogprob { step: usize },
    PositiveLogprob { step: usize },
    UnsortedEntries { step: usize },
    ChosenOutOfRange { step: usize },
}

impl Violation {
    /// Schema violations concern the record's shape; the rest are integrity
    /// violations of its values.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            Violation::StepsLengthMismatch { .. }
                | Violation::EmptyStep { .. }
                | Violation::TooManyEntries { .. }
                | Violation::ChosenOutOfRange { .. }
        )
    }

    pub fn detail(&self) -> String {
        match self {
            Violation::StepsLengthMismatch { tokens, steps } => {
                format!("{tokens} tokens but {steps} steps")
            }
            Violation::GoldIndexOutOfRange { index, len } => {
                format!("gold_index {index} not in [1, {len}]")
            }
            Violation::EosNotEmpty => "EOS sentinel token has non-empty text".into(),
            Violation::EmptyStep { step }
            | Violation::TooManyEntries { step, .. }
            | Violation::NonFiniteLogprob { step }
            | Violation::PositiveLogprob { step }
            | Violation::UnsortedEntries { step }
            | Violation::ChosenOutOfRange { step } => format!("step {}", step + 1),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Violation::StepsLengthMismatch { .. } => "length(steps) must equal length(tokens)",
            Violation::GoldIndexOutOfRange { .. } => "gold_index out of range",
            Violation::EosNotEmpty => "EOS sentinel must be empty",
            Violation::EmptyStep { .. } => "step has no entries",
            Violation::TooManyEntries { .. } => "more than 100 entries in step",
            Violation::NonFiniteLogprob { .. } => "logprob must be finite",
            Violation::PositiveLogprob { .. } => "logprob must be ≤ 0",
            Violation::UnsortedEntries { .. } => "entries must be sorted by logprob descending",
            Violation::ChosenOutOfRange { .. } => "chosen index out of range",
        };
        f.write_str(name)
    }
}

/// Check every record invariant; an empty result means the record is well formed.
pub fn validate_record(record: &GenerationRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.tokens.len() != record.steps.len() {
        out.push(Violation::StepsLengthMismatch {
            tokens: record.tokens.len(),
            steps: record.steps.len(),
        });
    }
    if let Some(index) = record.gold_index {
        if index == 0 || index > record.tokens.len() {
            out.push(Violation::GoldIndexOutOfRange {
                index,
                len: record.tokens.len(),
            });
        }
    }
    if record.is_eos && record.tokens.last().is_some_and(|t| !t.is_empty()) {
        out.push(Violation::EosNotEmpty);
    }
    for (step_idx, step) in record.steps.iter().enumerate() {
        if step.entries.is_empty() {
            out.push(Violation::EmptyStep { step: step_idx });
        }
        if step.entries.len() > MAX_TOP_K {
            out.push(Violation::TooManyEntries {
                step: step_idx,
                count: step.entries.len(),
            });
        }
        let mut logprobs: Vec<f64> = step.entries.iter().map(|e| e.1).collect();
        if let Chosen::NotInTopK(lp) = step.chosen {
            logprobs.push(lp);
        }
        if logprobs.iter().any(|lp| !lp.is_finite()) {
            out.push(Violation::NonFiniteLogprob { step: step_idx });
        }
        if logprobs.iter().any(|&lp| lp > 0.0) {
            out.push(Violation::PositiveLogprob { step: step_idx });
        }
        if step.entries.windows(2).any(|w| w[0].1 < w[1].1) {
            out.push(Violation::UnsortedEntries { step: step_idx });
        }
        if let Chosen::Entry(i) = step.chosen {
            if i >= step.entries.len() && !step.entries.is_empty() {
                out.push(Violation::ChosenOutOfRange { step: step_idx });
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    schema_version: u32,
    id: String,
    task: Task,
    dataset: String,
    model: String,
    language: String,
    problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_prefix: Option<String>,
    /// Declared generated source; checked against the token concatenation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_eos: bool,
    steps: Vec<Vec<(String, f64)>>,
    /// Per-step index of the emitted entry; `null` means not in top-k.
    /// Absent means every step emitted its top entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chosen_logprob: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_index: Option<usize>,
}

impl RecordLine {
    fn from_record(r: &GenerationRecord) -> Self {
        let all_greedy = r.steps.iter().all(|s| s.chosen == Chosen::Entry(0));
        let (chosen, chosen_logprob) = if all_greedy {
            (None, None)
        } else {
            let chosen = r
                .steps
                .iter()
                .map(|s| match s.chosen {
                    Chosen::Entry(i) => Some(i),
                    Chosen::NotInTopK(_) => None,
                })
                .collect();
            let logprobs: Vec<Option<f64>> = r
                .steps
                .iter()
                .map(|s| match s.chosen {
                    Chosen::Entry(_) => None,
                    Chosen::NotInTopK(lp) => Some(lp),
                })
                .collect();
            let any = logprobs.iter().any(Option::is_some);
            (Some(chosen), any.then_some(logprobs))
        };
        RecordLine {
            schema_version: SCHEMA_VERSION,
            id: r.id.clone(),
            task: r.task,
            dataset: r.dataset.clone(),
            model: r.model.clone(),
            language: r.language.as_str().to_string(),
            problem_id: r.problem_id.clone(),
            context_prefix: r.context_prefix.clone(),
            source: None,
            tokens: r.tokens.clone(),
            is_eos: r.is_eos,
            steps: r.steps.iter().map(|s| s.entries.clone()).collect(),
            chosen,
            chosen_logprob,
            error_message: r.error_message.clone(),
            gold_index: r.gold_index,
        }
    }

    fn into_record(self, line: usize) -> Result<GenerationRecord, CorpusError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CorpusError::SchemaVersion {
                line,
                found: self.schema_version,
            });
        }
        let language = self
            .language
            .parse()
            .map_err(|source| CorpusError::Language { line, source })?;
        let schema = |message: String| CorpusError::Schema {
            line,
            id: self.id.clone(),
            message,
        };
        let n = self.steps.len();
        if let Some(c) = &self.chosen {
            if c.len() != n {
                return Err(schema(format!("chosen has {} entries for {n} steps", c.len())));
            }
        }
        if let Some(c) = &self.chosen_logprob {
            if c.len() != n {
                return Err(schema(format!(
                    "chosen_logprob has {} entries for {n} steps",
                    c.len()
                )));
            }
        }
        let mut steps = Vec::with_capacity(n);
        for (i, entries) in self.steps.into_iter().enumerate() {
            let chosen = match self.chosen.as_ref().map(|c| c[i]) {
                None | Some(Some(_)) => {
                    Chosen::Entry(self.chosen.as_ref().and_then(|c| c[i]).unwrap_or(0))
                }
                Some(None) => {
                    match self.chosen_logprob.as_ref().and_then(|c| c[i]) {
                        Some(lp) => Chosen::NotInTopK(lp),
                        None => {
                            return Err(schema(format!(
                                "step {} is not in top-k but has no chosen_logprob",
                                i + 1
                            )))
                        }
                    }
                }
            };
            steps.push(LogProbStep { entries, chosen });
        }
        let record = GenerationRecord {
            id: self.id,
            task: self.task,
            dataset: self.dataset,
            model: self.model,
            language,
            problem_id: self.problem_id,
            context_prefix: self.context_prefix,
            tokens: self.tokens,
            is_eos: self.is_eos,
            steps,
            error_message: self.error_message,
            gold_index: self.gold_index,
        };
        if let Some(source) = &self.source {
            if record.generated_text() != *source {
                return Err(CorpusError::Integrity {
                    line,
                    id: record.id,
                    message: "token concatenation does not equal the declared source".into(),
                });
            }
        }
        Ok(record)
    }
}

/// Parse one instance line. `line` is used for error messages only.
pub fn parse_record(text: &str, line: usize) -> Result<GenerationRecord, CorpusError> {
    let wire: RecordLine = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let record = wire.into_record(line)?;
    let violations = validate_record(&record);
    if let Some(first) = violations.first() {
        let message = violations
            .iter()
            .map(|v| format!("{v} ({})", v.detail()))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(if first.is_schema() {
            CorpusError::Schema {
                line,
                id: record.id,
                message,
            }
        } else {
            CorpusError::Integrity {
                line,
                id: record.id,
                message,
            }
        });
    }
    Ok(record)
}

pub fn record_to_json(record: &GenerationRecord) -> String {
    serde_json::to_string(&RecordLine::from_record(record)).expect("record serialization")
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn lines(
    path: &Path,
) -> Result<impl Iterator<Item = Result<(usize, String), CorpusError>>, CorpusError> {
    let owned = path.to_path_buf();
    Ok(open(path)?
        .lines()
        .enumerate()
        .map(move |(i, l)| {
            l.map(|l| (i + 1, l)).map_err(|source| CorpusError::Io {
                path: owned.clone(),
                source,
            })
        })
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

/// Load an instance file. Blank lines are skipped.
pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, CorpusError> {
    lines(path)?
        .map(|l| l.and_then(|(n, text)| parse_record(&text, n)))
        .collect()
}

pub fn write_records<W: Write>(
    mut out: W,
    records: &[GenerationRecord],
) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", record_to_json(r))?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[GenerationRecord]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(File::create(path).map_err(io)?);
    write_records(&mut file, records).map_err(io)?;
    file.flush().map_err(io)
}

/// All known solutions for one problem.
pub struct CanonicalPool {
    pub problem_id: String,
    pub language: Language,
    /// Raw solution texts, exact duplicates removed, in first-appearance order.
    pub solutions: Vec<String>,
    normalized: Mutex<HashMap<String, Arc<Vec<NormalizedProgram>>>>,
}

impl CanonicalPool {
    pub fn new(problem_id: impl Into<String>, language: Language, solutions: Vec<String>) -> Self {
        let mut seen = HashSet::new();
        let solutions = solutions
            .into_iter()
            .filter(|s| seen.insert(s.clone()))
            .collect();
        Self {
            problem_id: problem_id.into(),
            language,
            solutions,
            normalized: Mutex::new(HashMap::new()),
        }
    }

    pub fn push(&mut self, solution: String) {
        if !self.solutions.contains(&solution) {
            self.solutions.push(solution);
            self.normalized.get_mut().expect("pool cache").clear();
        }
    }

    /// Unique normalized solutions, each parsed after `prefix`. Computed once
    /// per distinct prefix.
    pub fn normalized(&self, prefix: &str) -> Arc<Vec<NormalizedProgram>> {
        if let Some(hit) = self.normalized.lock().expect("pool cache").get(prefix) {
            return Arc::clone(hit);
        }
        let programs = Arc::new(normalize::dedup_solutions(
            &self.solutions,
            self.language,
            prefix,
        ));
        self.normalized
            .lock()
            .expect("pool cache")
            .entry(prefix.to_string())
            .or_insert(programs)
            .clone()
    }
}

impl Clone for CanonicalPool {
    fn clone(&self) -> Self {
        Self {
            problem_id: self.problem_id.clone(),
            language: self.language,
            solutions: self.solutions.clone(),
            normalized: Mutex::new(HashMap::new()),
        }
    }
}

impl fmt::Debug for CanonicalPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanonicalPool")
            .field("problem_id", &self.problem_id)
            .field("language", &self.language)
            .field("solutions", &self.solutions)
            .finish()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalLine {
    problem_id: String,
    language: String,
    source: String,
}

/// Load a canonical-solution file into pools keyed by problem id.
pub fn load_canonicals(path: &Path) -> Result<BTreeMap<String, CanonicalPool>, CorpusError> {
    let mut pools: BTreeMap<String, CanonicalPool> = BTreeMap::new();
    for l in lines(path)? {
        let (line, text) = l?;
        let entry: CanonicalLine =
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let language: Language = entry
            .language
            .parse()
            .map_err(|source| CorpusError::Language { line, source })?;
        if entry.source.trim().is_empty() {
            return Err(CorpusError::EmptySolution {
                line,
                problem_id: entry.problem_id,
            });
        }
        match pools.get_mut(&entry.problem_id) {
            Some(pool) if pool.language != language => {
                return Err(CorpusError::MixedLanguage {
                    problem_id: entry.problem_id,
                    first: pool.language,
                    second: language,
                })
            }
            Some(pool) => pool.push(entry.source),
            None => {
                pools.insert(
                    entry.problem_id.clone(),
                    CanonicalPool::new(entry.problem_id, language, vec![entry.source]),
                );
            }
        }
    }
    Ok(pools)
}

pub fn canonical_to_json(problem_id: &str, language: Language, source: &str) -> String {
    serde_json::to_string(&CanonicalLine {
        problem_id: problem_id.to_string(),
        language: language.as_str().to_string(),
        source: source.to_string(),
    })
    .expect("canonical serialization")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn record(tokens: &[&str]) -> GenerationRecord {
        GenerationRecord {
            id: "r1".into(),
            task: Task::CG,
            dataset: "mbpp".into(),
            model: "deepseekcoder-1.3b".into(),
            language: Language::Python,
            problem_id: "p1".into(),
            context_prefix: None,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            is_eos: false,
            steps: tokens
                .iter()
                .map(|t| LogProbStep::greedy(vec![(t.to_string(), -0.1), ("x".into(), -2.0)]))
                .collect(),
            error_message: None,
            gold_index: None,
        }
    }

    fn file_with(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn line(id: &str, tokens: &[&str], steps: usize, source: Option<&str>) -> String {
        let steps: Vec<_> = (0..steps).map(|_| vec![("a", -0.5)]).collect();
        let mut v = serde_json::json!({
            "schema_version": 1, "id": id, "task": "CG", "dataset": "mbpp",
            "model": "m", "language": "python", "problem_id": "p1",
            "tokens": tokens, "steps": steps,
        });
        if let Some(s) = source {
            v["source"] = s.into();
        }
        v.to_string()
    }

    #[test]
    fn loads_three_lines() {
        let f = file_with(&[
            line("a", &["x"], 1, None),
            line("b", &["y"], 1, None),
            line("c", &["z"], 1, None),
        ]);
        assert_eq!(load_records(f.path()).unwrap().len(), 3);
    }

    #[test]
    fn declared_source_must_match_concatenation() {
        let ok = file_with(&[line("a", &["ab", "cd"], 2, Some("abcd"))]);
        assert_eq!(load_records(ok.path()).unwrap()[0].generated_text(), "abcd");
        let bad = file_with(&[line("a", &["ab", "cd"], 2, Some("abce"))]);
        assert!(matches!(
            load_records(bad.path()),
            Err(CorpusError::Integrity { line: 1, .. })
        ));
    }

    #[test]
    fn length_mismatch_is_a_schema_error() {
        let f = file_with(&[line("a", &["a", "b", "c", "d", "e"], 4, None)]);
        let err = load_records(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let f = file_with(&[
            line("a", &["x"], 1, None),
            r#"{"schema_version":1,"id":"b"}"#.to_string(),
        ]);
        let msg = load_records(f.path()).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("task"), "{msg}");
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let text = line("a", &["x"], 1, None).replace("\"schema_version\":1", "\"schema_version\":7");
        assert!(matches!(
            parse_record(&text, 3),
            Err(CorpusError::SchemaVersion { line: 3, found: 7 })
        ));
    }

    #[test]
    fn validate_examples() {
        let r = record(&["return", " x"]);
        assert!(validate_record(&r).is_empty());

        let mut r0 = r.clone();
        r0.gold_index = Some(0);
        let v = validate_record(&r0);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "gold_index out of range");

        let mut rp = r.clone();
        rp.steps[1].entries[0].1 = 0.5;
        rp.steps[1].entries.swap(0, 1);
        rp.steps[1].entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        let v = validate_record(&rp);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "logprob must be ≤ 0");
    }

    #[test]
    fn eos_sentinel_is_addressable() {
        let mut r = record(&["return", " 1", ""]);
        r.is_eos = true;
        assert!(validate_record(&r).is_empty());
        assert_eq!(r.generated_text(), "return 1");
        assert_eq!(r.eos_index(), Some(3));
        assert_eq!(r.token_at(8), Some(3));
        assert_eq!(r.token_at(6), Some(2));
        r.tokens[2] = "</s>".into();
        assert_eq!(validate_record(&r), vec![Violation::EosNotEmpty]);
    }

    #[test]
    fn canonical_pools_group_and_dedup() {
        let f = file_with(&[
            canonical_to_json("p1", Language::Python, "return 1"),
            canonical_to_json("p1", Language::Python, "return 2"),
            canonical_to_json("p2", Language::Python, "return 3"),
            canonical_to_json("p1", Language::Python, "return 1"),
        ]);
        let pools = load_canonicals(f.path()).unwrap();
        assert_eq!(pools.len(), 2);
        assert_eq!(pools["p1"].solutions, vec!["return 1", "return 2"]);
    }

    #[test]
    fn canonical_errors() {
        let ruby = file_with(&[r#"{"problem_id":"p","language":"ruby","source":"x"}"#.into()]);
        let msg = load_canonicals(ruby.path()).unwrap_err().to_string();
        assert!(msg.contains("ruby"), "{msg}");
        let empty = file_with(&[canonical_to_json("p", Language::Java, "  ")]);
        assert!(matches!(
            load_canonicals(empty.path()),
            Err(CorpusError::EmptySolution { .. })
        ));
        let mixed = file_with(&[
            canonical_to_json("p", Language::Java, "a"),
            canonical_to_json("p", Language::Python, "b"),
        ]);
        assert!(matches!(
            load_canonicals(mixed.path()),
            Err(CorpusError::MixedLanguage { .. })
        ));
    }

    fn arb_step() -> impl Strategy<Value = LogProbStep> {
        (
            prop::collection::vec(("[a-z ]{0,3}", -20.0f64..=0.0), 1..6),
            prop::option::of(-30.0f64..0.0),
            any::<prop::sample::Index>(),
        )
            .prop_map(|(mut entries, missing, pick)| {
                entries.sort_by(|a, b| b.1.total_cmp(&a.1));
                let chosen = match missing {
                    Some(lp) => Chosen::NotInTopK(lp),
                    None => Chosen::Entry(pick.index(entries.len())),
                };
                LogProbStep { entries, chosen }
            })
    }

    fn arb_record() -> impl Strategy<Value = GenerationRecord> {
        (
            prop::collection::vec(("[ a-z()\n]{0,4}", arb_step()), 1..8),
            any::<bool>(),
            prop::option::of("[a-z():\n ]{0,10}"),
            any::<prop::sample::Index>(),
            any::<bool>(),
        )
            .prop_map(|(pairs, eos, prefix, gold, labeled)| {
                let (mut tokens, steps): (Vec<String>, Vec<_>) = pairs.into_iter().unzip();
                if eos {
                    *tokens.last_mut().unwrap() = String::new();
                }
                let n = tokens.len();
                GenerationRecord {
                    id: "x".into(),
                    task: Task::APR,
                    dataset: "defects4j".into(),
                    model: "m".into(),
                    language: Language::Java,
                    problem_id: "p".into(),
                    context_prefix: prefix,
                    tokens,
                    is_eos: eos,
                    steps,
                    error_message: labeled.then(|| "AssertionError".into()),
                    gold_index: labeled.then(|| gold.index(n) + 1),
                }
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(r in arb_record()) {
            prop_assert!(validate_record(&r).is_empty());
            let text = record_to_json(&r);
            let back = parse_record(&text, 1).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn pool_contents_are_order_independent(
            sols in prop::collection::vec("[a-c]{1,2}", 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = sols.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a: HashSet<_> = CanonicalPool::new("p", Language::Python, sols).solutions.into_iter().collect();
            let b: HashSet<_> = CanonicalPool::new("p", Language::Python, shuffled).solutions.into_iter().collect();
            prop_assert_eq!(a, b);
        }
    }
}
