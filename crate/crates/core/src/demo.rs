//! The worked example, end to end.

use crate::corpus::{CanonicalPool, GenerationRecord, Language, LogProbStep, Task};
use crate::localize::{self, HallucinationLabel, LocalizeError};
use crate::normalize::NormalizedProgram;

pub const PROMPT: &str = "def check_greater(tup1, tup2):\n    ";

/// Tokens the model generated, one string per decoding step.
pub const GENERATED: &[&str] = &[
    "return", " all", "(", "x", " <", " y", " for", " x", ",", " y", " in", " zip", "(", "tup",
    "1", ",", " tup", "2", "))", "",
];

pub const CANONICALS: &[&str] = &[
    "return all(x > y for x, y in zip(tup1, tup2))",
    "return all(a > b for a, b in zip(tup1, tup2))",
    "return all(i > j for i, j in zip(tup1, tup2))",
];

#[derive(Debug, Clone)]
pub struct WorkedExample {
    pub record: GenerationRecord,
    pub generated: NormalizedProgram,
    pub canonicals: Vec<NormalizedProgram>,
    pub label: HallucinationLabel,
}

impl WorkedExample {
    pub fn index(&self) -> Option<usize> {
        self.label.index
    }

    /// The token the index points at.
    pub fn token(&self) -> Option<&str> {
        self.label.index.map(|i| self.record.tokens[i - 1].as_str())
    }
}

pub fn worked_example_record() -> GenerationRecord {
    GenerationRecord {
        id: "worked-example".into(),
        task: Task::CG,
        dataset: "mbpp".into(),
        model: "example".into(),
        language: Language::Python,
        problem_id: "check_greater".into(),
        context_prefix: Some(PROMPT.into()),
        tokens: GENERATED.iter().map(|t| t.to_string()).collect(),
        is_eos: true,
        steps: GENERATED
            .iter()
            .map(|t| LogProbStep::greedy(vec![(t.to_string(), -0.05)]))
            .collect(),
        error_message: Some("AssertionError".into()),
        gold_index: None,
    }
}

pub fn worked_example() -> Result<WorkedExample, LocalizeError> {
    let record = worked_example_record();
    let pool = CanonicalPool::new(
        "check_greater",
        Language::Python,
        CANONICALS.iter().map(|s| s.to_string()).collect(),
    );
    let generated = localize::normalize_generated(&record)?;
    let canonicals = pool.normalized(record.prefix()).as_ref().clone();
    let label = localize::localize(&record, &pool)?;
    Ok(WorkedExample {
        record,
        generated,
        canonicals,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_five() {
        let f = worked_example().unwrap();
        assert_eq!(f.index(), Some(5));
        assert_eq!(f.token(), Some(" <"));
        assert_eq!(f.generated.normalized, "return all(v1 < v2 for v1, v2 in zip(tup1, tup2))");
        assert_eq!(f.canonicals.len(), 1);
        assert_eq!(f.canonicals[0].normalized, "return all(v1 > v2 for v1, v2 in zip(tup1, tup2))");
    }
}
