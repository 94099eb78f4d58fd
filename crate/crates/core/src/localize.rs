//! Hallucination-token localization against a pool of canonical solutions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CanonicalPool, GenerationRecord, Language};
use crate::normalize::{self, NormalizedProgram};
use crate::syntax::{self, SyntaxError};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("no canonical solutions for problem {0}")]
    EmptyPool(String),
    #[error("record {record} is {record_lang} but the pool for {problem} is {pool_lang}")]
    LanguageMismatch {
        record: String,
        problem: String,
        record_lang: Language,
        pool_lang: Language,
    },
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
}

/// The comparison view of a program under its language's whitespace policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignificantStream {
    pub chars: Vec<u8>,
    /// Byte offset in the source text of each entry of `chars`.
    pub origins: Vec<usize>,
}

impl SignificantStream {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

/// Java keeps every non-whitespace byte. Python additionally keeps line
/// breaks and indentation; a line break (with the indentation after it) is
/// emitted only once further significant content follows, so blank lines
/// and trailing newlines do not count. `\r\n` reads as `\n`.
pub fn significant_stream(text: &str, language: Language) -> SignificantStream {
    let bytes = text.as_bytes();
    let mut chars = Vec::with_capacity(bytes.len());
    let mut origins = Vec::with_capacity(bytes.len());
    match language {
        Language::Java => {
            for (i, &b) in bytes.iter().enumerate() {
                if !b.is_ascii_whitespace() {
                    chars.push(b);
                    origins.push(i);
                }
            }
        }
        Language::Python => {
            let mut at_line_start = true;
            let mut pending_newline: Option<usize> = None;
            let mut indent: Vec<(u8, usize)> = Vec::new();
            for (i, &b) in bytes.iter().enumerate() {
                match b {
                    b'\n' => {
                        if !chars.is_empty() && pending_newline.is_none() {
                            pending_newline = Some(i);
                        }
                        at_line_start = true;
                        indent.clear();
                    }
                    b'\r' => {}
                    b' ' | b'\t' | b'\x0c' => {
                        if at_line_start {
                            indent.push((b, i));
                        }
                    }
                    _ => {
                        if at_line_start {
                            if let Some(nl) = pending_newline.take() {
                                chars.push(b'\n');
                                origins.push(nl);
                            }
                            for &(c, o) in &indent {
                                chars.push(c);
                                origins.push(o);
                            }
                            indent.clear();
                            at_line_start = false;
                        }
                        chars.push(b);
                        origins.push(i);
                    }
                }
            }
        }
    }
    SignificantStream { chars, origins }
}

/// Where a generated stream first departs from a canonical one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mismatch {
    /// Byte offset into the generated (normalized) text.
    At(usize),
    /// The generated stream is a strict prefix of the canonical: it stopped early.
    EndOfGenerated,
}

pub fn first_mismatch(generated: &SignificantStream, canonical: &SignificantStream) -> Option<Mismatch> {
    let common = generated
        .chars
        .iter()
        .zip(&canonical.chars)
        .take_while(|(a, b)| a == b)
        .count();
    if common < generated.len() {
        Some(Mismatch::At(generated.origins[common]))
    } else if common < canonical.len() {
        Some(Mismatch::EndOfGenerated)
    } else {
        None
    }
}

/// Offset form of [`first_mismatch`]: end-of-generated maps one past the last
/// significant generated byte.
pub fn first_mismatch_offset(
    generated: &SignificantStream,
    canonical: &SignificantStream,
) -> Option<usize> {
    first_mismatch(generated, canonical).map(|m| match m {
        Mismatch::At(o) => o,
        Mismatch::EndOfGenerated => generated.origins.last().map_or(0, |o| o + 1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalOutcome {
    /// Position in the pool's list of unique normalized solutions.
    pub canonical: usize,
    /// 1-based token index of the mismatch, `None` for a full match.
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationLabel {
    pub index: Option<usize>,
    pub matched: bool,
    pub per_canonical: Vec<CanonicalOutcome>,
}

impl HallucinationLabel {
    /// Total order in which a full match ranks above every index.
    pub fn rank(&self) -> usize {
        if self.matched {
            usize::MAX
        } else {
            self.index.unwrap_or(0)
        }
    }
}

/// The generated region of a record, normalized.
pub fn normalize_generated(record: &GenerationRecord) -> Result<NormalizedProgram, SyntaxError> {
    let prefix = record.prefix();
    let text = format!("{prefix}{}", record.generated_text());
    let tree = syntax::parse(&text, record.language)?;
    Ok(normalize::normalize_tree(&tree, (prefix.len(), text.len())))
}

/// Token index for a mismatch against one canonical.
fn attribute(record: &GenerationRecord, generated: &NormalizedProgram, m: Mismatch) -> usize {
    match m {
        Mismatch::EndOfGenerated => record.tokens.len(),
        Mismatch::At(b) => {
            let original = generated.original_offset(b);
            record.token_at(original).unwrap_or(record.tokens.len())
        }
    }
}

/// Compare a normalized generation against already-normalized canonicals.
pub fn localize_normalized(
    record: &GenerationRecord,
    generated: &NormalizedProgram,
    canonicals: &[NormalizedProgram],
) -> HallucinationLabel {
    let gen_stream = significant_stream(&generated.normalized, record.language);
    let per_canonical: Vec<CanonicalOutcome> = canonicals
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let canon_stream = significant_stream(&c.normalized, record.language);
            CanonicalOutcome {
                canonical: i,
                index: first_mismatch(&gen_stream, &canon_stream)
                    .map(|m| attribute(record, generated, m)),
            }
        })
        .collect();
    let matched = per_canonical.iter().any(|o| o.index.is_none());
    let index = if matched {
        None
    } else {
        per_canonical.iter().filter_map(|o| o.index).max()
    };
    HallucinationLabel {
        index,
        matched,
        per_canonical,
    }
}

/// Hallucination token index of `record` against `pool`: the largest
/// per-canonical mismatch index, or a match if any canonical agrees fully.
pub fn localize(
    record: &GenerationRecord,
    pool: &CanonicalPool,
) -> Result<HallucinationLabel, LocalizeError> {
    if pool.solutions.is_empty() {
        return Err(LocalizeError::EmptyPool(pool.problem_id.clone()));
    }
    if pool.language != record.language {
        return Err(LocalizeError::LanguageMismatch {
            record: record.id.clone(),
            problem: pool.problem_id.clone(),
            record_lang: record.language,
            pool_lang: pool.language,
        });
    }
    let generated = normalize_generated(record)?;
    let canonicals = pool.normalized(record.prefix());
    let label = localize_normalized(record, &generated, &canonicals);
    if !label.matched && !generated.collisions.is_empty() {
        log::info!(
            "record {}: pre-existing names {:?} may collide with normalized names",
            record.id,
            generated.collisions
        );
    }
    Ok(label)
}
