//! Alpha-renaming of user-defined identifiers.
//!
//! Every identifier with a definition site inside the analyzed region is
//! renamed to `v1`, `v2`, … in order of first definition. All identifier
//! leaves in the region carrying that exact name are rewritten, without
//! scope analysis. Names defined outside the region (e.g. parameters of a
//! prompt-provided signature) are left alone.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{CanonicalPool, Language};
use crate::localize::significant_stream;
use crate::syntax::{self, SyntaxTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizedProgram {
    /// The region text before renaming.
    pub original: String,
    pub normalized: String,
    /// `(original name, vK)` in assignment order.
    pub rename_table: Vec<(String, String)>,
    /// For each byte of `normalized`, the byte of `original` it derives from.
    pub offset_map: Vec<usize>,
    /// Pre-existing `v<digits>` names that were not renamed and may collide.
    pub collisions: Vec<String>,
}

impl NormalizedProgram {
    pub fn identity(text: &str) -> Self {
        Self {
            original: text.to_string(),
            normalized: text.to_string(),
            rename_table: Vec::new(),
            offset_map: (0..text.len()).collect(),
            collisions: Vec::new(),
        }
    }

    /// Map a byte of `normalized` back onto `original`. The end position maps to the end.
    pub fn original_offset(&self, normalized_offset: usize) -> usize {
        self.offset_map
            .get(normalized_offset)
            .copied()
            .unwrap_or(self.original.len())
    }
}

fn is_v_name(name: &str) -> bool {
    name.len() > 1 && name.starts_with('v') && name[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Normalize the `region` of `source` (a byte span; pass `(0, len)` for the whole text).
pub fn normalize_program(
    source: &str,
    language: Language,
    region: (usize, usize),
) -> NormalizedProgram {
    match syntax::parse(source, language) {
        Ok(tree) => normalize_tree(&tree, region),
        Err(e) => {
            log::error!("{e}; passing text through unnormalized");
            NormalizedProgram::identity(&source[region.0..region.1])
        }
    }
}

pub fn normalize_tree(tree: &SyntaxTree, region: (usize, usize)) -> NormalizedProgram {
    let source = tree.source();
    let original = &source[region.0..region.1];
    let defs = tree.collect_identifiers(region);
    let table: HashMap<&str, String> = defs
        .iter()
        .enumerate()
        .map(|(i, o)| (o.name.as_str(), format!("v{}", i + 1)))
        .collect();

    let mut normalized = String::with_capacity(original.len());
    let mut offset_map = Vec::with_capacity(original.len());
    let mut collisions: Vec<String> = Vec::new();
    let mut seen_collision = HashSet::new();
    let mut pos = region.0;
    for leaf in tree.identifier_leaves(region) {
        let name = &source[leaf.start..leaf.end];
        let Some(replacement) = table.get(name) else {
            if is_v_name(name) && seen_collision.insert(name.to_string()) {
                collisions.push(name.to_string());
            }
            continue;
        };
        normalized.push_str(&source[pos..leaf.start]);
        offset_map.extend((pos..leaf.start).map(|b| b - region.0));
        normalized.push_str(replacement);
        offset_map.extend(std::iter::repeat(leaf.start - region.0).take(replacement.len()));
        pos = leaf.end;
    }
    normalized.push_str(&source[pos..region.1]);
    offset_map.extend((pos..region.1).map(|b| b - region.0));

    if !collisions.is_empty() {
        log::debug!(
            "pre-existing names {collisions:?} may collide with normalized names"
        );
    }
    NormalizedProgram {
        original: original.to_string(),
        normalized,
        rename_table: defs
            .into_iter()
            .enumerate()
            .map(|(i, o)| (o.name, format!("v{}", i + 1)))
            .collect(),
        offset_map,
        collisions,
    }
}

/// Normalize each solution after `prefix` and keep one program per
/// significant-character stream, in first-appearance order.
pub fn dedup_solutions(
    solutions: &[String],
    language: Language,
    prefix: &str,
) -> Vec<NormalizedProgram> {
    let mut seen = HashSet::new();
    solutions
        .iter()
        .map(|s| {
            let text = format!("{prefix}{s}");
            normalize_program(&text, language, (prefix.len(), text.len()))
        })
        .filter(|p| seen.insert(significant_stream(&p.normalized, language).chars))
        .collect()
}

/// Unique normalized programs of a pool, each parsed on its own.
pub fn dedup_pool(pool: &CanonicalPool) -> Vec<NormalizedProgram> {
    pool.normalized("").as_ref().clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(src: &str, lang: Language) -> NormalizedProgram {
        normalize_program(src, lang, (0, src.len()))
    }

    #[test]
    fn running_example() {
        let p = norm("for a, b in zip(tup1, tup2):\n    pass\n", Language::Python);
        assert_eq!(p.normalized, "for v1, v2 in zip(tup1, tup2):\n    pass\n");
        assert_eq!(
            p.rename_table,
            vec![("a".into(), "v1".into()), ("b".into(), "v2".into())]
        );
        let again = norm(&p.normalized, Language::Python);
        assert_eq!(again.normalized, p.normalized);
    }

    #[test]
    fn generator_clause_in_region() {
        let prefix = "def f(tup1, tup2):\n    ";
        let body = "return all(x < y for x, y in zip(tup1, tup2))";
        let src = format!("{prefix}{body}");
        let p = normalize_program(&src, Language::Python, (prefix.len(), src.len()));
        assert_eq!(p.normalized, "return all(v1 < v2 for v1, v2 in zip(tup1, tup2))");
        // every byte of a replacement maps to the first byte of the original name
        let v1 = p.normalized.find("v1").unwrap();
        assert_eq!(p.offset_map[v1], body.find('x').unwrap());
        assert_eq!(p.offset_map[v1 + 1], body.find('x').unwrap());
    }

    #[test]
    fn simple_assignment() {
        assert_eq!(norm("x = 1", Language::Python).normalized, "v1 = 1");
        assert_eq!(norm("int x = 0;", Language::Java).normalized, "int v1 = 0;");
    }

    #[test]
    fn appendix_rows_normalize() {
        let py = [
            ("x = 1", "v1 = 1"),
            ("for x in nums:\n    pass\n", "for v1 in nums:\n    pass\n"),
            ("[x**2 for x in nums]", "[v1**2 for v1 in nums]"),
            ("with open(p) as fp:\n    fp.read()\n", "with open(p) as v1:\n    v1.read()\n"),
            (
                "try:\n    pass\nexcept Exception as e:\n    raise e\n",
                "try:\n    pass\nexcept Exception as v1:\n    raise v1\n",
            ),
            ("lambda x: x**2", "lambda v1: v1**2"),
            (
                "def add(x, y):\n    return x + y\n",
                "def v1(v2, v3):\n    return v2 + v3\n",
            ),
        ];
        for (src, want) in py {
            assert_eq!(norm(src, Language::Python).normalized, want, "{src}");
        }
        let java = [
            ("int x = 0;", "int v1 = 0;"),
            ("for (Integer i : nums) { s += i; }", "for (Integer v1 : nums) { s += v1; }"),
            (
                "nums.sort((a, b) -> b.compareTo(a));",
                "nums.sort((v1, v2) -> v2.compareTo(v1));",
            ),
            (
                "int add(int x, int y) { return x + y; }",
                "int v1(int v2, int v3) { return v2 + v3; }",
            ),
            (
                "Point(int x, int y) { this.x = x; }",
                "v1(int v2, int v3) { this.v2 = v2; }",
            ),
        ];
        for (src, want) in java {
            assert_eq!(norm(src, Language::Java).normalized, want, "{src}");
        }
    }

    #[test]
    fn offsets_outside_replacements_are_identity() {
        let src = "total = 0\nfor item in items:\n    total += item\n";
        let p = norm(src, Language::Python);
        let n = p.normalized.as_bytes();
        let o = src.as_bytes();
        let mut prev = 0;
        for (b, &m) in p.offset_map.iter().enumerate() {
            assert!(m >= prev);
            prev = m;
            if !(n[b] == b'v' || n[b].is_ascii_digit()) {
                assert_eq!(o[m], n[b]);
            }
        }
    }

    #[test]
    fn pre_existing_v_names_are_reported() {
        let p = norm("x = v1 + 1", Language::Python);
        assert_eq!(p.normalized, "v1 = v1 + 1");
        assert_eq!(p.collisions, vec!["v1".to_string()]);
    }

    #[test]
    fn comments_survive() {
        let p = norm("x = 1  # keep x\n", Language::Python);
        assert_eq!(p.normalized, "v1 = 1  # keep x\n");
    }

    #[test]
    fn dedup_examples() {
        let pool = CanonicalPool::new(
            "p",
            Language::Python,
            vec![
                "for a,b in zip(t,u):\n    pass\n".into(),
                "for x,y in zip(t,u):\n    pass\n".into(),
            ],
        );
        assert_eq!(dedup_pool(&pool).len(), 1);

        let pool = CanonicalPool::new("p", Language::Python, vec!["return 1".into(), "return 2".into()]);
        assert_eq!(dedup_pool(&pool).len(), 2);

        let pool = CanonicalPool::new(
            "p",
            Language::Java,
            vec!["return a+b;".into(), "return a + b ;".into(), "return  a+ b;".into()],
        );
        let out = dedup_pool(&pool);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].original, "return a+b;");
    }
}
