//! Synthetic data with known answers: a planted-rule generation corpus and a
//! template fuzzer producing programs with interchangeable identifier names.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{GenerationRecord, Language, LogProbStep, Task};

/// Python lines the planted corpus draws its tokens from, pre-split into tokens.
const LINES: &[&[&str]] = &[
    &["total", " =", " 0", "\n"],
    &["for", " item", " in", " items", ":", "\n"],
    &["    ", "total", " +=", " item", "\n"],
    &["if", " total", " >", " 10", ":", "\n"],
    &["    ", "return", " True", "\n"],
    &["result", " =", " [", "x", " *", " 2", " for", " x", " in", " items", "]", "\n"],
    &["count", " =", " len", "(", "items", ")", "\n"],
    &["return", " count", " -", " 1", "\n"],
    &["name", " =", " \"abc\"", "\n"],
    &["while", " count", " <", " 5", ":", "\n"],
    &["    ", "count", " +=", " 1", "\n"],
];

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub records: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Range of the top-1 probability at the gold position.
    pub gold_top1: (f64, f64),
    /// Range of the top-1 probability elsewhere.
    pub other_top1: (f64, f64),
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            records: 2000,
            min_tokens: 6,
            max_tokens: 40,
            gold_top1: (0.05, 0.3),
            other_top1: (0.45, 0.99),
            models: vec!["model-a".into(), "model-b".into()],
            datasets: vec!["mbpp".into(), "humaneval".into()],
            seed: 0,
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// A step whose largest probability is `top1`, chosen greedily.
fn step(token: &str, top1: f64, rng: &mut impl Rng) -> LogProbStep {
    let mut alternatives = Vec::new();
    let mut rest = 1.0 - top1;
    while rest > 1e-3 && alternatives.len() < 20 {
        let p = (top1 * (0.5 + 0.5 * rng.gen::<f64>())).min(rest);
        alternatives.push(p);
        rest -= p;
    }
    alternatives.sort_by(|a, b| b.total_cmp(a));
    let mut entries = vec![(token.to_string(), top1.ln())];
    entries.extend(
        alternatives
            .into_iter()
            .enumerate()
            .map(|(k, p)| (format!("<alt{k}>"), p.ln())),
    );
    LogProbStep::greedy(entries)
}

/// Records whose gold index is the position with the smallest top-1
/// probability. Gold positions draw from `gold_top1`, all others from
/// `other_top1`, so the rule is recoverable from the features alone.
pub fn planted_corpus(config: &PlantedConfig) -> Vec<GenerationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.records)
        .map(|n| {
            let target = rng.gen_range(config.min_tokens..=config.max_tokens);
            let mut tokens: Vec<String> = Vec::new();
            while tokens.len() + 1 < target {
                let line = LINES.choose(&mut rng).expect("non-empty");
                tokens.extend(line.iter().map(|t| t.to_string()));
            }
            tokens.truncate(target - 1);
            tokens.push(String::new());
            let len = tokens.len();
            let gold = rng.gen_range(1..=len);
            let steps = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let range = if i + 1 == gold { config.gold_top1 } else { config.other_top1 };
                    step(t, draw(&mut rng, range), &mut rng)
                })
                .collect();
            GenerationRecord {
                id: format!("planted-{n:05}"),
                task: Task::CG,
                dataset: config.datasets[n % config.datasets.len()].clone(),
                model: config.models[(n / config.datasets.len()) % config.models.len()].clone(),
                language: Language::Python,
                problem_id: format!("p{}", n % 50),
                context_prefix: None,
                tokens,
                is_eos: true,
                steps,
                error_message: Some("AssertionError".into()),
                gold_index: Some(gold),
            }
        })
        .collect()
}

/// A fragment of a template: literal text or a reference to a name slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Name(usize),
}

/// A program with user-defined names abstracted into numbered slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub language: Language,
    pub pieces: Vec<Piece>,
    pub slots: usize,
}

impl Template {
    pub fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Name(i) => out.push_str(&names[*i]),
            }
        }
        out
    }
}

const RESERVED: &[&str] = &[
    "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del", "elif",
    "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda",
    "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with", "yield", "abstract",
    "boolean", "byte", "case", "catch", "char", "const", "default", "do", "double", "enum",
    "extends", "final", "float", "goto", "implements", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "short", "static", "super",
    "switch", "synchronized", "this", "throw", "throws", "transient", "void", "volatile", "var",
    "record", "yield", "len", "range", "zip", "open", "print", "read", "sum", "max", "min",
    "apply", "size", "add", "get", "length", "out", "println", "System", "Math", "abs", "true",
    "false", "null", "none", "match", "type", "sealed", "permits", "when", "exports", "module",
];

/// `n` distinct identifiers that are neither reserved nor of the `v<digits>` form.
pub fn fresh_names(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(n);
    while names.len() < n {
        let len = rng.gen_range(1..=7);
        let mut s: String = (0..len)
            .map(|i| {
                let alphabet: &[u8] = if i == 0 {
                    b"abcdefghijklmnopqrstuwxyz_"
                } else {
                    b"abcdefghijklmnopqrstuvwxyz_0123456789"
                };
                *alphabet.choose(rng).expect("non-empty") as char
            })
            .collect();
        if rng.gen_bool(0.2) {
            s = s.to_uppercase();
        }
        if s == "_" || RESERVED.contains(&s.as_str()) || names.contains(&s) {
            continue;
        }
        names.push(s);
    }
    names
}

struct Builder {
    pieces: Vec<Piece>,
    slots: usize,
    /// Slots defined so far that hold a number (usable in expressions).
    numbers: Vec<usize>,
    /// Slots defined so far that hold a sequence.
    sequences: Vec<usize>,
}

impl Builder {
    fn text(&mut self, t: impl Into<String>) {
        self.pieces.push(Piece::Text(t.into()));
    }

    fn name(&mut self, slot: usize) {
        self.pieces.push(Piece::Name(slot));
    }

    fn new_slot(&mut self) -> usize {
        self.slots += 1;
        self.slots - 1
    }

    fn number(&mut self, rng: &mut impl Rng) {
        if !self.numbers.is_empty() && rng.gen_bool(0.7) {
            let s = *self.numbers.choose(rng).expect("non-empty");
            self.name(s);
        } else {
            self.text(rng.gen_range(0..100).to_string());
        }
    }

    fn expr(&mut self, rng: &mut impl Rng) {
        self.number(rng);
        if rng.gen_bool(0.5) {
            self.text([" + ", " - ", " * "].choose(rng).copied().expect("non-empty"));
            self.number(rng);
        }
    }

    fn sequence(&mut self, rng: &mut impl Rng) -> usize {
        *self.sequences.choose(rng).expect("a sequence parameter exists")
    }
}

/// A random well-formed program of the given language.
pub fn fuzz_template(language: Language, rng: &mut impl Rng) -> Template {
    let mut b = Builder {
        pieces: Vec::new(),
        slots: 0,
        numbers: Vec::new(),
        sequences: Vec::new(),
    };
    match language {
        Language::Python => python_program(&mut b, rng),
        Language::Java => java_program(&mut b, rng),
    }
    Template {
        language,
        pieces: b.pieces,
        slots: b.slots,
    }
}

fn python_program(b: &mut Builder, rng: &mut impl Rng) {
    let f = b.new_slot();
    let seq = b.new_slot();
    let n = b.new_slot();
    b.text("def ");
    b.name(f);
    b.text("(");
    b.name(seq);
    b.text(", ");
    b.name(n);
    b.text("):\n");
    b.sequences.push(seq);
    b.numbers.push(n);
    for _ in 0..rng.gen_range(2..7) {
        python_statement(b, rng, "    ", 0);
    }
    b.text("    return ");
    b.expr(rng);
    b.text("\n");
}

fn python_statement(b: &mut Builder, rng: &mut impl Rng, indent: &str, depth: usize) {
    let nested = format!("{indent}    ");
    let choice = if depth >= 2 { rng.gen_range(0..3) } else { rng.gen_range(0..10) };
    b.text(indent);
    match choice {
        0 => {
            let x = b.new_slot();
            b.name(x);
            b.text(" = ");
            b.expr(rng);
            b.text("\n");
            b.numbers.push(x);
        }
        1 if !b.numbers.is_empty() => {
            let x = *b.numbers.choose(rng).expect("non-empty");
            b.name(x);
            b.text(" += ");
            b.expr(rng);
            b.text("\n");
        }
        1 | 2 => {
            let x = b.new_slot();
            let y = b.new_slot();
            let s = b.sequence(rng);
            b.name(x);
            b.text(" = [");
            b.name(y);
            b.text(" * 2 for ");
            b.name(y);
            b.text(" in ");
            b.name(s);
            b.text("]\n");
            b.sequences.push(x);
        }
        3 => {
            let x = b.new_slot();
            let s = b.sequence(rng);
            b.text("for ");
            b.name(x);
            b.text(" in ");
            b.name(s);
            b.text(":\n");
            b.numbers.push(x);
            python_statement(b, rng, &nested, depth + 1);
        }
        4 => {
            let x = b.new_slot();
            let y = b.new_slot();
            let s = b.sequence(rng);
            b.text("for ");
            b.name(x);
            b.text(", ");
            b.name(y);
            b.text(" in zip(");
            b.name(s);
            b.text(", ");
            b.name(s);
            b.text("):\n");
            b.numbers.push(x);
            b.numbers.push(y);
            python_statement(b, rng, &nested, depth + 1);
        }
        5 => {
            b.text("if ");
            b.expr(rng);
            b.text([" > ", " < ", " == ", " >= "].choose(rng).copied().expect("non-empty"));
            b.expr(rng);
            b.text(":\n");
            python_statement(b, rng, &nested, depth + 1);
            if rng.gen_bool(0.5) {
                b.text(indent);
                b.text("else:\n");
                python_statement(b, rng, &nested, depth + 1);
            }
        }
        6 => {
            let g = b.new_slot();
            let p = b.new_slot();
            b.name(g);
            b.text(" = lambda ");
            b.name(p);
            b.text(": ");
            b.name(p);
            b.text(" ** 2\n");
        }
        7 => {
            let fp = b.new_slot();
            b.text("with open(\"data.txt\") as ");
            b.name(fp);
            b.text(":\n");
            b.text(&nested);
            b.name(fp);
            b.text(".read()\n");
        }
        8 => {
            let e = b.new_slot();
            b.text("try:\n");
            python_statement(b, rng, &nested, depth + 1);
            b.text(indent);
            b.text("except ValueError as ");
            b.name(e);
            b.text(":\n");
            b.text(&nested);
            b.text("raise ");
            b.name(e);
            b.text("\n");
        }
        _ => {
            b.text("print(len(");
            let s = b.sequence(rng);
            b.name(s);
            b.text("))\n");
        }
    }
}

fn java_program(b: &mut Builder, rng: &mut impl Rng) {
    let m = b.new_slot();
    let arr = b.new_slot();
    let n = b.new_slot();
    b.text("public class Solution {\n    public static int ");
    b.name(m);
    b.text("(int[] ");
    b.name(arr);
    b.text(", int ");
    b.name(n);
    b.text(") {\n");
    b.sequences.push(arr);
    b.numbers.push(n);
    for _ in 0..rng.gen_range(2..7) {
        java_statement(b, rng, "        ", 0);
    }
    b.text("        return ");
    b.expr(rng);
    b.text(";\n    }\n");
    if rng.gen_bool(0.5) {
        let h = b.new_slot();
        let p = b.new_slot();
        b.text("    private int ");
        b.name(h);
        b.text("(int ");
        b.name(p);
        b.text(") {\n        return ");
        b.name(p);
        b.text(" * 2;\n    }\n");
    }
    b.text("}\n");
}

fn java_statement(b: &mut Builder, rng: &mut impl Rng, indent: &str, depth: usize) {
    let nested = format!("{indent}    ");
    let choice = if depth >= 2 { rng.gen_range(0..2) } else { rng.gen_range(0..7) };
    b.text(indent);
    match choice {
        0 => {
            let x = b.new_slot();
            b.text("int ");
            b.name(x);
            b.text(" = ");
            b.expr(rng);
            b.text(";\n");
            b.numbers.push(x);
        }
        1 => {
            let x = *b.numbers.choose(rng).expect("a number parameter exists");
            b.name(x);
            b.text([" += ", " -= ", " = "].choose(rng).copied().expect("non-empty"));
            b.expr(rng);
            b.text(";\n");
        }
        2 => {
            let i = b.new_slot();
            b.text("for (int ");
            b.name(i);
            b.text(" = 0; ");
            b.name(i);
            b.text(" < ");
            b.expr(rng);
            b.text("; ");
            b.name(i);
            b.text("++) {\n");
            b.numbers.push(i);
            java_statement(b, rng, &nested, depth + 1);
            b.text(indent);
            b.text("}\n");
        }
        3 => {
            let x = b.new_slot();
            let s = b.sequence(rng);
            b.text("for (int ");
            b.name(x);
            b.text(" : ");
            b.name(s);
            b.text(") {\n");
            b.numbers.push(x);
            java_statement(b, rng, &nested, depth + 1);
            b.text(indent);
            b.text("}\n");
        }
        4 => {
            b.text("if (");
            b.expr(rng);
            b.text([" > ", " < ", " == ", " != "].choose(rng).copied().expect("non-empty"));
            b.expr(rng);
            b.text(") {\n");
            java_statement(b, rng, &nested, depth + 1);
            b.text(indent);
            b.text("}");
            if rng.gen_bool(0.5) {
                b.text(" else {\n");
                java_statement(b, rng, &nested, depth + 1);
                b.text(indent);
                b.text("}");
            }
            b.text("\n");
        }
        5 => {
            let f = b.new_slot();
            let p = b.new_slot();
            b.text("java.util.function.IntUnaryOperator ");
            b.name(f);
            b.text(" = ");
            b.name(p);
            b.text(" -> ");
            b.name(p);
            b.text(" + 1;\n");
        }
        _ => {
            let l = b.new_slot();
            let x = b.new_slot();
            let y = b.new_slot();
            b.text("java.util.List<Integer> ");
            b.name(l);
            b.text(" = new java.util.ArrayList<>();\n");
            b.text(indent);
            b.name(l);
            b.text(".sort((");
            b.name(x);
            b.text(", ");
            b.name(y);
            b.text(") -> ");
            b.name(y);
            b.text(".compareTo(");
            b.name(x);
            b.text("));\n");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::normalize_program;
    use crate::syntax;

    #[test]
    fn planted_gold_is_the_minimum_top1() {
        let config = PlantedConfig {
            records: 50,
            ..Default::default()
        };
        for r in planted_corpus(&config) {
            let v = crate::corpus::validate_record(&r);
            assert!(v.is_empty(), "{}: {v:?}", r.id);
            let top1: Vec<f64> = r.steps.iter().map(|s| s.chosen_logprob().unwrap().exp()).collect();
            let argmin = top1
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(Some(argmin + 1), r.gold_index);
            for s in &r.steps {
                let c = s.chosen_logprob().unwrap();
                assert!(s.entries.iter().all(|(_, lp)| *lp <= c + 1e-12));
            }
        }
    }

    #[test]
    fn fuzzed_programs_parse_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lang in [Language::Python, Language::Java] {
            for _ in 0..100 {
                let t = fuzz_template(lang, &mut rng);
                let names = fresh_names(t.slots, &mut rng);
                let src = t.render(&names);
                let tree = syntax::parse(&src, lang).unwrap();
                assert!(!tree.has_errors(), "{src}");
                let p = normalize_program(&src, lang, (0, src.len()));
                assert_eq!(p.rename_table.len(), t.slots, "{src}");
            }
        }
    }
}
