//! Concrete-syntax view of Python and Java code backed by tree-sitter.
//!
//! The rest of the toolkit only sees a flat list of leaves (byte span, node
//! kind, token type), the definition sites of user-defined identifiers, and
//! the per-byte token type. Parse errors never fail a parse; leaves under an
//! `ERROR` node are flagged and typed by character class instead.

use std::cell::RefCell;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tree_sitter::{Node, Parser, Tree};

use crate::corpus::{GenerationRecord, Language};
use crate::features::{self, TokenAnnotation};

#[derive(Debug, Error)]
pub enum SyntaxError {
    #[error("grammar configuration error for {language}: {message}")]
    Grammar { language: Language, message: String },
    #[error("record {id} cannot be annotated: {message}")]
    InvalidRecord { id: String, message: String },
}

/// Token categories. The declaration order is the one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenType {
    Keyword,
    Delimiter,
    Operator,
    Constant,
    Identifier,
    TypeIdentifier,
    Space,
    #[serde(rename = "EOS")]
    Eos,
}

impl TokenType {
    pub const COUNT: usize = 8;

    pub const ALL: [TokenType; Self::COUNT] = [
        TokenType::Keyword,
        TokenType::Delimiter,
        TokenType::Operator,
        TokenType::Constant,
        TokenType::Identifier,
        TokenType::TypeIdentifier,
        TokenType::Space,
        TokenType::Eos,
    ];

    pub fn one_hot_index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenType::Keyword => "Keyword",
            TokenType::Delimiter => "Delimiter",
            TokenType::Operator => "Operator",
            TokenType::Constant => "Constant",
            TokenType::Identifier => "Identifier",
            TokenType::TypeIdentifier => "TypeIdentifier",
            TokenType::Space => "Space",
            TokenType::Eos => "EOS",
        }
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic context applied to Java fragments that do not parse at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JavaWrapper {
    None,
    ClassBody,
    MethodBody,
}

impl JavaWrapper {
    fn affixes(self) -> (&'static str, &'static str) {
        match self {
            JavaWrapper::None => ("", ""),
            JavaWrapper::ClassBody => ("class __Wrapper__ {\n", "\n}\n"),
            JavaWrapper::MethodBody => ("class __Wrapper__ {\nvoid __wrapper__() {\n", "\n}\n}\n"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub start: usize,
    pub end: usize,
    pub kind: &'static str,
    pub is_named: bool,
    pub is_error: bool,
    pub token_type: TokenType,
}

/// A parsed program. All spans are byte offsets into `source`.
pub struct SyntaxTree {
    source: String,
    language: Language,
    tree: Tree,
    wrapper: JavaWrapper,
    /// Length of the wrapper prefix in the parsed text.
    shift: usize,
    leaves: Vec<Leaf>,
}

impl fmt::Debug for SyntaxTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntaxTree")
            .field("language", &self.language)
            .field("wrapper", &self.wrapper)
            .field("leaves", &self.leaves.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdentifierOccurrence {
    pub name: String,
    pub definition_span: (usize, usize),
    pub defining_node_type: String,
}

thread_local! {
    static PARSERS: RefCell<[Option<Parser>; 2]> = const { RefCell::new([None, None]) };
}

fn with_parser<T>(
    language: Language,
    f: impl FnOnce(&mut Parser) -> T,
) -> Result<T, SyntaxError> {
    PARSERS.with(|cell| {
        let mut parsers = cell.borrow_mut();
        let slot = &mut parsers[language as usize];
        if slot.is_none() {
            let grammar: tree_sitter::Language = match language {
                Language::Python => tree_sitter_python::LANGUAGE.into(),
                Language::Java => tree_sitter_java::LANGUAGE.into(),
            };
            let mut parser = Parser::new();
            parser
                .set_language(&grammar)
                .map_err(|e| SyntaxError::Grammar {
                    language,
                    message: e.to_string(),
                })?;
            *slot = Some(parser);
        }
        Ok(f(slot.as_mut().expect("parser initialised")))
    })
}

fn raw_parse(language: Language, text: &str) -> Result<Tree, SyntaxError> {
    with_parser(language, |p| p.parse(text, None))?.ok_or_else(|| SyntaxError::Grammar {
        language,
        message: "parser returned no tree".into(),
    })
}

fn error_count(node: Node) -> usize {
    if !node.has_error() {
        return 0;
    }
    let own = usize::from(node.is_error() || node.is_missing());
    let mut cursor = node.walk();
    own + node
        .children(&mut cursor)
        .map(error_count)
        .sum::<usize>()
}

/// Parse `source`. Java fragments whose top-level parse contains errors are
/// retried inside a class body and then a method body; the first wrapper
/// yielding an error-free tree wins, otherwise the one with fewest errors.
pub fn parse(source: &str, language: Language) -> Result<SyntaxTree, SyntaxError> {
    let tree = raw_parse(language, source)?;
    if language == Language::Python || !tree.root_node().has_error() {
        return Ok(SyntaxTree::build(source, language, tree, JavaWrapper::None));
    }
    let mut best = (error_count(tree.root_node()), JavaWrapper::None, tree);
    for wrapper in [JavaWrapper::ClassBody, JavaWrapper::MethodBody] {
        let tree = parse_wrapped(source, wrapper)?;
        let errors = error_count(tree.root_node());
        if errors < best.0 {
            best = (errors, wrapper, tree);
            if errors == 0 {
                break;
            }
        }
    }
    Ok(SyntaxTree::build(source, language, best.2, best.1))
}

fn parse_wrapped(source: &str, wrapper: JavaWrapper) -> Result<Tree, SyntaxError> {
    let (pre, post) = wrapper.affixes();
    raw_parse(Language::Java, &format!("{pre}{source}{post}"))
}

/// Parse Java text inside a specific wrapper, bypassing the retry ladder.
pub fn parse_java_with(source: &str, wrapper: JavaWrapper) -> Result<SyntaxTree, SyntaxError> {
    let tree = parse_wrapped(source, wrapper)?;
    Ok(SyntaxTree::build(source, Language::Java, tree, wrapper))
}

const PYTHON_CONSTANTS: &[&str] = &[
    "string",
    "string_start",
    "string_content",
    "string_end",
    "escape_sequence",
    "escape_interpolation",
    "concatenated_string",
    "integer",
    "float",
    "true",
    "false",
    "none",
    "ellipsis",
];

const JAVA_CONSTANTS: &[&str] = &[
    "decimal_integer_literal",
    "hex_integer_literal",
    "octal_integer_literal",
    "binary_integer_literal",
    "decimal_floating_point_literal",
    "hex_floating_point_literal",
    "character_literal",
    "string_literal",
    "text_block",
    "string_fragment",
    "escape_sequence",
    "null_literal",
    "true",
    "false",
];

const COMMENTS: &[&str] = &["comment", "line_comment", "block_comment"];

const PYTHON_RESERVED: &[&str] = &[
    "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del", "elif",
    "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda",
    "nonlocal", "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

const JAVA_RESERVED: &[&str] = &[
    "abstract", "assert", "break", "case", "catch", "class", "const", "continue", "default",
    "do", "else", "enum", "extends", "final", "finally", "for", "goto", "if", "implements",
    "import", "instanceof", "interface", "native", "new", "package", "private", "protected",
    "public", "return", "static", "strictfp", "super", "switch", "synchronized", "this",
    "throw", "throws", "transient", "try", "volatile", "while", "var", "yield", "record",
];

const JAVA_PRIMITIVES: &[&str] = &[
    "int", "long", "short", "byte", "char", "float", "double", "boolean", "void",
];

const OPERATOR_CHARS: &[u8] = b"+-*/%<>=!&|^~?@";

fn is_atomic_literal(language: Language, node: Node) -> bool {
    match language {
        Language::Python => {
            node.kind() == "string" && {
                let mut c = node.walk();
                let interpolated = node
                    .children(&mut c)
                    .any(|ch| ch.kind() == "interpolation");
                !interpolated
            }
        }
        Language::Java => matches!(
            node.kind(),
            "string_literal" | "text_block" | "character_literal"
        ),
    }
}

fn constant_kinds(language: Language) -> &'static [&'static str] {
    match language {
        Language::Python => PYTHON_CONSTANTS,
        Language::Java => JAVA_CONSTANTS,
    }
}

/// Character-class typing used for error-flagged leaves and uncovered bytes.
pub fn fallback_type(language: Language, text: &str) -> TokenType {
    let Some(first) = text.chars().next() else {
        return TokenType::Space;
    };
    if first.is_whitespace() {
        return TokenType::Space;
    }
    if first.is_alphabetic() || first == '_' {
        let word: String = text
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_')
            .collect();
        let (reserved, literals): (&[&str], &[&str]) = match language {
            Language::Python => (PYTHON_RESERVED, &["True", "False", "None"]),
            Language::Java => (JAVA_RESERVED, &["true", "false", "null"]),
        };
        return if literals.contains(&word.as_str()) {
            TokenType::Constant
        } else if reserved.contains(&word.as_str()) {
            TokenType::Keyword
        } else if language == Language::Java && JAVA_PRIMITIVES.contains(&word.as_str()) {
            TokenType::TypeIdentifier
        } else {
            TokenType::Identifier
        };
    }
    if first.is_ascii_digit() || matches!(first, '"' | '\'' | '`') {
        return TokenType::Constant;
    }
    if language == Language::Python && first == '#' {
        return TokenType::Constant;
    }
    if language == Language::Java && (text.starts_with("//") || text.starts_with("/*")) {
        return TokenType::Constant;
    }
    symbol_type(language, text)
}

fn symbol_type(language: Language, text: &str) -> TokenType {
    if text.starts_with("->") {
        return match language {
            Language::Java => TokenType::Operator,
            Language::Python => TokenType::Delimiter,
        };
    }
    if text.starts_with(":=") {
        return TokenType::Operator;
    }
    match text.as_bytes().first() {
        Some(b) if OPERATOR_CHARS.contains(b) => TokenType::Operator,
        _ => TokenType::Delimiter,
    }
}

/// The fixed node-kind → token-type table.
fn classify_leaf(language: Language, node: Node, text: &str) -> TokenType {
    let kind = node.kind();
    let parent = node.parent().map(|p| p.kind()).unwrap_or("");
    if kind == "identifier" {
        return TokenType::Identifier;
    }
    if kind == "type_identifier" {
        return TokenType::TypeIdentifier;
    }
    if language == Language::Java
        && (matches!(kind, "boolean_type" | "void_type")
            || matches!(parent, "integral_type" | "floating_point_type"))
    {
        return TokenType::TypeIdentifier;
    }
    if constant_kinds(language).contains(&kind) || COMMENTS.contains(&kind) {
        return TokenType::Constant;
    }
    let word = !text.is_empty()
        && text
            .chars()
            .next()
            .is_some_and(|c| c.is_alphabetic() || c == '_')
        && text.chars().all(|c| c.is_alphanumeric() || c == '_');
    if word {
        return TokenType::Keyword;
    }
    symbol_type(language, text)
}

impl SyntaxTree {
    fn build(source: &str, language: Language, tree: Tree, wrapper: JavaWrapper) -> Self {
        let shift = wrapper.affixes().0.len();
        let mut out = SyntaxTree {
            source: source.to_string(),
            language,
            tree,
            wrapper,
            shift,
            leaves: Vec::new(),
        };
        out.leaves = out.extract_leaves();
        out
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn wrapper(&self) -> JavaWrapper {
        self.wrapper
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn root(&self) -> Node<'_> {
        self.tree.root_node()
    }

    pub fn has_errors(&self) -> bool {
        self.leaves.iter().any(|l| l.is_error) || self.root().has_error()
    }

    /// Node span mapped back onto `source`; `None` when it lies in the wrapper.
    fn span_of(&self, node: Node) -> Option<(usize, usize)> {
        let start = node.start_byte().checked_sub(self.shift)?;
        let end = node.end_byte().checked_sub(self.shift)?;
        (end <= self.source.len()).then_some((start, end))
    }

    fn extract_leaves(&self) -> Vec<Leaf> {
        let mut raw = Vec::new();
        let parsed_text = {
            let (pre, post) = self.wrapper.affixes();
            format!("{pre}{}{post}", self.source)
        };
        self.walk_leaves(self.root(), &parsed_text, false, &mut raw);

        let len = self.source.len();
        let mut leaves: Vec<Leaf> = Vec::with_capacity(raw.len());
        for mut leaf in raw {
            // Rebase onto the fragment and clip away the wrapper.
            let start = leaf.start.saturating_sub(self.shift).min(len);
            let end = leaf.end.saturating_sub(self.shift).min(len);
            let start = start.max(leaves.last().map_or(0, |l: &Leaf| l.end));
            if start >= end {
                continue;
            }
            leaf.start = start;
            leaf.end = end;
            leaves.push(leaf);
        }
        self.fill_gaps(leaves)
    }

    fn walk_leaves(&self, node: Node, text: &str, in_error: bool, out: &mut Vec<Leaf>) {
        if node.is_missing() {
            return;
        }
        let in_error = in_error || node.is_error();
        let (start, end) = (node.start_byte(), node.end_byte());
        let atomic = is_atomic_literal(self.language, node);
        if atomic || node.child_count() == 0 {
            if start < end {
                let slice = &text[start..end];
                let token_type = if in_error {
                    fallback_type(self.language, slice)
                } else if atomic {
                    TokenType::Constant
                } else {
                    classify_leaf(self.language, node, slice)
                };
                out.push(Leaf {
                    start,
                    end,
                    kind: node.kind(),
                    is_named: node.is_named(),
                    is_error: in_error,
                    token_type,
                });
            }
            return;
        }
        let mut cursor = node.walk();
        for child in node.children(&mut cursor) {
            self.walk_leaves(child, text, in_error, out);
        }
    }

    /// Cover every non-whitespace byte: uncovered runs become synthetic
    /// leaves typed by their enclosing node.
    fn fill_gaps(&self, leaves: Vec<Leaf>) -> Vec<Leaf> {
        let bytes = self.source.as_bytes();
        let mut out = Vec::with_capacity(leaves.len());
        let mut pos = 0;
        let push_gap = |out: &mut Vec<Leaf>, from: usize, to: usize| {
            let mut i = from;
            while i < to {
                if bytes[i].is_ascii_whitespace() {
                    i += 1;
                    continue;
                }
                let s = i;
                while i < to && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.push(self.gap_leaf(s, i));
            }
        };
        for leaf in leaves {
            push_gap(&mut out, pos, leaf.start);
            pos = leaf.end;
            out.push(leaf);
        }
        push_gap(&mut out, pos, bytes.len());
        out
    }

    fn gap_leaf(&self, start: usize, end: usize) -> Leaf {
        let node = self
            .root()
            .descendant_for_byte_range(start + self.shift, end + self.shift)
            .unwrap_or_else(|| self.root());
        let mut is_error = false;
        let mut cur = Some(node);
        while let Some(n) = cur {
            is_error |= n.is_error();
            cur = n.parent();
        }
        let text = &self.source[start..end];
        let token_type = if !is_error && constant_kinds(self.language).contains(&node.kind()) {
            TokenType::Constant
        } else {
            fallback_type(self.language, text)
        };
        Leaf {
            start,
            end,
            kind: node.kind(),
            is_named: false,
            is_error,
            token_type,
        }
    }

    /// Leaf covering `offset`, if any.
    pub fn leaf_at(&self, offset: usize) -> Option<&Leaf> {
        let idx = self.leaves.partition_point(|l| l.end <= offset);
        self.leaves.get(idx).filter(|l| l.start <= offset)
    }

    /// Token type of the byte at `offset`. Total: whitespace is `Space`,
    /// anything else resolves through its leaf or the character-class table.
    pub fn classify_offset(&self, offset: usize) -> TokenType {
        let bytes = self.source.as_bytes();
        match bytes.get(offset) {
            None => TokenType::Space,
            Some(b) if b.is_ascii_whitespace() => TokenType::Space,
            Some(_) => match self.leaf_at(offset) {
                Some(leaf) => leaf.token_type,
                None => {
                    let mut start = offset;
                    while !self.source.is_char_boundary(start) {
                        start -= 1;
                    }
                    fallback_type(self.language, &self.source[start..])
                }
            },
        }
    }

    /// Definition-site identifiers inside `region`, one per distinct name,
    /// in order of their first definition.
    pub fn collect_identifiers(&self, region: (usize, usize)) -> Vec<IdentifierOccurrence> {
        let mut sites: Vec<(Node, &'static str)> = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            definition_sites(self.language, node, &mut sites);
            let mut cursor = node.walk();
            stack.extend(node.named_children(&mut cursor));
        }
        let mut found: Vec<IdentifierOccurrence> = sites
            .into_iter()
            .filter(|(n, _)| n.kind() == "identifier")
            .filter_map(|(n, def)| {
                let span = self.span_of(n)?;
                (span.0 >= region.0 && span.1 <= region.1 && span.0 < span.1).then(|| {
                    IdentifierOccurrence {
                        name: self.source[span.0..span.1].to_string(),
                        definition_span: span,
                        defining_node_type: def.to_string(),
                    }
                })
            })
            .collect();
        found.sort_by_key(|o| o.definition_span);
        let mut seen = std::collections::HashSet::new();
        found.retain(|o| seen.insert(o.name.clone()));
        found
    }

    /// Spans of every `identifier` leaf inside `region`.
    pub fn identifier_leaves(&self, region: (usize, usize)) -> impl Iterator<Item = &Leaf> {
        self.leaves.iter().filter(move |l| {
            l.kind == "identifier" && !l.is_error && l.start >= region.0 && l.end <= region.1
        })
    }
}

fn definition_sites<'t>(language: Language, node: Node<'t>, out: &mut Vec<(Node<'t>, &'static str)>) {
    let kind = node.kind();
    match language {
        Language::Python => match kind {
            "assignment" | "for_statement" | "for_in_clause" => {
                if let Some(left) = node.child_by_field_name("left") {
                    python_targets(left, kind, out);
                }
            }
            "with_statement" => {
                let mut stack = vec![node];
                while let Some(n) = stack.pop() {
                    if n.kind() == "as_pattern_target" {
                        python_targets(n, kind, out);
                        continue;
                    }
                    if n.kind() == "block" {
                        continue;
                    }
                    let mut c = n.walk();
                    stack.extend(n.named_children(&mut c));
                }
            }
            "except_clause" => {
                let mut c = node.walk();
                let children: Vec<Node> = node.children(&mut c).collect();
                for (i, child) in children.iter().enumerate() {
                    match child.kind() {
                        "as_pattern" => {
                            let mut c2 = child.walk();
                            for t in child.named_children(&mut c2) {
                                if t.kind() == "as_pattern_target" {
                                    python_targets(t, kind, out);
                                }
                            }
                        }
                        "identifier" if i > 0 && children[i - 1].kind() == "as" => {
                            out.push((*child, kind));
                        }
                        _ => {}
                    }
                }
            }
            "lambda" => {
                if let Some(params) = node.child_by_field_name("parameters") {
                    python_params(params, kind, out);
                }
            }
            "function_definition" => {
                if let Some(name) = node.child_by_field_name("name") {
                    out.push((name, kind));
                }
                if let Some(params) = node.child_by_field_name("parameters") {
                    python_params(params, kind, out);
                }
            }
            _ => {}
        },
        Language::Java => match kind {
            "variable_declarator" | "enhanced_for_statement" => {
                if let Some(name) = node.child_by_field_name("name") {
                    out.push((name, kind));
                }
            }
            "lambda_expression" => {
                if let Some(params) = node.child_by_field_name("parameters") {
                    match params.kind() {
                        "identifier" => out.push((params, kind)),
                        _ => java_params(params, kind, out),
                    }
                }
            }
            "method_declaration" | "constructor_declaration" => {
                if let Some(name) = node.child_by_field_name("name") {
                    out.push((name, kind));
                }
                if let Some(params) = node.child_by_field_name("parameters") {
                    java_params(params, kind, out);
                }
            }
            _ => {}
        },
    }
}

fn python_targets<'t>(node: Node<'t>, def: &'static str, out: &mut Vec<(Node<'t>, &'static str)>) {
    match node.kind() {
        "identifier" => out.push((node, def)),
        "pattern_list" | "tuple_pattern" | "list_pattern" | "tuple" | "list"
        | "expression_list" | "parenthesized_expression" | "list_splat_pattern"
        | "as_pattern_target" | "pattern" => {
            let mut c = node.walk();
            for child in node.named_children(&mut c) {
                python_targets(child, def, out);
            }
        }
        _ => {}
    }
}

fn python_params<'t>(node: Node<'t>, def: &'static str, out: &mut Vec<(Node<'t>, &'static str)>) {
    let mut c = node.walk();
    for p in node.named_children(&mut c) {
        match p.kind() {
            "identifier" => out.push((p, def)),
            "default_parameter" | "typed_default_parameter" => {
                if let Some(name) = p.child_by_field_name("name") {
                    out.push((name, def));
                }
            }
            "typed_parameter" | "list_splat_pattern" | "dictionary_splat_pattern" => {
                let first = p.named_child(0);
                match first {
                    Some(inner) if inner.kind() == "identifier" => out.push((inner, def)),
                    Some(_) => python_params(p, def, out),
                    None => {}
                }
            }
            "tuple_pattern" => python_targets(p, def, out),
            _ => {}
        }
    }
}

fn java_params<'t>(node: Node<'t>, def: &'static str, out: &mut Vec<(Node<'t>, &'static str)>) {
    let mut c = node.walk();
    for p in node.named_children(&mut c) {
        match p.kind() {
            "identifier" => out.push((p, def)),
            "formal_parameter" => {
                if let Some(name) = p.child_by_field_name("name") {
                    out.push((name, def));
                }
            }
            // spread parameters hold a variable_declarator, collected on its own
            _ => {}
        }
    }
}

/// Type every LLM token of `record`: the classification of its first
/// non-whitespace byte, `Space` for all-whitespace tokens, `EOS` for the
/// sentinel.
pub fn annotate_tokens(record: &GenerationRecord) -> Result<Vec<TokenAnnotation>, SyntaxError> {
    let prefix = record.prefix();
    let text = format!("{prefix}{}", record.generated_text());
    let tree = parse(&text, record.language)?;
    annotate_with_tree(record, &tree, prefix.len())
}

pub fn annotate_with_tree(
    record: &GenerationRecord,
    tree: &SyntaxTree,
    prefix_len: usize,
) -> Result<Vec<TokenAnnotation>, SyntaxError> {
    if record.steps.len() != record.tokens.len() {
        return Err(SyntaxError::InvalidRecord {
            id: record.id.clone(),
            message: "steps and tokens differ in length".into(),
        });
    }
    let spans = record.token_spans();
    record
        .tokens
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let index = i + 1;
            let token_type = if record.is_eos_token(index) {
                TokenType::Eos
            } else {
                match token.bytes().position(|b| !b.is_ascii_whitespace()) {
                    None => TokenType::Space,
                    Some(p) => tree.classify_offset(prefix_len + spans[i].0 + p),
                }
            };
            let step = &record.steps[i];
            let invalid = |message: String| SyntaxError::InvalidRecord {
                id: record.id.clone(),
                message,
            };
            let chosen_lp = step
                .chosen_logprob()
                .ok_or_else(|| invalid(format!("step {index} has no chosen logprob")))?;
            let entropy = features::step_entropy(step)
                .map_err(|e| invalid(format!("step {index}: {e}")))?;
            Ok(TokenAnnotation {
                token_index: index,
                span: spans[i],
                token_type,
                chosen_prob: chosen_lp.exp(),
                entropy,
            })
        })
        .collect()
}
