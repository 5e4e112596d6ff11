//! Function records, syntax trees and token streams.
//!
//! Functions are parsed standalone with the tree-sitter C or C++ grammar. No
//! headers are read and no macros are expanded; identifiers that cannot be
//! resolved are plain names. The grammar tree is copied into an owned
//! [`AstNode`] tree so results can move freely between threads, while the
//! parser itself is created per call.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{OnceLock, RwLock};

use chrono::NaiveDate;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no function definition recognizable")]
    ParseFailure,
    #[error("invalid UTF-8 at byte {0}")]
    Encoding(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Language {
    #[default]
    #[serde(alias = "c")]
    C,
    #[serde(rename = "CPP", alias = "cpp", alias = "C++", alias = "c++")]
    Cpp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Vulnerable,
    NonVulnerable,
}

impl Label {
    pub fn is_vulnerable(self) -> bool {
        self == Label::Vulnerable
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Vulnerable => "Vulnerable",
            Label::NonVulnerable => "NonVulnerable",
        })
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Int(i64),
            Bool(bool),
        }
        match Raw::deserialize(d)? {
            Raw::Int(1) | Raw::Bool(true) => Ok(Label::Vulnerable),
            Raw::Int(0) | Raw::Bool(false) => Ok(Label::NonVulnerable),
            Raw::Int(n) => Err(de::Error::custom(format!("label must be 0 or 1, got {n}"))),
            Raw::Str(s) => {
                let norm: String = s
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .map(|c| c.to_ascii_lowercase())
                    .collect();
                match norm.as_str() {
                    "vulnerable" | "1" => Ok(Label::Vulnerable),
                    "nonvulnerable" | "0" => Ok(Label::NonVulnerable),
                    _ => Err(de::Error::custom(format!("unknown label {s:?}"))),
                }
            }
        }
    }
}

mod date_format {
    use super::*;

    pub fn serialize<S: Serializer>(date: &Option<NaiveDate>, s: S) -> Result<S::Ok, S::Error> {
        match date {
            Some(d) => s.serialize_str(&d.format("%Y-%m-%d").to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(s) if s.trim().is_empty() => Ok(None),
            Some(s) => {
                // Full timestamps are accepted; only the calendar date is kept.
                let day = s.trim().get(..10).unwrap_or(s.trim());
                NaiveDate::parse_from_str(day, "%Y-%m-%d")
                    .map(Some)
                    .map_err(|e| de::Error::custom(format!("invalid commit_date {s:?}: {e}")))
            }
        }
    }
}

/// One C/C++ function with its label and provenance.
///
/// Fields not known to this crate are kept in `extra` and written back out
/// unchanged, so pipelines can attach their own columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFunction {
    pub id: String,
    pub code: String,
    #[serde(default)]
    pub language: Language,
    #[serde(default)]
    pub project: String,
    #[serde(default)]
    pub commit_id: String,
    #[serde(
        default,
        with = "date_format",
        skip_serializing_if = "Option::is_none"
    )]
    pub commit_date: Option<NaiveDate>,
    #[serde(default)]
    pub cwe_ids: Vec<String>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SourceFunction {
    /// A record with empty metadata; mostly useful in tests and examples.
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: Label) -> Self {
        SourceFunction {
            id: id.into(),
            code: code.into(),
            language: Language::C,
            project: String::new(),
            commit_id: String::new(),
            commit_date: None,
            cwe_ids: Vec::new(),
            label,
            pair_id: None,
            extra: Map::new(),
        }
    }

    /// Grouping key: the first listed CWE, or `"NONE"`.
    pub fn primary_cwe(&self) -> &str {
        self.cwe_ids
            .first()
            .map(String::as_str)
            .filter(|s| !s.is_empty())
            .unwrap_or("NONE")
    }
}

/// Half-open byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, other: Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstNode {
    pub kind: &'static str,
    /// Grammar field under which the node hangs off its parent.
    pub field: Option<&'static str>,
    pub span: Span,
    pub named: bool,
    /// Zero-width token synthesized by error recovery.
    pub missing: bool,
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn is_error(&self) -> bool {
        self.kind == "ERROR"
    }

    pub fn child_by_field(&self, field: &str) -> Option<&AstNode> {
        self.children.iter().find(|c| c.field == Some(field))
    }

    pub fn children_by_field<'a>(&'a self, field: &'a str) -> impl Iterator<Item = &'a AstNode> + 'a {
        self.children.iter().filter(move |c| c.field == Some(field))
    }

    pub fn named_children(&self) -> impl Iterator<Item = &AstNode> {
        self.children.iter().filter(|c| c.named && c.kind != "comment")
    }

    /// Pre-order traversal, which is also span-start order.
    pub fn preorder(&self) -> Preorder<'_> {
        Preorder { stack: vec![self] }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &AstNode> {
        self.preorder().filter(|n| n.is_leaf())
    }

    /// Number of nodes in the subtree, the node included.
    pub fn size(&self) -> usize {
        self.preorder().count()
    }

    /// Same kinds and arity at every position.
    pub fn same_shape(&self, other: &AstNode) -> bool {
        self.kind == other.kind
            && self.children.len() == other.children.len()
            && self
                .children
                .iter()
                .zip(&other.children)
                .all(|(a, b)| a.same_shape(b))
    }
}

pub struct Preorder<'a> {
    stack: Vec<&'a AstNode>,
}

impl<'a> Iterator for Preorder<'a> {
    type Item = &'a AstNode;

    fn next(&mut self) -> Option<&'a AstNode> {
        let node = self.stack.pop()?;
        self.stack.extend(node.children.iter().rev());
        Some(node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub text: String,
    /// Grammar kind of the leaf the token came from.
    pub kind: &'static str,
    pub span: Span,
    pub line: usize,
    pub occurrence_index_by_name: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOptions {
    pub include_comments: bool,
}

// Literals are single tokens even though the grammar gives them internal
// structure.
const ATOMIC_KINDS: &[&str] = &[
    "string_literal",
    "char_literal",
    "raw_string_literal",
    "system_lib_string",
    "comment",
];

#[derive(Debug, Clone)]
pub struct SyntaxTree {
    source: String,
    language: Language,
    root: AstNode,
    errors: Vec<Span>,
    function_path: Option<Vec<usize>>,
    line_starts: Vec<usize>,
}

impl SyntaxTree {
    /// Parse arbitrary text. Never fails; syntax problems are listed in
    /// [`SyntaxTree::errors`].
    pub fn parse(source: &str, language: Language) -> SyntaxTree {
        let mut parser = tree_sitter::Parser::new();
        let grammar: tree_sitter::Language = match language {
            Language::C => tree_sitter_c::LANGUAGE.into(),
            Language::Cpp => tree_sitter_cpp::LANGUAGE.into(),
        };
        parser
            .set_language(&grammar)
            .expect("bundled grammar is ABI compatible");
        let ts_tree = parser
            .parse(source, None)
            .expect("parser has a language and no timeout");

        let mut converter = Converter::default();
        let mut root = converter.convert(ts_tree.root_node(), None);
        let errors = converter.errors;
        root.span = Span::new(0, source.len());
        let function_path = find_function(&root, &mut Vec::new());

        let mut line_starts = vec![0];
        line_starts.extend(source.match_indices('\n').map(|(i, _)| i + 1));

        SyntaxTree {
            source: source.to_owned(),
            language,
            root,
            errors,
            function_path,
            line_starts,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn root(&self) -> &AstNode {
        &self.root
    }

    /// The first `function_definition` in the text, if any.
    pub fn try_function(&self) -> Option<&AstNode> {
        let path = self.function_path.as_ref()?;
        let mut node = &self.root;
        for &i in path {
            node = &node.children[i];
        }
        Some(node)
    }

    /// The function definition. Trees built by [`parse_function`] always have one.
    pub fn function(&self) -> &AstNode {
        self.try_function()
            .expect("tree was produced by parse_function")
    }

    /// Spans of error and missing nodes.
    pub fn errors(&self) -> &[Span] {
        &self.errors
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty()
    }

    pub fn text(&self, node: &AstNode) -> &str {
        &self.source[node.span.start..node.span.end]
    }

    pub fn span_text(&self, span: Span) -> &str {
        &self.source[span.start..span.end]
    }

    /// 1-based line of a byte offset.
    pub fn line_of(&self, byte: usize) -> usize {
        self.line_starts.partition_point(|&s| s <= byte)
    }

    pub fn line_count(&self) -> usize {
        self.line_starts.len()
    }

    /// Source text of a 1-based line without its newline.
    pub fn line_text(&self, line: usize) -> &str {
        let start = self.line_starts[line - 1];
        let end = self
            .line_starts
            .get(line)
            .map(|&e| e - 1)
            .unwrap_or(self.source.len());
        self.source[start..end].trim_end_matches('\r')
    }

    pub fn tokens(&self, options: TokenOptions) -> Vec<Token> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut out = Vec::new();
        for leaf in self.root.leaves() {
            if leaf.span.is_empty() || (leaf.kind == "comment" && !options.include_comments) {
                continue;
            }
            let text = self.text(leaf);
            if text.trim().is_empty() {
                continue;
            }
            let count = seen.entry(text).or_insert(0);
            *count += 1;
            out.push(Token {
                text: text.to_owned(),
                kind: leaf.kind,
                span: leaf.span,
                line: self.line_of(leaf.span.start),
                occurrence_index_by_name: *count,
            });
        }
        out
    }
}

/// Grammar kind and field names are a small closed vocabulary; they are
/// leaked once so nodes can hold `&'static str`.
fn intern(name: &str) -> &'static str {
    static NAMES: OnceLock<RwLock<HashSet<&'static str>>> = OnceLock::new();
    let names = NAMES.get_or_init(Default::default);
    if let Some(&found) = names.read().expect("interner lock").get(name) {
        return found;
    }
    let mut write = names.write().expect("interner lock");
    if let Some(&found) = write.get(name) {
        return found;
    }
    let leaked: &'static str = Box::leak(name.to_owned().into_boxed_str());
    write.insert(leaked);
    leaked
}

#[derive(Default)]
struct Converter {
    kinds: HashMap<(u16, bool), &'static str>,
    fields: HashMap<u16, &'static str>,
    errors: Vec<Span>,
}

impl Converter {
    fn convert(&mut self, node: tree_sitter::Node<'_>, field: Option<&'static str>) -> AstNode {
        let span = Span::new(node.start_byte(), node.end_byte());
        if node.is_error() || node.is_missing() {
            self.errors.push(span);
        }
        let kind = *self
            .kinds
            .entry((node.kind_id(), node.is_error()))
            .or_insert_with(|| intern(node.kind()));
        let mut children = Vec::new();
        if !ATOMIC_KINDS.contains(&kind) {
            let mut cursor = node.walk();
            if cursor.goto_first_child() {
                loop {
                    let field = cursor.field_id().map(|id| {
                        let id = u16::from(id);
                        *self
                            .fields
                            .entry(id)
                            .or_insert_with(|| intern(cursor.field_name().unwrap_or_default()))
                    });
                    children.push(self.convert(cursor.node(), field));
                    if !cursor.goto_next_sibling() {
                        break;
                    }
                }
            }
        }
        AstNode {
            kind,
            field,
            span,
            named: node.is_named(),
            missing: node.is_missing(),
            children,
        }
    }
}

fn find_function(node: &AstNode, path: &mut Vec<usize>) -> Option<Vec<usize>> {
    if node.kind == "function_definition" {
        return Some(path.clone());
    }
    for (i, child) in node.children.iter().enumerate() {
        path.push(i);
        if let Some(found) = find_function(child, path) {
            return Some(found);
        }
        path.pop();
    }
    None
}

/// Parse raw function text in the given language.
pub fn parse_code(code: &str, language: Language) -> Result<SyntaxTree, ParseError> {
    if code.trim().is_empty() {
        return Err(ParseError::ParseFailure);
    }
    let tree = SyntaxTree::parse(code, language);
    if tree.function_path.is_none() {
        return Err(ParseError::ParseFailure);
    }
    Ok(tree)
}

/// Like [`parse_code`] for undecoded input.
pub fn parse_bytes(code: &[u8], language: Language) -> Result<SyntaxTree, ParseError> {
    let text = std::str::from_utf8(code).map_err(|e| ParseError::Encoding(e.valid_up_to()))?;
    parse_code(text, language)
}

pub fn parse_function(func: &SourceFunction) -> Result<SyntaxTree, ParseError> {
    parse_code(&func.code, func.language)
}

/// Token stream of a function with comments excluded.
pub fn tokenize(func: &SourceFunction) -> Result<Vec<Token>, ParseError> {
    Ok(parse_function(func)?.tokens(TokenOptions::default()))
}
