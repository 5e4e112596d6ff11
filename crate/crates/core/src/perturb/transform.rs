//! Semantic-preserving rewrites applied one site at a time.
//!
//! | kind            | rewrite                                                            |
//! |-----------------|--------------------------------------------------------------------|
//! | `CondNegate`    | `if (C) T else E` → `if (!(C)) E else T`; `if (C) T` → `if (!(C)) {} else T` |
//! | `CondExpand`    | `if (A && B) T` → `if (A) { if (B) T }`; `if (A \|\| B) T` → `if (A) T else if (B) T` |
//! | `LoopConvert`   | `for (I; C; S) B` → `{ I; while (C) { B S; } }`; `while (C) B` → `for (;C;) B` |
//! | `RelOpReverse`  | `x < y` → `y > x`, `x == y` → `y == x`, ...                        |
//!
//! Eligibility keeps every rewrite behavior-preserving:
//!
//! * `CondExpand` only fires on else-less ifs whose condition is a top-level
//!   `&&` or `||`; for `||` the duplicated body must not contain labels.
//! * `LoopConvert` skips `for` loops with a `continue` that belongs to them,
//!   since the step would no longer run.
//! * `RelOpReverse` requires both operands to be free of side effects.
//! * C++ conditions that declare a variable are never touched.
//! * Sites inside parse errors or preprocessor conditions are skipped.
//!
//! When a statement moves into a then-branch and ends with an else-less `if`,
//! it is wrapped in braces so a following `else` keeps its binding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::{parse_code, parse_function, AstNode, ParseError, SourceFunction, Span, SyntaxTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformKind {
    CondNegate,
    CondExpand,
    LoopConvert,
    RelOpReverse,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::CondNegate,
        TransformKind::CondExpand,
        TransformKind::LoopConvert,
        TransformKind::RelOpReverse,
    ];
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::CondNegate => "cond-negate",
            TransformKind::CondExpand => "cond-expand",
            TransformKind::LoopConvert => "loop-convert",
            TransformKind::RelOpReverse => "rel-op-reverse",
        })
    }
}

impl FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "condnegate" => Ok(TransformKind::CondNegate),
            "condexpand" => Ok(TransformKind::CondExpand),
            "loopconvert" => Ok(TransformKind::LoopConvert),
            "relopreverse" => Ok(TransformKind::RelOpReverse),
            _ => Err(format!(
                "unknown transformation {s:?} (expected cond-negate, cond-expand, loop-convert or rel-op-reverse)"
            )),
        }
    }
}

/// A position where a transformation applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Site {
    pub kind: TransformKind,
    pub index: usize,
    /// Span of the statement or expression that gets rewritten.
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformVariant {
    pub origin_id: String,
    pub kind: TransformKind,
    pub site_index: usize,
    pub code: String,
}

impl TransformVariant {
    /// The variant as a corpus record: the origin's metadata with the new
    /// code, a derived id, and `transform_kind` / `site_index` / `origin_id`.
    pub fn to_record(&self, origin: &SourceFunction) -> SourceFunction {
        let mut rec = origin.clone();
        rec.id = format!("{}#{}#{}", self.origin_id, self.kind, self.site_index);
        rec.code = self.code.clone();
        rec.extra.insert("transform_kind".into(), self.kind.to_string().into());
        rec.extra.insert("site_index".into(), self.site_index.into());
        rec.extra.insert("origin_id".into(), self.origin_id.clone().into());
        rec
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{kind} has {available} site(s); index {index} is out of range")]
    IneligibleSite {
        kind: TransformKind,
        index: usize,
        available: usize,
    },
    #[error("{kind} at site {index} produced code that no longer parses")]
    RewriteProducedParseError { kind: TransformKind, index: usize },
}

/// All positions where `kind` applies, in source order.
pub fn enumerate_sites(tree: &SyntaxTree, kind: TransformKind) -> Vec<Site> {
    eligible_nodes(tree, kind)
        .into_iter()
        .enumerate()
        .map(|(index, node)| Site { kind, index, span: node.span })
        .collect()
}

pub fn apply_transform(func: &SourceFunction, kind: TransformKind, site_index: usize) -> Result<TransformVariant, TransformError> {
    let tree = parse_function(func)?;
    let nodes = eligible_nodes(&tree, kind);
    let node = nodes.get(site_index).ok_or(TransformError::IneligibleSite {
        kind,
        index: site_index,
        available: nodes.len(),
    })?;
    build_variant(func, &tree, kind, site_index, node)
}

/// One variant per site for each requested kind: the fan-out is the sum of
/// the per-kind site counts.
pub fn generate_variants(func: &SourceFunction, kinds: &[TransformKind]) -> Result<Vec<TransformVariant>, TransformError> {
    let tree = parse_function(func)?;
    let mut out = Vec::new();
    for &kind in kinds {
        for (index, node) in eligible_nodes(&tree, kind).into_iter().enumerate() {
            out.push(build_variant(func, &tree, kind, index, node)?);
        }
    }
    Ok(out)
}

fn build_variant(
    func: &SourceFunction,
    tree: &SyntaxTree,
    kind: TransformKind,
    site_index: usize,
    node: &AstNode,
) -> Result<TransformVariant, TransformError> {
    let edits = rewrite(tree, kind, node);
    let code = apply_edits(tree.source(), edits);
    let reparsed = parse_code(&code, tree.language())
        .map_err(|_| TransformError::RewriteProducedParseError { kind, index: site_index })?;
    if reparsed.errors().len() > tree.errors().len() {
        return Err(TransformError::RewriteProducedParseError { kind, index: site_index });
    }
    Ok(TransformVariant {
        origin_id: func.id.clone(),
        kind,
        site_index,
        code,
    })
}

fn apply_edits(source: &str, mut edits: Vec<(Span, String)>) -> String {
    edits.sort_by_key(|(span, _)| span.start);
    let mut out = String::with_capacity(source.len() + 32);
    let mut cursor = 0;
    for (span, text) in edits {
        out.push_str(&source[cursor..span.start]);
        out.push_str(&text);
        cursor = span.end;
    }
    out.push_str(&source[cursor..]);
    out
}

fn eligible_nodes(tree: &SyntaxTree, kind: TransformKind) -> Vec<&AstNode> {
    let mut out = Vec::new();
    collect(tree, tree.function(), kind, &mut out);
    out
}

fn collect<'t>(tree: &SyntaxTree, node: &'t AstNode, kind: TransformKind, out: &mut Vec<&'t AstNode>) {
    if node.is_error() {
        return;
    }
    if is_eligible(tree, node, kind) {
        out.push(node);
    }
    let preproc_cond = matches!(node.kind, "preproc_if" | "preproc_elif");
    for child in &node.children {
        if preproc_cond && child.field == Some("condition") {
            continue;
        }
        collect(tree, child, kind, out);
    }
}

fn is_clean(node: &AstNode) -> bool {
    node.preorder().all(|n| !n.is_error() && !n.missing)
}

fn is_eligible(tree: &SyntaxTree, node: &AstNode, kind: TransformKind) -> bool {
    let matched = match kind {
        TransformKind::CondNegate => node.kind == "if_statement" && plain_condition(node).is_some() && node.child_by_field("consequence").is_some(),
        TransformKind::CondExpand => {
            node.kind == "if_statement"
                && node.child_by_field("alternative").is_none()
                && match (plain_condition(node), node.child_by_field("consequence")) {
                    (Some(cond), Some(body)) => match logical_op(tree, cond) {
                        Some(LogicalOp::And) => true,
                        Some(LogicalOp::Or) => !body.preorder().any(|n| matches!(n.kind, "labeled_statement" | "case_statement")),
                        None => false,
                    },
                    _ => false,
                }
        }
        TransformKind::LoopConvert => match node.kind {
            "for_statement" => {
                node.child_by_field("body").is_some_and(|b| !continues_loop(b))
                    && node.child_by_field("condition").is_none_or(|c| c.kind != "declaration")
            }
            "while_statement" => plain_condition(node).is_some() && node.child_by_field("body").is_some(),
            _ => false,
        },
        TransformKind::RelOpReverse => {
            node.kind == "binary_expression"
                && node
                    .child_by_field("operator")
                    .is_some_and(|op| reversed_relation(tree.text(op)).is_some())
                && node.child_by_field("left").is_some_and(|l| side_effect_free(tree, l))
                && node.child_by_field("right").is_some_and(|r| side_effect_free(tree, r))
        }
    };
    matched && is_clean(node)
}

/// The expression inside an if/while condition, unless the condition also
/// declares something or uses `if constexpr`.
fn plain_condition(stmt: &AstNode) -> Option<&AstNode> {
    if stmt.children.iter().any(|c| matches!(c.kind, "constexpr" | "consteval")) {
        return None;
    }
    let cond = stmt.child_by_field("condition")?;
    match cond.kind {
        "parenthesized_expression" => {
            let mut inner = cond.named_children();
            let first = inner.next()?;
            (inner.next().is_none() && first.kind != "comma_expression").then_some(first)
        }
        "condition_clause" => {
            if cond.child_by_field("initializer").is_some() {
                return None;
            }
            let value = cond.child_by_field("value")?;
            (value.kind != "declaration" && value.kind != "comma_expression").then_some(value)
        }
        _ => None,
    }
}

enum LogicalOp {
    And,
    Or,
}

fn logical_op(tree: &SyntaxTree, expr: &AstNode) -> Option<LogicalOp> {
    if expr.kind != "binary_expression" {
        return None;
    }
    match tree.text(expr.child_by_field("operator")?) {
        "&&" | "and" => Some(LogicalOp::And),
        "||" | "or" => Some(LogicalOp::Or),
        _ => None,
    }
}

/// Does `node` contain a `continue` that targets the enclosing loop?
fn continues_loop(node: &AstNode) -> bool {
    match node.kind {
        "continue_statement" => true,
        "for_statement" | "while_statement" | "do_statement" | "for_range_loop" | "lambda_expression" => false,
        _ => node.children.iter().any(continues_loop),
    }
}

fn reversed_relation(op: &str) -> Option<&'static str> {
    Some(match op {
        "<" => ">",
        "<=" => ">=",
        ">" => "<",
        ">=" => "<=",
        "==" => "==",
        "!=" => "!=",
        _ => return None,
    })
}

/// Reads of identifiers, literals, fields and array elements, combined with
/// arithmetic that binds tighter than any relational operator.
fn side_effect_free(tree: &SyntaxTree, node: &AstNode) -> bool {
    let all_named = |n: &AstNode| n.named_children().all(|c| side_effect_free(tree, c));
    match node.kind {
        "identifier" | "number_literal" | "char_literal" | "string_literal" | "concatenated_string" | "true"
        | "false" | "null" | "nullptr" | "this" | "field_identifier" | "sizeof_expression" | "alignof_expression" => true,
        "field_expression" => node.child_by_field("argument").is_some_and(|a| side_effect_free(tree, a)),
        "subscript_expression" | "subscript_argument_list" | "parenthesized_expression" => all_named(node),
        "unary_expression" => {
            node.child_by_field("operator").is_some_and(|op| matches!(tree.text(op), "-" | "+" | "!" | "~"))
                && node.child_by_field("argument").is_some_and(|a| side_effect_free(tree, a))
        }
        "pointer_expression" => node.child_by_field("argument").is_some_and(|a| side_effect_free(tree, a)),
        "cast_expression" => node.child_by_field("value").is_some_and(|v| side_effect_free(tree, v)),
        "binary_expression" => {
            node.child_by_field("operator")
                .is_some_and(|op| matches!(tree.text(op), "+" | "-" | "*" | "/" | "%" | "<<" | ">>"))
                && all_named(node)
        }
        _ => false,
    }
}

/// Whether a statement ends in an `if` without `else`, so that an `else`
/// placed right after it would bind to that inner `if`.
fn ends_with_open_if(node: &AstNode) -> bool {
    match node.kind {
        "if_statement" => match node.child_by_field("alternative") {
            None => true,
            Some(alt) => alt.named_children().last().is_some_and(ends_with_open_if),
        },
        "while_statement" | "for_statement" | "for_range_loop" => node.child_by_field("body").is_some_and(ends_with_open_if),
        "labeled_statement" => node.named_children().last().is_some_and(ends_with_open_if),
        _ => false,
    }
}

fn then_branch(tree: &SyntaxTree, stmt: &AstNode) -> String {
    let text = tree.text(stmt);
    if ends_with_open_if(stmt) {
        format!("{{ {text} }}")
    } else {
        text.to_owned()
    }
}

fn rewrite(tree: &SyntaxTree, kind: TransformKind, node: &AstNode) -> Vec<(Span, String)> {
    match kind {
        TransformKind::CondNegate => {
            let cond_node = node.child_by_field("condition").expect("eligible if has a condition");
            let inner = plain_condition(node).expect("eligible if has a plain condition");
            let then = node.child_by_field("consequence").expect("eligible if has a body");
            let negated = (cond_node.span, format!("(!({}))", tree.text(inner)));
            match node.child_by_field("alternative").and_then(|alt| alt.named_children().last()) {
                Some(other) => vec![
                    negated,
                    (then.span, then_branch(tree, other)),
                    (other.span, tree.text(then).to_owned()),
                ],
                None => vec![negated, (then.span, format!("{{}} else {}", tree.text(then)))],
            }
        }
        TransformKind::CondExpand => {
            let cond = plain_condition(node).expect("eligible if has a plain condition");
            let left = tree.text(cond.child_by_field("left").expect("binary has left"));
            let right = tree.text(cond.child_by_field("right").expect("binary has right"));
            let body = node.child_by_field("consequence").expect("eligible if has a body");
            let text = match logical_op(tree, cond) {
                Some(LogicalOp::And) => format!("if ({left}) {{ if ({right}) {} }}", tree.text(body)),
                _ => format!("if ({left}) {} else if ({right}) {}", then_branch(tree, body), tree.text(body)),
            };
            vec![(node.span, text)]
        }
        TransformKind::LoopConvert if node.kind == "while_statement" => {
            let cond_node = node.child_by_field("condition").expect("while has a condition");
            let inner = plain_condition(node).expect("eligible while has a plain condition");
            vec![(
                Span::new(node.span.start, cond_node.span.end),
                format!("for (;{};)", tree.text(inner)),
            )]
        }
        TransformKind::LoopConvert => {
            let init: String = node
                .children_by_field("initializer")
                .map(|i| {
                    let text = tree.text(i);
                    if i.kind == "declaration" {
                        format!("{text} ")
                    } else {
                        format!("{text}; ")
                    }
                })
                .collect();
            let cond = node.child_by_field("condition").map_or("1", |c| tree.text(c));
            let updates: Vec<&AstNode> = node.children_by_field("update").collect();
            let step = match (updates.first(), updates.last()) {
                (Some(first), Some(last)) => format!(" {};", tree.span_text(Span::new(first.span.start, last.span.end))),
                _ => String::new(),
            };
            let body = tree.text(node.child_by_field("body").expect("eligible for has a body"));
            vec![(node.span, format!("{{ {init}while ({cond}) {{ {body}{step} }} }}"))]
        }
        TransformKind::RelOpReverse => {
            let left = node.child_by_field("left").expect("binary has left");
            let right = node.child_by_field("right").expect("binary has right");
            let op = tree.text(node.child_by_field("operator").expect("binary has operator"));
            let reversed = reversed_relation(op).expect("eligible operator is relational");
            vec![(node.span, format!("{} {} {}", tree.text(right), reversed, tree.text(left)))]
        }
    }
}
