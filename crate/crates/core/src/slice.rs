//! Anchor-based bidirectional slicing under a token budget.
//!
//! Lines containing calls, array subscripts, pointer operations or arithmetic
//! are anchors. Starting from all anchors at once, a breadth-first walk over
//! the line dependence graph visits the lines each frontier line depends on
//! (backward) and the lines that depend on it (forward). Candidates are
//! admitted in `(depth, data before control, line)` order until the next one
//! would push the slice over budget.
//!
//! Admitting a line also admits the lines that keep the slice well formed:
//! the function header, the brace lines of every enclosing block, the other
//! lines of a statement that spans several lines, and enclosing `case` labels.
//! Comments are dropped from sliced code.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataflow;
use crate::lexer;
use crate::parse::{parse_function, AstNode, ParseError, SourceFunction, Span, SyntaxTree, Token, TokenOptions};

pub const DEFAULT_BUDGET: usize = 512;

/// Splits text into countable pieces.
pub trait TokenCounter: Send + Sync {
    fn pieces(&self, text: &str) -> Vec<Span>;

    fn count(&self, text: &str) -> usize {
        self.pieces(text).len()
    }

    /// Prefix of `text` ending after the `budget`-th piece.
    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        let pieces = self.pieces(text);
        match budget {
            0 => "",
            b if b >= pieces.len() => text,
            b => &text[..pieces[b - 1].end],
        }
    }
}

/// One piece per C token; comments and whitespace are free.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexCounter;

impl TokenCounter for LexCounter {
    fn pieces(&self, text: &str) -> Vec<Span> {
        lexer::lex(text)
    }
}

/// Rough stand-in for a subword tokenizer: each C token costs one piece per
/// `chars_per_piece` characters, rounded up.
#[derive(Debug, Clone, Copy)]
pub struct SubwordApprox {
    pub chars_per_piece: usize,
}

impl Default for SubwordApprox {
    fn default() -> Self {
        SubwordApprox { chars_per_piece: 4 }
    }
}

impl TokenCounter for SubwordApprox {
    fn pieces(&self, text: &str) -> Vec<Span> {
        let step = self.chars_per_piece.max(1);
        let mut out = Vec::new();
        for tok in lexer::lex(text) {
            let bounds: Vec<usize> = text[tok.start..tok.end]
                .char_indices()
                .map(|(i, _)| tok.start + i)
                .step_by(step)
                .skip(1)
                .chain(std::iter::once(tok.end))
                .collect();
            let mut start = tok.start;
            for end in bounds {
                out.push(Span::new(start, end));
                start = end;
            }
        }
        out
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataEdge {
    pub from: usize,
    pub to: usize,
    pub var: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ControlEdge {
    pub header: usize,
    pub line: usize,
}

/// Line-granular dependences. Line numbers are 1-based within the source.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDependenceGraph {
    pub nodes: BTreeSet<usize>,
    pub data_edges: BTreeSet<DataEdge>,
    pub control_edges: BTreeSet<ControlEdge>,
}

impl LineDependenceGraph {
    /// Lines that `line` depends on, data first.
    pub fn backward(&self, line: usize) -> Vec<(usize, bool)> {
        let data = self.data_edges.iter().filter(|e| e.to == line).map(|e| (e.from, true));
        let control = self.control_edges.iter().filter(|e| e.line == line).map(|e| (e.header, false));
        data.chain(control).collect()
    }

    /// Lines that depend on `line`, data first.
    pub fn forward(&self, line: usize) -> Vec<(usize, bool)> {
        let data = self.data_edges.iter().filter(|e| e.from == line).map(|e| (e.to, true));
        let control = self.control_edges.iter().filter(|e| e.header == line).map(|e| (e.line, false));
        data.chain(control).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceResult {
    pub anchor_lines: BTreeSet<usize>,
    pub selected_lines: BTreeSet<usize>,
    pub sliced_code: String,
    pub token_count: usize,
    pub budget: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SliceError {
    #[error("nothing fits in the token budget")]
    EmptySlice,
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Parse(#[from] ParseError),
}

fn is_arithmetic(op: &str) -> bool {
    matches!(op, "+" | "-" | "*" | "/" | "%")
}

/// Lines holding a call, a subscript, a unary `*` or `&`, a `->`, or a binary
/// `+ - * / %`. A node counts for the line it starts on.
pub fn detect_anchors(tree: &SyntaxTree) -> BTreeSet<usize> {
    let op_is = |node: &AstNode, pred: fn(&str) -> bool| node.child_by_field("operator").is_some_and(|op| pred(tree.text(op)));
    tree.function()
        .preorder()
        .filter(|n| match n.kind {
            "call_expression" | "subscript_expression" | "pointer_expression" => true,
            "field_expression" => op_is(n, |op| op == "->"),
            "binary_expression" => op_is(n, is_arithmetic),
            _ => false,
        })
        .map(|n| tree.line_of(n.span.start))
        .collect()
}

/// Source with comment bytes replaced by spaces; line breaks survive.
fn without_comments(tree: &SyntaxTree) -> String {
    let mut bytes = tree.source().as_bytes().to_vec();
    for node in tree.root().preorder().filter(|n| n.kind == "comment") {
        for b in &mut bytes[node.span.start..node.span.end] {
            if *b != b'\n' {
                *b = b' ';
            }
        }
    }
    // Only whole UTF-8 sequences inside comments were replaced.
    String::from_utf8(bytes).expect("blanking comments keeps UTF-8 valid")
}

/// Comment-free text of each source line, keyed by 1-based line number.
fn line_texts(tree: &SyntaxTree) -> Vec<String> {
    without_comments(tree)
        .split('\n')
        .map(|l| l.trim_end().to_owned())
        .collect()
}

fn function_lines(tree: &SyntaxTree) -> (usize, usize) {
    let f = tree.function();
    (tree.line_of(f.span.start), tree.line_of(f.span.end.saturating_sub(1).max(f.span.start)))
}

fn end_line(tree: &SyntaxTree, node: &AstNode) -> usize {
    tree.line_of(node.span.end.saturating_sub(1).max(node.span.start))
}

fn is_brace_only(text: &str) -> bool {
    text.split_whitespace().all(|w| w.chars().all(|c| c == '{' || c == '}') || w == "else")
}

fn control_header_line(tree: &SyntaxTree, stmt: &AstNode) -> usize {
    let anchor = stmt.child_by_field("condition").unwrap_or(stmt);
    tree.line_of(anchor.span.start)
}

fn control_bodies(stmt: &AstNode) -> Vec<&AstNode> {
    match stmt.kind {
        "if_statement" => stmt
            .children
            .iter()
            .filter(|c| matches!(c.field, Some("consequence") | Some("alternative")))
            .collect(),
        "while_statement" | "for_statement" | "for_range_loop" | "do_statement" | "switch_statement" => {
            stmt.child_by_field("body").into_iter().collect()
        }
        _ => Vec::new(),
    }
}

/// Data edges lift def-use pairs to lines; each line inside a control
/// statement's body gets one control edge from its nearest enclosing header.
pub fn build_ldg(tree: &SyntaxTree, tokens: &[Token]) -> LineDependenceGraph {
    let texts = line_texts(tree);
    let (first, last) = function_lines(tree);
    let nodes: BTreeSet<usize> = (first..=last)
        .filter(|&l| texts.get(l - 1).is_some_and(|t| !t.trim().is_empty()))
        .collect();

    let graph = dataflow::analyze(tree);
    debug_assert_eq!(graph.tokens.len(), tokens.len());
    let data_edges = graph
        .def_uses
        .iter()
        .filter_map(|du| {
            let from = tokens[du.def_token].line;
            let to = tokens[du.use_token].line;
            (from != to).then(|| DataEdge { from, to, var: du.var.clone() })
        })
        .collect();

    // Preorder visits outer statements first, so inner headers overwrite.
    let mut nearest: BTreeMap<usize, usize> = BTreeMap::new();
    for stmt in tree.function().preorder() {
        let bodies = control_bodies(stmt);
        if bodies.is_empty() {
            continue;
        }
        let header = control_header_line(tree, stmt);
        for body in bodies {
            for line in tree.line_of(body.span.start)..=end_line(tree, body) {
                if line != header && nodes.contains(&line) && !is_brace_only(&texts[line - 1]) {
                    nearest.insert(line, header);
                }
            }
        }
    }
    let control_edges = nearest.into_iter().map(|(line, header)| ControlEdge { header, line }).collect();

    LineDependenceGraph { nodes, data_edges, control_edges }
}

/// For every line, the other lines that must accompany it.
fn closures(tree: &SyntaxTree, nodes: &BTreeSet<usize>) -> HashMap<usize, BTreeSet<usize>> {
    let function = tree.function();
    let mut always: BTreeSet<usize> = BTreeSet::new();
    let start = tree.line_of(function.span.start);
    match function.child_by_field("body") {
        Some(body) => {
            always.extend(start..=tree.line_of(body.span.start));
            always.insert(end_line(tree, body));
        }
        None => always.extend(start..=end_line(tree, function)),
    }

    let mut blocks: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut units: HashMap<usize, (usize, usize)> = HashMap::new();
    for node in function.preorder() {
        let (lo, hi) = (tree.line_of(node.span.start), end_line(tree, node));
        match node.kind {
            "compound_statement" | "field_declaration_list" | "initializer_list" => {
                for line in lo..=hi {
                    blocks.entry(line).or_default().extend([lo, hi]);
                }
            }
            "case_statement" => {
                for line in lo..=hi {
                    blocks.entry(line).or_default().insert(lo);
                }
            }
            "if_statement" | "while_statement" | "for_statement" | "for_range_loop" | "switch_statement" => {
                let head_end = node
                    .child_by_field("condition")
                    .map_or(lo, |c| end_line(tree, c))
                    .max(lo);
                for line in lo..=head_end {
                    units.insert(line, (lo, head_end));
                }
            }
            "do_statement" => {
                if let Some(cond) = node.child_by_field("condition") {
                    let cl = tree.line_of(cond.span.start);
                    units.insert(hi, (cl.min(hi), hi));
                }
            }
            k if k == "declaration" || (k.ends_with("_statement") && k != "compound_statement" && k != "else_clause") => {
                for line in lo..=hi {
                    units.insert(line, (lo, hi));
                }
            }
            _ => {}
        }
    }

    nodes
        .iter()
        .map(|&line| {
            let mut set = always.clone();
            if let Some(extra) = blocks.get(&line) {
                set.extend(extra);
            }
            if let Some(&(lo, hi)) = units.get(&line) {
                set.extend(lo..=hi);
            }
            set.insert(line);
            set.retain(|l| nodes.contains(l));
            (line, set)
        })
        .collect()
}

fn render(texts: &[String], lines: &BTreeSet<usize>) -> String {
    lines.iter().map(|&l| texts[l - 1].as_str()).collect::<Vec<_>>().join("\n")
}

/// BFS admission order over the graph: `(depth, data before control, line)`.
pub fn admission_order(graph: &LineDependenceGraph, anchors: &BTreeSet<usize>) -> Vec<usize> {
    // line -> (depth, class); class 0 = reached over a data edge.
    let mut seen: BTreeMap<usize, (usize, u8)> = anchors.iter().map(|&a| (a, (0, 0))).collect();
    let mut frontier: Vec<usize> = anchors.iter().copied().collect();
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let mut next = Vec::new();
        for &line in &frontier {
            for (n, is_data) in graph.backward(line).into_iter().chain(graph.forward(line)) {
                let class = if is_data { 0 } else { 1 };
                match seen.get_mut(&n) {
                    None => {
                        seen.insert(n, (depth, class));
                        next.push(n);
                    }
                    Some(entry) if entry.0 == depth && class < entry.1 => entry.1 = class,
                    Some(_) => {}
                }
            }
        }
        next.sort_unstable();
        frontier = next;
    }
    let mut order: Vec<(usize, u8, usize)> = seen.into_iter().map(|(line, (d, c))| (d, c, line)).collect();
    order.sort_unstable();
    order.into_iter().map(|(_, _, line)| line).collect()
}

pub fn slice(
    tree: &SyntaxTree,
    graph: &LineDependenceGraph,
    anchors: &BTreeSet<usize>,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<SliceResult, SliceError> {
    if budget == 0 {
        return Err(SliceError::ZeroBudget);
    }
    let texts = line_texts(tree);
    let anchor_lines: BTreeSet<usize> = anchors.intersection(&graph.nodes).copied().collect();

    let whole = render(&texts, &graph.nodes);
    let whole_count = counter.count(&whole);
    if whole_count <= budget {
        return Ok(SliceResult {
            anchor_lines,
            selected_lines: graph.nodes.clone(),
            sliced_code: whole,
            token_count: whole_count,
            budget,
        });
    }

    let closure = closures(tree, &graph.nodes);
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    let mut token_count = 0;
    for line in admission_order(graph, &anchor_lines) {
        if selected.contains(&line) {
            continue;
        }
        let mut trial = selected.clone();
        trial.extend(&closure[&line]);
        let count = counter.count(&render(&texts, &trial));
        if count > budget {
            break;
        }
        selected = trial;
        token_count = count;
    }
    if selected.is_empty() {
        return Err(SliceError::EmptySlice);
    }
    Ok(SliceResult {
        anchor_lines,
        sliced_code: render(&texts, &selected),
        selected_lines: selected,
        token_count,
        budget,
    })
}

/// Parse, find anchors, build the graph and slice.
pub fn slice_function(func: &SourceFunction, budget: usize, counter: &dyn TokenCounter) -> Result<SliceResult, SliceError> {
    let tree = parse_function(func)?;
    let tokens = tree.tokens(TokenOptions::default());
    let graph = build_ldg(&tree, &tokens);
    let anchors = detect_anchors(&tree);
    slice(&tree, &graph, &anchors, budget, counter)
}
