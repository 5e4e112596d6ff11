//! Structure-aware text views of a function for use in prompts.
//!
//! * [`flatten_ast`] linearizes the syntax tree, wrapping every non-leaf node
//!   in `<AST#kind#Left>` / `<AST#kind#Right>` markers.
//! * [`api_call_view`] narrates the call sequence in source order.
//! * [`data_flow_view`] narrates def-use relations, naming variable
//!   occurrences by their ordinal among same-named tokens ("the 2nd x") rather
//!   than by absolute token position.

use serde::Serialize;

use crate::dataflow::{self, DataFlowGraph};
use crate::parse::{AstNode, Span, SyntaxTree, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlattenedAst {
    pub text: String,
}

/// Flattened AST of the function definition.
pub fn flatten_ast(tree: &SyntaxTree) -> FlattenedAst {
    flatten_node(tree, tree.function())
}

/// Flattened AST of any subtree.
pub fn flatten_node(tree: &SyntaxTree, node: &AstNode) -> FlattenedAst {
    let mut parts: Vec<String> = Vec::new();
    push_flat(tree, node, &mut parts);
    FlattenedAst { text: parts.join(" ") }
}

fn push_flat(tree: &SyntaxTree, node: &AstNode, out: &mut Vec<String>) {
    if node.is_leaf() {
        if node.kind != "comment" && !node.span.is_empty() {
            let text = tree.text(node);
            if !text.trim().is_empty() {
                out.push(text.to_owned());
            }
        }
        return;
    }
    out.push(format!("<AST#{}#Left>", node.kind));
    for child in &node.children {
        push_flat(tree, child, out);
    }
    out.push(format!("<AST#{}#Right>", node.kind));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiCall {
    pub name: String,
    pub span: Span,
}

/// Every `call_expression` in the function, in source order. The name is the
/// callee expression text with whitespace removed (`memcpy`, `ctx->ops->read`).
pub fn api_calls(tree: &SyntaxTree) -> Vec<ApiCall> {
    tree.function()
        .preorder()
        .filter(|n| n.kind == "call_expression")
        .map(|call| {
            let callee = call.child_by_field("function").unwrap_or(call);
            ApiCall {
                name: tree.text(callee).split_whitespace().collect(),
                span: call.span,
            }
        })
        .collect()
}

pub fn api_call_view(tree: &SyntaxTree) -> String {
    let names: Vec<String> = api_calls(tree).into_iter().map(|c| c.name).collect();
    render_api_calls(&names)
}

pub fn render_api_calls(names: &[String]) -> String {
    match names {
        [] => "The program makes no calls.".to_owned(),
        [only] => format!("The program calls {only}."),
        [first, second] => format!("The program first calls {first}, then calls {second}."),
        [first, middle @ .., last] => {
            let mut s = format!("The program first calls {first}");
            for m in middle {
                s.push_str(&format!(", then calls {m}"));
            }
            s.push_str(&format!(", and finally calls {last}."));
            s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    ComesFrom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataFlowEdge {
    pub var: String,
    pub use_occurrence: usize,
    pub src_var: String,
    pub def_occurrence: usize,
    pub relation: Relation,
}

impl DataFlowEdge {
    pub fn render(&self) -> String {
        format!(
            "The {} {} comes from the {} {}",
            ordinal(self.use_occurrence),
            self.var,
            ordinal(self.def_occurrence),
            self.src_var
        )
    }
}

/// `1st`, `2nd`, `3rd`, `4th`, ..., `11th`, `12th`, `13th`, `21st`, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Data-flow edges and their rendering.
///
/// A read whose value is assigned to another variable is reported against the
/// assigned variable (`int b = a;` gives "the 1st b comes from the 1st a"),
/// any other read against itself (`return b;` gives "the 2nd b comes from the
/// 1st b"). The source occurrence is always the reaching definition.
pub fn data_flow_view(tree: &SyntaxTree, tokens: &[Token]) -> (Vec<DataFlowEdge>, String) {
    let graph = dataflow::analyze(tree);
    debug_assert_eq!(graph.tokens.len(), tokens.len());
    let edges = data_flow_edges(&graph, tokens);
    let text = render_data_flow(&edges);
    (edges, text)
}

pub fn data_flow_edges(graph: &DataFlowGraph, tokens: &[Token]) -> Vec<DataFlowEdge> {
    let mut edges: Vec<DataFlowEdge> = Vec::new();
    for du in &graph.def_uses {
        let target = du.sink_token.unwrap_or(du.use_token);
        let edge = DataFlowEdge {
            var: tokens[target].text.clone(),
            use_occurrence: tokens[target].occurrence_index_by_name,
            src_var: du.var.clone(),
            def_occurrence: tokens[du.def_token].occurrence_index_by_name,
            relation: Relation::ComesFrom,
        };
        // A loop-carried read of a variable from its own occurrence says nothing.
        if edge.var == edge.src_var && edge.use_occurrence == edge.def_occurrence {
            continue;
        }
        if !edges.contains(&edge) {
            edges.push(edge);
        }
    }
    edges
}

pub fn render_data_flow(edges: &[DataFlowEdge]) -> String {
    if edges.is_empty() {
        return "No data flow.".to_owned();
    }
    let parts: Vec<String> = edges.iter().map(DataFlowEdge::render).collect();
    format!("{}.", parts.join("; "))
}

/// Checks that `<AST#..#Left>` / `<AST#..#Right>` markers nest properly.
pub fn markers_balanced(flat: &str) -> bool {
    let mut stack: Vec<&str> = Vec::new();
    for piece in flat.split_whitespace() {
        let Some(inner) = piece.strip_prefix("<AST#").and_then(|p| p.strip_suffix('>')) else {
            continue;
        };
        if let Some(kind) = inner.strip_suffix("#Left") {
            stack.push(kind);
        } else if let Some(kind) = inner.strip_suffix("#Right") {
            if stack.pop() != Some(kind) {
                return false;
            }
        }
    }
    stack.is_empty()
}
