//! Intra-procedural reaching definitions over the syntax tree.
//!
//! The analysis walks statements in execution order with a map from variable
//! name to the set of definition sites that may reach the current point.
//! Branches are analysed separately and joined by union; loops are iterated
//! until the loop-head state stops growing. Break, continue, return and
//! forward `goto` are modelled; backward `goto` is not.
//!
//! Variables are plain identifiers. Arrays, fields and pointer targets are
//! approximated by their base identifier, and a write through one of those
//! (`a[i] = x`, `p->n = x`) adds a definition of the base without removing
//! earlier ones. There is no alias analysis.
//!
//! Sites are indices into the token stream returned by
//! [`SyntaxTree::tokens`](crate::SyntaxTree::tokens) with default options.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::parse::{AstNode, SyntaxTree, Token, TokenOptions};

/// A definition site of a variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Definition {
    pub var: String,
    pub token: usize,
    /// Strong definitions overwrite the variable; weak ones (writes through
    /// subscripts, fields or dereferences) only add to it.
    pub strong: bool,
}

/// A definition reaching a use.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DefUse {
    pub use_token: usize,
    pub def_token: usize,
    pub var: String,
    /// When the use feeds the right-hand side of an assignment or
    /// initialization, the token of the variable being assigned.
    pub sink_token: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DataFlowGraph {
    pub tokens: Vec<Token>,
    pub definitions: Vec<Definition>,
    /// Ordered by use position, then definition position.
    pub def_uses: Vec<DefUse>,
    /// Every token index analysed as a variable read.
    pub uses: BTreeSet<usize>,
}

type Reach = BTreeMap<String, BTreeSet<usize>>;
/// `None` means the program point is unreachable.
type Env = Option<Reach>;

fn join(a: Env, b: Env) -> Env {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(mut a), Some(b)) => {
            for (var, defs) in b {
                a.entry(var).or_default().extend(defs);
            }
            Some(a)
        }
    }
}

pub fn analyze(tree: &SyntaxTree) -> DataFlowGraph {
    let tokens = tree.tokens(TokenOptions::default());
    let tok_at: HashMap<usize, usize> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.span.start, i))
        .collect();
    let function = tree.function();

    let mut analyzer = Analyzer {
        tree,
        tok_at,
        declared: HashSet::new(),
        defs: BTreeMap::new(),
        edges: BTreeSet::new(),
        uses: BTreeSet::new(),
        breaks: Vec::new(),
        continues: Vec::new(),
        labels: HashMap::new(),
    };

    let params = parameter_names(function);
    for ident in &params {
        analyzer.declared.insert(tree.text(ident).to_owned());
    }
    if let Some(body) = function.child_by_field("body") {
        collect_local_names(tree, body, &mut analyzer.declared);
    }

    let mut env: Env = Some(Reach::new());
    for ident in &params {
        env = analyzer.define(ident, env, true);
    }
    if let Some(body) = function.child_by_field("body") {
        analyzer.stmt(body, env);
    }

    let definitions = analyzer
        .defs
        .iter()
        .map(|(&token, &strong)| Definition {
            var: tokens[token].text.clone(),
            token,
            strong,
        })
        .collect();
    let def_uses = analyzer.edges.into_iter().collect();
    DataFlowGraph {
        uses: analyzer.uses,
        tokens,
        definitions,
        def_uses,
    }
}

struct Analyzer<'t> {
    tree: &'t SyntaxTree,
    tok_at: HashMap<usize, usize>,
    declared: HashSet<String>,
    defs: BTreeMap<usize, bool>,
    edges: BTreeSet<DefUse>,
    uses: BTreeSet<usize>,
    breaks: Vec<Env>,
    continues: Vec<Env>,
    labels: HashMap<String, Env>,
}

impl Analyzer<'_> {
    fn token(&self, ident: &AstNode) -> Option<usize> {
        self.tok_at.get(&ident.span.start).copied()
    }

    fn read(&mut self, ident: &AstNode, env: &Env, sink: Option<usize>) {
        let (Some(tok), Some(reach)) = (self.token(ident), env.as_ref()) else {
            return;
        };
        self.uses.insert(tok);
        let var = self.tree.text(ident);
        if let Some(defs) = reach.get(var) {
            for &def in defs {
                self.edges.insert(DefUse {
                    use_token: tok,
                    def_token: def,
                    var: var.to_owned(),
                    sink_token: sink,
                });
            }
        }
    }

    fn define(&mut self, ident: &AstNode, env: Env, strong: bool) -> Env {
        let tok = self.token(ident)?;
        let mut reach = env?;
        let entry = self.defs.entry(tok).or_insert(strong);
        *entry |= strong;
        let set = reach.entry(self.tree.text(ident).to_owned()).or_default();
        if strong {
            set.clear();
        }
        set.insert(tok);
        Some(reach)
    }

    fn stmt(&mut self, node: &AstNode, env: Env) -> Env {
        match node.kind {
            "compound_statement" | "else_clause" | "translation_unit" | "ERROR" | "try_statement"
            | "catch_clause" | "seh_try_statement" | "seh_except_clause" | "seh_finally_clause" => {
                let mut env = env;
                for child in node.named_children() {
                    if child.field == Some("parameters") {
                        continue;
                    }
                    env = self.stmt(child, env);
                }
                env
            }
            k if k.starts_with("preproc_") => {
                let mut env = env;
                for child in node.named_children() {
                    if matches!(child.field, Some("name") | Some("condition") | Some("parameters") | Some("value")) {
                        continue;
                    }
                    env = self.stmt(child, env);
                }
                env
            }
            "function_definition" => match node.child_by_field("body") {
                Some(body) => self.stmt(body, env),
                None => env,
            },
            "declaration" => self.declaration(node, env),
            "expression_statement" => {
                let mut env = env;
                for child in node.named_children() {
                    env = self.eval(child, env, None);
                }
                env
            }
            "return_statement" | "throw_statement" | "co_return_statement" => {
                let mut env = env;
                for child in node.named_children() {
                    env = self.eval(child, env, None);
                }
                None
            }
            "if_statement" => {
                let mut env = env;
                if let Some(cond) = node.child_by_field("condition") {
                    env = self.eval(cond, env, None);
                }
                let then = match node.child_by_field("consequence") {
                    Some(c) => self.stmt(c, env.clone()),
                    None => env.clone(),
                };
                let other = match node.child_by_field("alternative") {
                    Some(a) => self.stmt(a, env),
                    None => env,
                };
                join(then, other)
            }
            "while_statement" => {
                let cond = node.child_by_field("condition");
                match node.child_by_field("body") {
                    Some(body) => self.run_loop(env, cond, body, &[], false),
                    None => env,
                }
            }
            "do_statement" => {
                let cond = node.child_by_field("condition");
                match node.child_by_field("body") {
                    Some(body) => self.run_loop(env, cond, body, &[], true),
                    None => env,
                }
            }
            "for_statement" => {
                let mut env = env;
                for init in node.children_by_field("initializer") {
                    env = if init.kind == "declaration" {
                        self.declaration(init, env)
                    } else {
                        self.eval(init, env, None)
                    };
                }
                let cond = node.child_by_field("condition");
                let updates: Vec<&AstNode> = node.children_by_field("update").collect();
                match node.child_by_field("body") {
                    Some(body) => self.run_loop(env, cond, body, &updates, false),
                    None => env,
                }
            }
            "for_range_loop" => {
                let mut env = env;
                if let Some(right) = node.child_by_field("right") {
                    env = self.eval(right, env, None);
                }
                let (Some(decl), Some(body)) = (node.child_by_field("declarator"), node.child_by_field("body")) else {
                    return env;
                };
                // Each iteration binds the loop variable, then runs the body.
                let mut head = env.clone();
                loop {
                    self.breaks.push(None);
                    self.continues.push(None);
                    let mut inner = head.clone();
                    for ident in declarator_idents(decl) {
                        inner = self.define(ident, inner, true);
                    }
                    let out = self.stmt(body, inner);
                    let cont = self.continues.pop().flatten();
                    let brk = self.breaks.pop().flatten();
                    let next = join(env.clone(), join(out, cont));
                    if next == head {
                        return join(head, brk);
                    }
                    head = next;
                }
            }
            "switch_statement" => self.switch(node, env),
            "case_statement" => {
                let mut env = env;
                for child in node.named_children() {
                    if child.field != Some("value") {
                        env = self.stmt(child, env);
                    }
                }
                env
            }
            "break_statement" => {
                if let Some(top) = self.breaks.last_mut() {
                    *top = join(top.take(), env);
                }
                None
            }
            "continue_statement" => {
                if let Some(top) = self.continues.last_mut() {
                    *top = join(top.take(), env);
                }
                None
            }
            "goto_statement" => {
                if let Some(label) = node.child_by_field("label") {
                    let name = self.tree.text(label).to_owned();
                    let slot = self.labels.entry(name).or_insert(None);
                    *slot = join(slot.take(), env);
                }
                None
            }
            "labeled_statement" => {
                let mut env = env;
                if let Some(label) = node.child_by_field("label") {
                    if let Some(incoming) = self.labels.remove(self.tree.text(label)) {
                        env = join(env, incoming);
                    }
                }
                for child in node.named_children() {
                    if child.field != Some("label") {
                        env = self.stmt(child, env);
                    }
                }
                env
            }
            _ => self.eval(node, env, None),
        }
    }

    fn run_loop(
        &mut self,
        entry: Env,
        cond: Option<&AstNode>,
        body: &AstNode,
        updates: &[&AstNode],
        body_first: bool,
    ) -> Env {
        let mut head = entry.clone();
        loop {
            self.breaks.push(None);
            self.continues.push(None);
            let (after_cond, end) = if body_first {
                let out = self.stmt(body, head.clone());
                let cont = self.continues.pop().flatten();
                let before = join(out, cont);
                let after = match cond {
                    Some(c) => self.eval(c, before, None),
                    None => before,
                };
                (after.clone(), after)
            } else {
                let after = match cond {
                    Some(c) => self.eval(c, head.clone(), None),
                    None => head.clone(),
                };
                let out = self.stmt(body, after.clone());
                let cont = self.continues.pop().flatten();
                let mut end = join(out, cont);
                for update in updates {
                    end = self.eval(update, end, None);
                }
                (after, end)
            };
            let brk = self.breaks.pop().flatten();
            let next = join(entry.clone(), end);
            if next == head {
                // Without a condition the loop only exits through `break`.
                let normal_exit = if cond.is_some() || body_first { after_cond } else { None };
                return join(normal_exit, brk);
            }
            head = next;
        }
    }

    fn switch(&mut self, node: &AstNode, env: Env) -> Env {
        let mut env = env;
        if let Some(cond) = node.child_by_field("condition") {
            env = self.eval(cond, env, None);
        }
        let Some(body) = node.child_by_field("body") else {
            return env;
        };
        self.breaks.push(None);
        let mut current: Env = None;
        let mut has_default = false;
        for child in body.named_children() {
            if child.kind == "case_statement" {
                if child.children.first().is_some_and(|c| c.kind == "default") {
                    has_default = true;
                }
                current = join(current, env.clone());
            }
            current = self.stmt(child, current);
        }
        let brk = self.breaks.pop().flatten();
        let exit = join(current, brk);
        if has_default {
            exit
        } else {
            join(exit, env)
        }
    }

    fn declaration(&mut self, node: &AstNode, env: Env) -> Env {
        let mut env = env;
        // C++ condition declarations carry the initializer on the declaration.
        if let Some(value) = node.child_by_field("value") {
            let targets: Vec<&AstNode> = node
                .children_by_field("declarator")
                .flat_map(declarator_idents)
                .collect();
            let sink = targets.first().and_then(|t| self.token(t));
            env = self.eval(value, env, sink);
            for t in targets {
                env = self.define(t, env, true);
            }
            return env;
        }
        for decl in node.children_by_field("declarator") {
            let (target, value) = if decl.kind == "init_declarator" {
                (decl.child_by_field("declarator").unwrap_or(decl), decl.child_by_field("value"))
            } else {
                (decl, None)
            };
            env = self.array_sizes(target, env);
            let idents = declarator_idents(target);
            if let Some(value) = value {
                let sink = idents.first().and_then(|t| self.token(t));
                env = self.eval(value, env, sink);
            }
            for ident in idents {
                env = self.define(ident, env, true);
            }
        }
        env
    }

    fn array_sizes(&mut self, declarator: &AstNode, env: Env) -> Env {
        let mut env = env;
        if declarator.kind == "array_declarator" {
            if let Some(size) = declarator.child_by_field("size") {
                env = self.eval(size, env, None);
            }
        }
        if let Some(inner) = declarator.child_by_field("declarator") {
            env = self.array_sizes(inner, env);
        }
        env
    }

    fn eval(&mut self, node: &AstNode, env: Env, sink: Option<usize>) -> Env {
        match node.kind {
            "identifier" => {
                self.read(node, &env, sink);
                env
            }
            "assignment_expression" => {
                let (Some(left), Some(right)) = (node.child_by_field("left"), node.child_by_field("right")) else {
                    return self.eval_children(node, env, sink);
                };
                let compound = node
                    .child_by_field("operator")
                    .is_some_and(|op| self.tree.text(op) != "=");
                let left = strip_parens(left);
                if left.kind == "identifier" {
                    let tok = self.token(left);
                    if compound {
                        self.read(left, &env, tok);
                    }
                    let env = self.eval(right, env, tok);
                    self.define(left, env, true)
                } else {
                    let base = base_ident(left);
                    let env = self.eval(left, env, None);
                    let env = self.eval(right, env, base.and_then(|b| self.token(b)));
                    match base {
                        Some(b) => self.define(b, env, false),
                        None => env,
                    }
                }
            }
            "update_expression" => {
                let Some(arg) = node.child_by_field("argument") else {
                    return env;
                };
                let arg = strip_parens(arg);
                if arg.kind == "identifier" {
                    let tok = self.token(arg);
                    self.read(arg, &env, tok);
                    self.define(arg, env, true)
                } else {
                    let env = self.eval(arg, env, None);
                    match base_ident(arg) {
                        Some(b) => self.define(b, env, false),
                        None => env,
                    }
                }
            }
            "call_expression" => {
                let mut env = env;
                if let Some(callee) = node.child_by_field("function") {
                    let is_plain_function =
                        callee.kind == "identifier" && !self.declared.contains(self.tree.text(callee));
                    if !is_plain_function {
                        env = self.eval(callee, env, sink);
                    }
                }
                if let Some(args) = node.child_by_field("arguments") {
                    env = self.eval(args, env, sink);
                }
                env
            }
            "field_expression" => match node.child_by_field("argument") {
                Some(arg) => self.eval(arg, env, sink),
                None => env,
            },
            "binary_expression"
                if node
                    .child_by_field("operator")
                    .is_some_and(|op| matches!(self.tree.text(op), "&&" | "||" | "and" | "or")) =>
            {
                let (Some(left), Some(right)) = (node.child_by_field("left"), node.child_by_field("right")) else {
                    return self.eval_children(node, env, sink);
                };
                let after_left = self.eval(left, env, sink);
                let after_right = self.eval(right, after_left.clone(), sink);
                join(after_left, after_right)
            }
            "conditional_expression" => {
                let mut env = env;
                if let Some(cond) = node.child_by_field("condition") {
                    env = self.eval(cond, env, sink);
                }
                let yes = match node.child_by_field("consequence") {
                    Some(c) => self.eval(c, env.clone(), sink),
                    None => env.clone(),
                };
                let no = match node.child_by_field("alternative") {
                    Some(a) => self.eval(a, env, sink),
                    None => env,
                };
                join(yes, no)
            }
            // `(a) - b` is grammatically a cast of `-b` to type `a`; when `a`
            // names a variable in scope it is really a subtraction.
            "cast_expression" => {
                let mut env = env;
                if let Some(ident) = node.child_by_field("type").and_then(|t| self.variable_as_type(t, &env)) {
                    self.read(ident, &env, sink);
                }
                if let Some(value) = node.child_by_field("value") {
                    env = self.eval(value, env, sink);
                }
                env
            }
            "compound_statement" => self.stmt(node, env),
            "declaration" => self.declaration(node, env),
            "lambda_expression" | "qualified_identifier" | "template_function" | "type_descriptor"
            | "field_identifier" | "statement_identifier" => env,
            _ => self.eval_children(node, env, sink),
        }
    }

    fn variable_as_type<'n>(&self, descriptor: &'n AstNode, env: &Env) -> Option<&'n AstNode> {
        let mut named = descriptor.named_children();
        let ty = named.next()?;
        if named.next().is_some() || ty.kind != "type_identifier" {
            return None;
        }
        env.as_ref()?.contains_key(self.tree.text(ty)).then_some(ty)
    }

    fn eval_children(&mut self, node: &AstNode, env: Env, sink: Option<usize>) -> Env {
        let mut env = env;
        for child in node.named_children() {
            if child.field == Some("type") {
                continue;
            }
            env = self.eval(child, env, sink);
        }
        env
    }
}

fn strip_parens(node: &AstNode) -> &AstNode {
    let mut node = node;
    while node.kind == "parenthesized_expression" {
        match node.named_children().next() {
            Some(inner) => node = inner,
            None => break,
        }
    }
    node
}

/// The identifier a subscript, field access or dereference ultimately reads
/// through: `a` for `a[i].x`, `p` for `*p` and `p->n`.
pub fn base_ident(node: &AstNode) -> Option<&AstNode> {
    match node.kind {
        "identifier" => Some(node),
        "subscript_expression" | "field_expression" | "pointer_expression" => {
            base_ident(node.child_by_field("argument")?)
        }
        "parenthesized_expression" | "cast_expression" => base_ident(node.children.iter().rev().find(|c| c.named)?),
        _ => None,
    }
}

/// Identifiers introduced by a declarator, looking through pointer, array,
/// reference and parenthesized wrappers. A function declarator naming a
/// function declares no variable.
pub fn declarator_idents(node: &AstNode) -> Vec<&AstNode> {
    match node.kind {
        "identifier" => vec![node],
        "function_declarator" => match node.child_by_field("declarator") {
            Some(inner) if inner.kind != "identifier" => declarator_idents(inner),
            _ => Vec::new(),
        },
        "structured_binding_declarator" => node.named_children().filter(|c| c.kind == "identifier").collect(),
        "pointer_declarator" | "array_declarator" | "reference_declarator" | "parenthesized_declarator"
        | "attributed_declarator" | "init_declarator" => {
            let inner = node
                .child_by_field("declarator")
                .or_else(|| node.named_children().find(|c| c.kind.ends_with("declarator") || c.kind == "identifier"));
            inner.map(declarator_idents).unwrap_or_default()
        }
        _ => Vec::new(),
    }
}

/// The `function_declarator` of a function definition.
pub fn function_declarator(function: &AstNode) -> Option<&AstNode> {
    let mut node = function.child_by_field("declarator")?;
    loop {
        if node.kind == "function_declarator" {
            return Some(node);
        }
        node = node
            .child_by_field("declarator")
            .or_else(|| node.named_children().find(|c| c.kind.ends_with("declarator")))?;
    }
}

/// Identifier nodes of the function's parameters, in order.
pub fn parameter_names(function: &AstNode) -> Vec<&AstNode> {
    let Some(params) = function_declarator(function).and_then(|d| d.child_by_field("parameters")) else {
        return Vec::new();
    };
    params
        .named_children()
        .filter_map(|p| p.child_by_field("declarator"))
        .flat_map(declarator_idents)
        .collect()
}

/// Names declared as local variables anywhere in `node`.
pub fn collect_local_names(tree: &SyntaxTree, node: &AstNode, out: &mut HashSet<String>) {
    for n in node.preorder() {
        match n.kind {
            "declaration" => {
                for d in n.children_by_field("declarator") {
                    for ident in declarator_idents(d) {
                        out.insert(tree.text(ident).to_owned());
                    }
                }
            }
            "for_range_loop" => {
                if let Some(d) = n.child_by_field("declarator") {
                    for ident in declarator_idents(d) {
                        out.insert(tree.text(ident).to_owned());
                    }
                }
            }
            _ => {}
        }
    }
}
