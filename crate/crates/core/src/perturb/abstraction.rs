//! Replace parameters, local variables and string literals with placeholder
//! names (`PARAM0`, `VAR0`, `"STRING0"`).
//!
//! Function names, callees that are not variables, field names, type names,
//! keywords and numeric literals are left alone. Identifiers that are neither
//! parameters nor declared locals (globals, macros, enum constants) are also
//! left alone since nothing in the function says what they are.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataflow::{collect_local_names, function_declarator, parameter_names};
use crate::parse::{parse_function, ParseError, SourceFunction, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityCategory {
    Param,
    Var,
    String,
}

impl EntityCategory {
    fn prefix(self) -> &'static str {
        match self {
            EntityCategory::Param => "PARAM",
            EntityCategory::Var => "VAR",
            EntityCategory::String => "STRING",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionEntry {
    pub original: String,
    #[serde(rename = "abstract")]
    pub abstracted: String,
    pub category: EntityCategory,
}

/// Original entity to placeholder, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionMap {
    pub entries: Vec<AbstractionEntry>,
}

impl AbstractionMap {
    pub fn get(&self, original: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.original == original)
            .map(|e| e.abstracted.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// No two originals share a placeholder.
    pub fn is_injective(&self) -> bool {
        let mut seen = HashSet::new();
        self.entries.iter().all(|e| seen.insert(e.abstracted.as_str()))
    }
}

pub fn abstract_function(func: &SourceFunction) -> Result<(String, AbstractionMap), ParseError> {
    let tree = parse_function(func)?;
    let function = tree.function();

    let params: HashSet<String> = parameter_names(function)
        .into_iter()
        .map(|n| tree.text(n).to_owned())
        .collect();
    let mut locals = HashSet::new();
    if let Some(body) = function.child_by_field("body") {
        collect_local_names(&tree, body, &mut locals);
    }
    let own_name: Option<Span> = function_declarator(function)
        .and_then(|d| d.child_by_field("declarator"))
        .map(|n| n.span);

    let mut map = AbstractionMap::default();
    let mut index: HashMap<(EntityCategory, String), usize> = HashMap::new();
    let mut counters: HashMap<EntityCategory, usize> = HashMap::new();
    let mut edits: Vec<(Span, String)> = Vec::new();

    for leaf in function.leaves() {
        let text = tree.text(leaf);
        let (category, replacement_prefix) = match leaf.kind {
            "identifier" if Some(leaf.span) != own_name => {
                if params.contains(text) {
                    (EntityCategory::Param, "")
                } else if locals.contains(text) {
                    (EntityCategory::Var, "")
                } else {
                    continue;
                }
            }
            "string_literal" => {
                let Some(quote) = text.find('"') else { continue };
                (EntityCategory::String, &text[..quote])
            }
            _ => continue,
        };
        let key = (category, text.to_owned());
        let slot = match index.get(&key) {
            Some(&slot) => slot,
            None => {
                let n = counters.entry(category).or_insert(0);
                let abstracted = format!("{}{}", category.prefix(), n);
                *n += 1;
                map.entries.push(AbstractionEntry {
                    original: text.to_owned(),
                    abstracted,
                    category,
                });
                index.insert(key, map.entries.len() - 1);
                map.entries.len() - 1
            }
        };
        let name = &map.entries[slot].abstracted;
        let replacement = match category {
            EntityCategory::String => format!("{replacement_prefix}\"{name}\""),
            _ => name.clone(),
        };
        edits.push((leaf.span, replacement));
    }

    let source = tree.source();
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0;
    for (span, replacement) in edits {
        out.push_str(&source[cursor..span.start]);
        out.push_str(&replacement);
        cursor = span.end;
    }
    out.push_str(&source[cursor..]);
    Ok((out, map))
}
