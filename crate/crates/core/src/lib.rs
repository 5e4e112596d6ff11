//! Data engineering and robustness evaluation for function-level C/C++
//! vulnerability detection.
//!
//! The crate is organised as a pipeline over [`SourceFunction`] records:
//!
//! * [`parse`] turns function text into a [`SyntaxTree`] and a [`Token`] stream.
//! * [`views`] renders the structure-aware prompt views (flattened AST, API
//!   call narrative, data-flow narrative).
//! * [`perturb`] applies normalization, identifier abstraction and
//!   semantic-preserving rewrites.
//! * [`slice`] selects vulnerability-relevant lines under a token budget.
//! * [`dataset`] ingests corpora, partitions them without leakage and audits
//!   the result.
//! * [`prompt`] assembles zero-shot and few-shot chat prompts.
//! * [`eval`] talks to a chat-completion endpoint and scores verdicts.
//! * [`config`] loads pipeline settings from TOML.
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled as doctests of this crate.

pub mod config;
pub mod dataflow;
pub mod dataset;
pub mod eval;
pub mod lexer;
pub mod parse;
pub mod perturb;
pub mod prompt;
pub mod slice;
pub mod views;

pub use parse::{
    parse_function, tokenize, AstNode, Label, Language, ParseError, SourceFunction, Span,
    SyntaxTree, Token,
};

// The guide chapters are compiled as doctests so their listings stay in sync
// with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/parsing.md")]
    mod parsing {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/perturbations.md")]
    mod perturbations {}
    #[doc = include_str!("../../../book/src/slicing.md")]
    mod slicing {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
