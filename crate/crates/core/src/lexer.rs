//! A small C/C++ lexer for text that is not necessarily a whole function.
//!
//! Token budgets are applied to fragments (single lines, slices, truncated
//! prefixes), so counting cannot rely on the grammar. The lexer splits on the
//! same boundaries as the parser for ordinary code: identifiers and keywords,
//! numbers, string and character literals, and operators by longest match.
//! Whitespace and comments produce no lexemes.

use crate::parse::Span;

const PUNCTUATORS: &[&str] = &[
    "<<=", ">>=", "...", "->*", "<=>", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=",
    "&&", "||", "+=", "-=", "*=", "/=", "%=", "&=", "^=", "|=", "::", "##", ".*",
];

/// Byte spans of the lexemes in `text`, in order.
pub fn lex(text: &str) -> Vec<Span> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i = match text[i + 2..].find("*/") {
                Some(off) => i + 2 + off + 2,
                None => bytes.len(),
            };
            continue;
        }
        let start = i;
        if let Some(end) = literal_end(bytes, i) {
            i = end;
        } else if b.is_ascii_alphabetic() || b == b'_' || b == b'$' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$') {
                i += 1;
            }
        } else if b.is_ascii_digit() || (b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            i += 1;
            while i < bytes.len() {
                let c = bytes[i];
                let exponent_sign = matches!(c, b'+' | b'-') && matches!(bytes[i - 1], b'e' | b'E' | b'p' | b'P');
                if exponent_sign || c.is_ascii_alphanumeric() || c == b'.' || c == b'_' || c == b'\'' {
                    i += 1;
                } else {
                    break;
                }
            }
        } else if b == b'#' && bytes.get(i + 1).is_some_and(|c| c.is_ascii_alphabetic()) {
            // `#include`, `#define`, ... are one token, as in the grammar.
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
        } else if let Some(p) = PUNCTUATORS.iter().find(|p| text[i..].starts_with(**p)) {
            i += p.len();
        } else {
            // Any other character, including non-ASCII, stands alone.
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
        out.push(Span::new(start, i));
    }
    out
}

/// End of a string or character literal starting at `i`, prefixes included.
fn literal_end(bytes: &[u8], i: usize) -> Option<usize> {
    let mut j = i;
    // Encoding prefixes: L, u, U, u8, optionally followed by R for raw strings.
    for prefix in [&b"u8"[..], b"u", b"U", b"L"] {
        if bytes[j..].starts_with(prefix) {
            j += prefix.len();
            break;
        }
    }
    let raw = bytes.get(j) == Some(&b'R') && bytes.get(j + 1) == Some(&b'"');
    if raw {
        j += 1;
    }
    let quote = *bytes.get(j)?;
    if quote != b'"' && quote != b'\'' {
        return None;
    }
    if raw {
        let open = j + 1;
        let paren = bytes[open..].iter().position(|&c| c == b'(')? + open;
        let delim = &bytes[open..paren];
        let mut k = paren + 1;
        while k < bytes.len() {
            if bytes[k] == b')' && bytes[k + 1..].starts_with(delim) && bytes.get(k + 1 + delim.len()) == Some(&b'"') {
                return Some(k + delim.len() + 2);
            }
            k += 1;
        }
        return Some(bytes.len());
    }
    let mut k = j + 1;
    while k < bytes.len() {
        match bytes[k] {
            b'\\' => k += 2,
            b'\n' => return Some(k),
            c if c == quote => return Some(k + 1),
            _ => k += 1,
        }
    }
    Some(bytes.len().min(k))
}

pub fn count(text: &str) -> usize {
    lex(text).len()
}
