use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Whitespace normalization regimes used by common code models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationRule {
    /// Every run of spaces, tabs and newlines becomes one space; ends trimmed.
    CodexGlueCleaner,
    /// Runs of spaces and tabs become one space, newlines are kept and
    /// trailing spaces on each line are dropped.
    PdbertCleaner,
    #[default]
    NoNormalization,
}

impl NormalizationRule {
    pub const ALL: [NormalizationRule; 3] = [
        NormalizationRule::CodexGlueCleaner,
        NormalizationRule::PdbertCleaner,
        NormalizationRule::NoNormalization,
    ];
}

impl fmt::Display for NormalizationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationRule::CodexGlueCleaner => "codexglue",
            NormalizationRule::PdbertCleaner => "pdbert",
            NormalizationRule::NoNormalization => "none",
        })
    }
}

impl FromStr for NormalizationRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "codexglue" | "codexgluecleaner" => Ok(NormalizationRule::CodexGlueCleaner),
            "pdbert" | "pdbertcleaner" => Ok(NormalizationRule::PdbertCleaner),
            "none" | "nonormalization" => Ok(NormalizationRule::NoNormalization),
            _ => Err(format!("unknown normalization rule {s:?} (expected codexglue, pdbert or none)")),
        }
    }
}

pub fn normalize(code: &str, rule: NormalizationRule) -> String {
    match rule {
        NormalizationRule::CodexGlueCleaner => code.split_whitespace().collect::<Vec<_>>().join(" "),
        NormalizationRule::PdbertCleaner => code
            .split('\n')
            .map(|line| {
                let mut out = String::with_capacity(line.len());
                let mut in_gap = false;
                for c in line.chars() {
                    // \r only ever shows up as part of \r\n line endings here.
                    if c.is_whitespace() {
                        in_gap = true;
                    } else {
                        if in_gap {
                            out.push(' ');
                        }
                        in_gap = false;
                        out.push(c);
                    }
                }
                out
            })
            .collect::<Vec<_>>()
            .join("\n"),
        NormalizationRule::NoNormalization => code.to_owned(),
    }
}
