//! Chat prompts for yes/no vulnerability questions.
//!
//! A bundle holds a system role, optional demonstration exchanges and the
//! final question. Model-specific chat templates are left to the serving
//! endpoint; [`to_messages`] produces plain role/content pairs.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::complete_pairs;
use crate::parse::{parse_function, ParseError, SourceFunction, TokenOptions};
use crate::views;

pub const SYSTEM_ROLE: &str = "You are a code security expert who excels at detecting vulnerabilities";
pub const QUESTION: &str = "Is the following function vulnerable? Please answer Yes or No.";
pub const SHOT_PAIRS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptType {
    RawCode,
    FlatAst,
    ApiCalls,
    DataFlow,
}

impl PromptType {
    pub const ALL: [PromptType; 4] = [PromptType::RawCode, PromptType::FlatAst, PromptType::ApiCalls, PromptType::DataFlow];
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptType::RawCode => "raw-code",
            PromptType::FlatAst => "flat-ast",
            PromptType::ApiCalls => "api-calls",
            PromptType::DataFlow => "data-flow",
        })
    }
}

impl FromStr for PromptType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "rawcode" | "raw" | "code" => Ok(PromptType::RawCode),
            "flatast" | "ast" | "flattenedast" => Ok(PromptType::FlatAst),
            "apicalls" | "apicall" | "api" => Ok(PromptType::ApiCalls),
            "dataflow" | "flow" => Ok(PromptType::DataFlow),
            _ => Err(format!("unknown prompt type {s:?} (expected raw-code, flat-ast, api-calls or data-flow)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSetting {
    ZeroShot,
    FewShot,
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptSetting::ZeroShot => "zero-shot",
            PromptSetting::FewShot => "few-shot",
        })
    }
}

impl FromStr for PromptSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "zeroshot" | "zero" => Ok(PromptSetting::ZeroShot),
            "fewshot" | "few" => Ok(PromptSetting::FewShot),
            _ => Err(format!("unknown prompt setting {s:?} (expected zero-shot or few-shot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    /// Id of the function being asked about.
    pub id: String,
    pub system: String,
    pub shots: Vec<Shot>,
    pub user: String,
    pub prompt_type: PromptType,
    pub setting: PromptSetting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    fn new(role: &str, content: &str) -> Self {
        Message {
            role: role.to_owned(),
            content: content.to_owned(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("few-shot prompts need {SHOT_PAIRS} complete pairs besides the target's own; the pool has {available}")]
    InsufficientShots { available: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// The question followed by the function and, for structural types, the
/// matching view under its own heading.
pub fn render_user(func: &SourceFunction, prompt_type: PromptType) -> Result<String, ParseError> {
    let mut text = format!("{QUESTION}\n\n{}", func.code);
    if prompt_type == PromptType::RawCode {
        return Ok(text);
    }
    let tree = parse_function(func)?;
    let (heading, view) = match prompt_type {
        PromptType::FlatAst => ("Flattened AST", views::flatten_ast(&tree).text),
        PromptType::ApiCalls => ("API call", views::api_call_view(&tree)),
        PromptType::DataFlow => {
            let tokens = tree.tokens(TokenOptions::default());
            ("Data flow", views::data_flow_view(&tree, &tokens).1)
        }
        PromptType::RawCode => unreachable!(),
    };
    text.push_str(&format!("\n\n{heading}:\n{view}"));
    Ok(text)
}

/// Complete patch pairs available as demonstrations.
#[derive(Debug, Clone)]
pub struct ShotPool<'a> {
    pairs: Vec<(&'a str, &'a SourceFunction, &'a SourceFunction)>,
}

impl<'a> ShotPool<'a> {
    pub fn new(train: &'a [SourceFunction]) -> Self {
        ShotPool { pairs: complete_pairs(train) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-target RNG seed: the same run seed gives different shots to different
/// functions, and the same shots to the same function every time.
fn target_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(bytes)
}

pub fn build_prompt(
    func: &SourceFunction,
    prompt_type: PromptType,
    setting: PromptSetting,
    pool: &ShotPool<'_>,
    seed: u64,
) -> Result<PromptBundle, PromptError> {
    let mut shots = Vec::new();
    if setting == PromptSetting::FewShot {
        // The target's own pair never serves as a demonstration.
        let eligible: Vec<_> = pool
            .pairs
            .iter()
            .filter(|(p, v, n)| func.pair_id.as_deref() != Some(*p) && v.id != func.id && n.id != func.id)
            .collect();
        if eligible.len() < SHOT_PAIRS {
            return Err(PromptError::InsufficientShots { available: eligible.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(target_seed(seed, &func.id));
        for k in sample(&mut rng, eligible.len(), SHOT_PAIRS) {
            let (_, v, n) = eligible[k];
            shots.push(Shot {
                user: render_user(v, prompt_type)?,
                assistant: "Yes".into(),
            });
            shots.push(Shot {
                user: render_user(n, prompt_type)?,
                assistant: "No".into(),
            });
        }
    }
    Ok(PromptBundle {
        id: func.id.clone(),
        system: SYSTEM_ROLE.to_owned(),
        shots,
        user: render_user(func, prompt_type)?,
        prompt_type,
        setting,
    })
}

/// Role-tagged messages in chat-completion order.
pub fn to_messages(bundle: &PromptBundle) -> Vec<Message> {
    let mut out = vec![Message::new("system", &bundle.system)];
    for shot in &bundle.shots {
        out.push(Message::new("user", &shot.user));
        out.push(Message::new("assistant", &shot.assistant));
    }
    out.push(Message::new("user", &bundle.user));
    out
}
