//! Querying a chat-completion endpoint and scoring the answers.
//!
//! Replies are reduced to a [`Verdict`] by the first standalone "yes" or "no"
//! (any case). Replies with neither abstain. Abstentions are kept apart in
//! [`ConfusionCounts`] and count as non-vulnerable predictions in the headline
//! metrics. A metric whose denominator is zero is `None`.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::parse::Label;
use crate::prompt::{to_messages, Message, PromptBundle};

pub const DEFAULT_API_KEY_ENV: &str = "VDKIT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Requests in flight at once.
    pub concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 0.0,
            top_p: 0.9,
            max_tokens: 10,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            concurrency: 4,
        }
    }
}

impl EndpointConfig {
    pub fn request_body(&self, messages: &[Message]) -> Value {
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, refused connections, 429 and 5xx.
    #[error("{0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("request for {id:?} failed after {attempts} attempt(s): {message}")]
    Endpoint { id: String, attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("nothing to score")]
    EmptyInput,
    #[error("{verdicts} verdicts for {labels} labels")]
    LengthMismatch { verdicts: usize, labels: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Anything that answers a list of chat messages with reply text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, config: &EndpointConfig, messages: &[Message]) -> Result<String, BackendError>;
}

/// Chat-completions over HTTP with an optional bearer token.
pub struct HttpBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    /// Reads the token from the variable named in `config.api_key_env`.
    pub fn from_config(config: &EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpBackend {
            agent,
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, config: &EndpointConfig, messages: &[Message]) -> Result<String, BackendError> {
        let mut request = self.agent.post(&config.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(config.request_body(messages))
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}: {body}"))),
            408 | 429 | 500..=599 => return Err(BackendError::Transient(format!("HTTP {status}: {body}"))),
            _ => return Err(BackendError::Fatal(format!("HTTP {status}: {body}"))),
        }
        let value: Value = serde_json::from_str(&body).map_err(|e| BackendError::Fatal(format!("bad response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Fatal(format!("response has no choices[0].message.content: {body}")))
    }
}

/// Replies computed by a closure; handy offline and in tests.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&[Message]) -> String + Send + Sync,
{
    fn complete(&self, _config: &EndpointConfig, messages: &[Message]) -> Result<String, BackendError> {
        Ok((self.0)(messages))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Vulnerable,
    NonVulnerable,
    Abstain,
}

/// First standalone "yes" or "no", ignoring case.
pub fn parse_verdict(reply: &str) -> Verdict {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|word| {
            if word.eq_ignore_ascii_case("yes") {
                Some(Verdict::Vulnerable)
            } else if word.eq_ignore_ascii_case("no") {
                Some(Verdict::NonVulnerable)
            } else {
                None
            }
        })
        .unwrap_or(Verdict::Abstain)
}

/// One request and its outcome, as persisted in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: String,
    pub request: Value,
    pub reply: String,
    pub verdict: Verdict,
    pub attempts: u32,
}

fn with_retries(backend: &dyn ChatBackend, config: &EndpointConfig, bundle: &PromptBundle) -> Result<InferenceRecord, EvalError> {
    let messages = to_messages(bundle);
    let mut attempts = 0;
    loop {
        attempts += 1;
        match backend.complete(config, &messages) {
            Ok(reply) => {
                return Ok(InferenceRecord {
                    id: bundle.id.clone(),
                    request: config.request_body(&messages),
                    verdict: parse_verdict(&reply),
                    reply,
                    attempts,
                })
            }
            Err(BackendError::Auth(message)) => return Err(EvalError::Auth(message)),
            Err(BackendError::Transient(message)) if attempts <= config.max_retries => {
                let delay = config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                log::warn!("{}: attempt {attempts} failed ({message}); retrying in {delay} ms", bundle.id);
                thread::sleep(Duration::from_millis(delay));
            }
            Err(BackendError::Transient(message) | BackendError::Fatal(message)) => {
                return Err(EvalError::Endpoint {
                    id: bundle.id.clone(),
                    attempts,
                    message,
                })
            }
        }
    }
}

/// Sends every bundle with at most `config.concurrency` requests in flight.
/// Results come back in input order. Completed records are written to `log`
/// as JSON lines even when the run stops on an error.
pub fn run_inference(
    bundles: &[PromptBundle],
    config: &EndpointConfig,
    backend: &dyn ChatBackend,
    log: Option<&mut dyn Write>,
) -> Result<Vec<InferenceRecord>, EvalError> {
    let slots: Vec<Mutex<Option<Result<InferenceRecord, EvalError>>>> = bundles.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = config.concurrency.clamp(1, bundles.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(bundle) = bundles.get(i) else { break };
                    let outcome = with_retries(backend, config, bundle);
                    if outcome.is_err() {
                        stop.store(true, Ordering::Relaxed);
                    }
                    *slots[i].lock().expect("no worker panics while holding a slot") = Some(outcome);
                }
            });
        }
    });

    let mut records = Vec::with_capacity(bundles.len());
    let mut first_error = None;
    for slot in slots {
        match slot.into_inner().expect("workers have finished") {
            Some(Ok(r)) => records.push(r),
            Some(Err(e)) => {
                first_error.get_or_insert(e);
            }
            None => {}
        }
    }
    if let Some(w) = log {
        for r in &records {
            serde_json::to_writer(&mut *w, r).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Abstentions on vulnerable records.
    pub abstain_vulnerable: usize,
    /// Abstentions on non-vulnerable records.
    pub abstain_non_vulnerable: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, verdict: Verdict, label: Label) {
        match (verdict, label) {
            (Verdict::Vulnerable, Label::Vulnerable) => self.tp += 1,
            (Verdict::Vulnerable, Label::NonVulnerable) => self.fp += 1,
            (Verdict::NonVulnerable, Label::NonVulnerable) => self.tn += 1,
            (Verdict::NonVulnerable, Label::Vulnerable) => self.fn_ += 1,
            (Verdict::Abstain, Label::Vulnerable) => self.abstain_vulnerable += 1,
            (Verdict::Abstain, Label::NonVulnerable) => self.abstain_non_vulnerable += 1,
        }
    }

    pub fn abstain(&self) -> usize {
        self.abstain_vulnerable + self.abstain_non_vulnerable
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.abstain()
    }

    /// Counts with abstentions folded into the negative predictions.
    pub fn headline(&self) -> (usize, usize, usize, usize) {
        (self.tp, self.fp, self.tn + self.abstain_non_vulnerable, self.fn_ + self.abstain_vulnerable)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tnr: Option<f64>,
    /// Recall over the vulnerable records of each primary CWE.
    pub per_cwe_recall: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let (tp, fp, tn, fn_) = counts.headline();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let tnr = ratio(tn, tn + fp);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        MetricsReport {
            counts,
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            balanced_accuracy: recall.zip(tnr).map(|(r, t)| (r + t) / 2.0),
            f1,
            precision,
            recall,
            tnr,
            per_cwe_recall: BTreeMap::new(),
        }
    }

    /// The six headline metrics by name, in a fixed order.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("accuracy", self.accuracy),
            ("balanced_accuracy", self.balanced_accuracy),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
            ("tnr", self.tnr),
        ]
    }

    /// `metric,value` rows; absent metrics have an empty value and per-CWE
    /// recall rows are named `recall:<CWE>`.
    pub fn write_csv(&self, w: impl Write) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "value"])?;
        for (name, value) in self.metrics() {
            out.write_record([name.to_owned(), value.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        for (name, value) in [
            ("tp", self.counts.tp),
            ("fp", self.counts.fp),
            ("tn", self.counts.tn),
            ("fn", self.counts.fn_),
            ("abstain", self.counts.abstain()),
        ] {
            out.write_record([name.to_owned(), value.to_string()])?;
        }
        for (cwe, recall) in &self.per_cwe_recall {
            out.write_record([format!("recall:{cwe}"), recall.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Metrics over aligned verdicts, labels and primary CWEs.
pub fn score(verdicts: &[Verdict], labels: &[Label], cwes: &[String]) -> Result<MetricsReport, EvalError> {
    if verdicts.len() != labels.len() || labels.len() != cwes.len() {
        return Err(EvalError::LengthMismatch {
            verdicts: verdicts.len(),
            labels: labels.len().min(cwes.len()),
        });
    }
    if verdicts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut counts = ConfusionCounts::default();
    let mut per_cwe: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ((&v, &l), cwe) in verdicts.iter().zip(labels).zip(cwes) {
        counts.add(v, l);
        if l.is_vulnerable() {
            let slot = per_cwe.entry(cwe).or_default();
            slot.1 += 1;
            if v == Verdict::Vulnerable {
                slot.0 += 1;
            }
        }
    }
    let mut report = MetricsReport::from_counts(counts);
    report.per_cwe_recall = per_cwe
        .into_iter()
        .map(|(cwe, (hit, total))| (cwe.to_owned(), hit as f64 / total as f64))
        .collect();
    Ok(report)
}
