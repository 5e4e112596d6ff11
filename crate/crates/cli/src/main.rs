//! `vdkit`: the pipeline as file-to-file subcommands.
//!
//! Exit status is 0 on success, 1 when the input fails validation (leaky
//! audit, missing dates, mismatched files) and 2 on any other error.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use vdkit::config::{ConfigError, PipelineConfig};
use vdkit::dataset::{self, DatasetError, Split, SplitAssignment, SplitRatios};
use vdkit::eval::{self, HttpBackend, InferenceRecord};
use vdkit::perturb::{abstract_function, generate_variants, normalize, AbstractionMap, NormalizationRule, TransformKind};
use vdkit::prompt::{build_prompt, PromptBundle, PromptError, PromptSetting, PromptType, ShotPool};
use vdkit::slice::{slice_function, LexCounter, SubwordApprox, TokenCounter};
use vdkit::views;
use vdkit::{parse_function, SourceFunction};

#[derive(Parser)]
#[command(name = "vdkit", version, about = "Vulnerability-detection data engineering and evaluation toolkit")]
struct Cli {
    /// Pipeline settings (TOML); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-record work (default: all cores).
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArg {
    /// Output file (default: stdout).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw corpus and write the accepted records.
    Ingest {
        input: PathBuf,
        #[command(flatten)]
        out: OutputArg,
        /// Write the rejection report here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exit with status 1 if any record was rejected.
        #[arg(long)]
        strict: bool,
    },
    /// Partition records by primary CWE and commit date.
    Split {
        input: PathBuf,
        /// Train:valid:test proportions.
        #[arg(long)]
        ratios: Option<SplitRatios>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Undersample non-vulnerable training records to a 1:1 ratio.
    Balance {
        splits: PathBuf,
        input: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Check a partition for leakage; exits 1 when violations are found.
    Audit {
        splits: PathBuf,
        input: PathBuf,
        /// Also flag patch pairs that coincide after truncation.
        #[arg(long)]
        truncation: bool,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value_t = CounterChoice::Lex)]
        counter: CounterChoice,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Render structural views of each function.
    Views {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ViewChoice::All)]
        view: ViewChoice,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Generate semantic-preserving variants, one per applicable site.
    Transform {
        input: PathBuf,
        /// `all` or a comma-separated list of cond-negate, cond-expand,
        /// loop-convert, rel-op-reverse.
        #[arg(long, default_value = "all")]
        kind: String,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Replace parameters, locals and strings with placeholders.
    Abstract {
        input: PathBuf,
        /// Write each record's abstraction map here.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Apply a whitespace normalization rule.
    Normalize {
        input: PathBuf,
        /// codexglue, pdbert or none.
        #[arg(long)]
        rule: Option<NormalizationRule>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Slice each function around its anchor lines under a token budget.
    Slice {
        input: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value_t = CounterChoice::Lex)]
        counter: CounterChoice,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Build chat prompts for each record.
    Prompt {
        input: PathBuf,
        #[arg(long = "type", default_value = "raw-code")]
        prompt_type: PromptType,
        #[arg(long, default_value = "zero-shot")]
        setting: PromptSetting,
        /// Records to draw few-shot pairs from.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Split assignment; restricts targets to --split and, without
        /// --pool, draws shots from the training split.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
        split: SplitChoice,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Send prompt bundles to the endpoint; writes one log record per bundle.
    Run {
        bundles: PathBuf,
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Requests in flight at once.
        #[arg(long)]
        concurrency: Option<usize>,
        #[command(flatten)]
        out: OutputArg,
    },
    /// Compute metrics from run output and the labelled records.
    Score {
        predictions: PathBuf,
        input: PathBuf,
        /// Also write the metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        out: OutputArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CounterChoice {
    Lex,
    Subword,
}

impl CounterChoice {
    fn counter(self) -> Box<dyn TokenCounter> {
        match self {
            CounterChoice::Lex => Box::new(LexCounter),
            CounterChoice::Subword => Box::new(SubwordApprox::default()),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ViewChoice {
    FlatAst,
    ApiCalls,
    DataFlow,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitChoice {
    Train,
    Valid,
    Test,
    All,
}

/// Input that is well formed but fails a check.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<Invalid>()
            || matches!(
                cause.downcast_ref::<DatasetError>(),
                Some(DatasetError::MissingDate(_) | DatasetError::InvalidRatios(_) | DatasetError::NoVulnerableTraining)
            )
            || matches!(cause.downcast_ref::<ConfigError>(), Some(ConfigError::RatioSum(_) | ConfigError::ZeroBudget))
            || matches!(cause.downcast_ref::<PromptError>(), Some(PromptError::InsufficientShots { .. }))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation_failure(&err) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn output(out: &OutputArg) -> Result<Box<dyn Write>> {
    Ok(match &out.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: Serialize>(w: &mut dyn Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(w: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?);
    }
    Ok(out)
}

fn read_records(path: &Path) -> Result<Vec<SourceFunction>> {
    read_jsonl(path)
}

fn read_assignment(path: &Path) -> Result<SplitAssignment> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("{}: not a split assignment", path.display()))
}

fn parse_kinds(spec: &str) -> Result<Vec<TransformKind>> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(TransformKind::ALL.to_vec());
    }
    spec.split(',')
        .map(|k| k.trim().parse::<TransformKind>().map_err(anyhow::Error::msg))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };

    match cli.command {
        Command::Ingest { input, out, report, strict } => {
            let (records, rejections) = dataset::ingest(&input)?;
            write_jsonl(&mut *output(&out)?, &records)?;
            if let Some(path) = report {
                write_json(&mut create(&path)?, &rejections)?;
            }
            let vulnerable = records.iter().filter(|r| r.label.is_vulnerable()).count();
            eprintln!(
                "accepted {} records ({} vulnerable, {} non-vulnerable); rejected {} {:?}",
                records.len(),
                vulnerable,
                records.len() - vulnerable,
                rejections.rejections.len(),
                rejections.counts()
            );
            if strict && !rejections.is_empty() {
                bail!(Invalid(format!("{} record(s) rejected", rejections.rejections.len())));
            }
        }

        Command::Split { input, ratios, out } => {
            let ratios = ratios.unwrap_or(config.ratios);
            let records = read_records(&input)?;
            let assignment = dataset::split_by_cwe_time(&records, ratios)?;
            write_json(&mut *output(&out)?, &assignment)?;
            let counts = assignment.counts();
            eprintln!(
                "split {} records {ratios}: train {}, valid {}, test {}",
                assignment.len(),
                counts[&Split::Train],
                counts[&Split::Valid],
                counts[&Split::Test]
            );
        }

        Command::Balance { splits, input, seed, out } => {
            let assignment = read_assignment(&splits)?;
            let records = read_records(&input)?;
            let balanced = dataset::balance_training(&assignment, &records, seed.unwrap_or(config.seed))?;
            let keep: HashSet<&str> = balanced.ids.iter().map(String::as_str).collect();
            write_jsonl(&mut *output(&out)?, records.iter().filter(|r| keep.contains(r.id.as_str())))?;
            eprintln!(
                "balanced training set: {} vulnerable, {} non-vulnerable{}",
                balanced.vulnerable,
                balanced.non_vulnerable,
                if balanced.insufficient_negatives { " (all negatives kept)" } else { "" }
            );
        }

        Command::Audit { splits, input, truncation, budget, counter, out } => {
            let assignment = read_assignment(&splits)?;
            let records = read_records(&input)?;
            let mut report = dataset::audit_leakage(&assignment, &records);
            if truncation {
                let budget = budget.unwrap_or(config.budget);
                report = report.merge(dataset::audit_truncation(&records, budget, &*counter.counter()));
            }
            write_json(&mut *output(&out)?, &report)?;
            if !report.passed() {
                bail!(Invalid(format!(
                    "audit failed: {} case-1, {} case-2, {} duplicate, {} truncation violation(s)",
                    report.case1_violations.len(),
                    report.case2_violations.len(),
                    report.duplicate_hash_violations.len(),
                    report.truncation_collisions.len()
                )));
            }
            eprintln!("audit passed for {} records", report.totals.records);
        }

        Command::Views { input, view, out } => {
            let records = read_records(&input)?;
            let rows: Vec<serde_json::Value> = records
                .par_iter()
                .map(|r| {
                    let tree = match parse_function(r) {
                        Ok(t) => t,
                        Err(e) => return json!({"id": r.id, "error": e.to_string()}),
                    };
                    let mut row = serde_json::Map::new();
                    row.insert("id".into(), r.id.clone().into());
                    if matches!(view, ViewChoice::FlatAst | ViewChoice::All) {
                        row.insert("flat_ast".into(), views::flatten_ast(&tree).text.into());
                    }
                    if matches!(view, ViewChoice::ApiCalls | ViewChoice::All) {
                        row.insert("api_calls".into(), views::api_call_view(&tree).into());
                    }
                    if matches!(view, ViewChoice::DataFlow | ViewChoice::All) {
                        let tokens = tree.tokens(Default::default());
                        row.insert("data_flow".into(), views::data_flow_view(&tree, &tokens).1.into());
                    }
                    row.into()
                })
                .collect();
            write_jsonl(&mut *output(&out)?, rows)?;
        }

        Command::Transform { input, kind, out } => {
            let kinds = parse_kinds(&kind)?;
            let records = read_records(&input)?;
            let results: Vec<_> = records.par_iter().map(|r| (r, generate_variants(r, &kinds))).collect();
            let mut per_kind: BTreeMap<String, usize> = BTreeMap::new();
            let mut variants = Vec::new();
            let mut failed = 0;
            for (origin, result) in results {
                match result {
                    Ok(vs) => {
                        for v in vs {
                            *per_kind.entry(v.kind.to_string()).or_default() += 1;
                            variants.push(v.to_record(origin));
                        }
                    }
                    Err(e) => {
                        failed += 1;
                        log::warn!("{}: {e}", origin.id);
                    }
                }
            }
            write_jsonl(&mut *output(&out)?, &variants)?;
            eprintln!("{} variants from {} functions {:?}", variants.len(), records.len(), per_kind);
            if failed > 0 {
                bail!("{failed} function(s) could not be transformed");
            }
        }

        Command::Abstract { input, maps, out } => {
            let records = read_records(&input)?;
            let results: Vec<_> = records.par_iter().map(|r| (r, abstract_function(r))).collect();
            let mut abstracted = Vec::new();
            let mut sidecar: Vec<(String, AbstractionMap)> = Vec::new();
            for (r, result) in results {
                match result {
                    Ok((code, map)) => {
                        let mut rec = r.clone();
                        rec.code = code;
                        abstracted.push(rec);
                        sidecar.push((r.id.clone(), map));
                    }
                    Err(e) => log::warn!("{}: {e}", r.id),
                }
            }
            write_jsonl(&mut *output(&out)?, &abstracted)?;
            if let Some(path) = maps {
                let rows = sidecar.iter().map(|(id, map)| json!({"id": id, "entries": map.entries}));
                write_jsonl(&mut create(&path)?, rows)?;
            }
        }

        Command::Normalize { input, rule, out } => {
            let rule = rule.unwrap_or(config.normalization);
            let mut records = read_records(&input)?;
            records.par_iter_mut().for_each(|r| r.code = normalize(&r.code, rule));
            write_jsonl(&mut *output(&out)?, &records)?;
        }

        Command::Slice { input, budget, counter, out } => {
            let budget = budget.unwrap_or(config.budget);
            let counter = counter.counter();
            let records = read_records(&input)?;
            let rows: Vec<serde_json::Value> = records
                .par_iter()
                .map(|r| match slice_function(r, budget, &*counter) {
                    Ok(s) => {
                        let mut v = serde_json::to_value(&s).expect("slice results serialize");
                        v.as_object_mut().expect("struct").insert("id".into(), r.id.clone().into());
                        v
                    }
                    Err(e) => json!({"id": r.id, "budget": budget, "error": e.to_string()}),
                })
                .collect();
            write_jsonl(&mut *output(&out)?, rows)?;
        }

        Command::Prompt { input, prompt_type, setting, pool, splits, split, seed, out } => {
            let seed = seed.unwrap_or(config.seed);
            let records = read_records(&input)?;
            let assignment = splits.as_deref().map(read_assignment).transpose()?;
            let wanted = match split {
                SplitChoice::Train => Some(Split::Train),
                SplitChoice::Valid => Some(Split::Valid),
                SplitChoice::Test => Some(Split::Test),
                SplitChoice::All => None,
            };
            let targets: Vec<&SourceFunction> = records
                .iter()
                .filter(|r| match (&assignment, wanted) {
                    (Some(a), Some(s)) => a.get(&r.id) == Some(s),
                    _ => true,
                })
                .collect();
            let pool_records: Vec<SourceFunction> = match (&pool, &assignment) {
                (Some(path), _) => read_records(path)?,
                (None, Some(a)) => a.select(&records, Split::Train).cloned().collect(),
                (None, None) => Vec::new(),
            };
            let shots = ShotPool::new(&pool_records);
            let bundles: Vec<PromptBundle> = targets
                .par_iter()
                .map(|r| build_prompt(r, prompt_type, setting, &shots, seed).with_context(|| format!("record {:?}", r.id)))
                .collect::<Result<_>>()?;
            write_jsonl(&mut *output(&out)?, &bundles)?;
            eprintln!("{} {setting} {prompt_type} prompts", bundles.len());
        }

        Command::Run { bundles, url, model, concurrency, out } => {
            let mut endpoint = config.endpoint.clone();
            if let Some(url) = url {
                endpoint.url = url;
            }
            if let Some(model) = model {
                endpoint.model = model;
            }
            if let Some(c) = concurrency {
                endpoint.concurrency = c;
            }
            let bundles: Vec<PromptBundle> = read_jsonl(&bundles)?;
            let backend = HttpBackend::from_config(&endpoint);
            let mut sink = output(&out)?;
            let records = eval::run_inference(&bundles, &endpoint, &backend, Some(&mut *sink))?;
            eprintln!("{} replies recorded", records.len());
        }

        Command::Score { predictions, input, csv, out } => {
            let predictions: Vec<InferenceRecord> = read_jsonl(&predictions)?;
            let records = read_records(&input)?;
            let by_id: HashMap<&str, &SourceFunction> = records.iter().map(|r| (r.id.as_str(), r)).collect();
            let mut verdicts = Vec::with_capacity(predictions.len());
            let mut labels = Vec::with_capacity(predictions.len());
            let mut cwes = Vec::with_capacity(predictions.len());
            for p in &predictions {
                let Some(r) = by_id.get(p.id.as_str()) else {
                    bail!(Invalid(format!("prediction for unknown record {:?}", p.id)));
                };
                verdicts.push(p.verdict);
                labels.push(r.label);
                cwes.push(r.primary_cwe().to_owned());
            }
            let report = eval::score(&verdicts, &labels, &cwes)?;
            write_json(&mut *output(&out)?, &report)?;
            if let Some(path) = csv {
                let mut w = create(&path)?;
                report.write_csv(&mut w)?;
            }
        }
    }
    Ok(())
}
