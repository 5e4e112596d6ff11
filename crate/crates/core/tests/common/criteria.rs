//! One function per acceptance criterion. Each panics on failure and
//! otherwise returns what it measured; corpus-bound criteria return `Skip`
//! when their data is not configured.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Instant;

use rand::Rng;
use vdkit::dataset::{audit_leakage, audit_truncation, ingest, read_corpus, split_by_cwe_time, write_corpus, Split, SplitRatios};
use vdkit::eval::{run_inference, score, EndpointConfig, HttpBackend, Verdict};
use vdkit::parse::{parse_code, TokenOptions};
use vdkit::perturb::{abstract_function, generate_variants, normalize, NormalizationRule, TransformKind};
use vdkit::prompt::{build_prompt, PromptSetting, PromptType, ShotPool};
use vdkit::slice::{slice_function, LexCounter, SliceError, SubwordApprox, TokenCounter};
use vdkit::views::{data_flow_view, flatten_node};
use vdkit::{AstNode, Label, Language, SourceFunction};

use super::mock::{last_user_message, MockServer};
use super::*;

pub enum Outcome {
    Pass(String),
    Skip(String),
}

pub fn flattened_ast_golden() -> Outcome {
    let start = Instant::now();
    let tree = parse_code("void f(){c=a+b;}", Language::C).unwrap();
    let stmt = tree.function().preorder().find(|n| n.kind == "expression_statement").unwrap();
    let flat = flatten_node(&tree, stmt).text;
    let golden = "<AST#expression_statement#Left> <AST#assignment_expression#Left> c = \
                  <AST#binary_expression#Left> a + b <AST#binary_expression#Right> \
                  <AST#assignment_expression#Right> ; <AST#expression_statement#Right>";
    assert_eq!(flat, golden);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    Outcome::Pass(format!("exact match in {elapsed:.2?}"))
}

pub fn data_flow_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0x5eed);
    let mut edges_seen = 0;
    for case in 0..200 {
        let prog = straight_line(&mut r, 15);
        let tree = parse_code(&prog.code, Language::C).unwrap();
        assert!(!tree.has_errors(), "case {case} does not parse: {}", prog.code);
        let tokens = tree.tokens(TokenOptions::default());
        let (edges, text) = data_flow_view(&tree, &tokens);
        let got: Vec<_> = edges
            .iter()
            .map(|e| (e.var.clone(), e.use_occurrence, e.src_var.clone(), e.def_occurrence))
            .collect();
        assert_eq!(got, prog.edges, "case {case}: {}", prog.code);

        let expected_text = if prog.edges.is_empty() {
            "No data flow.".to_owned()
        } else {
            let parts: Vec<String> = prog
                .edges
                .iter()
                .map(|(v, u, s, d)| format!("The {} {v} comes from the {} {s}", ordinal(*u), ordinal(*d)))
                .collect();
            format!("{}.", parts.join("; "))
        };
        assert_eq!(text, expected_text, "case {case}");
        edges_seen += prog.edges.len();
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    Outcome::Pass(format!("200 functions, {edges_seen} edges, {elapsed:.2?}"))
}

pub fn transform_suite() -> Outcome {
    let fixtures = runnable_fixtures();
    assert!(fixtures.len() >= 30, "only {} runnable fixtures", fixtures.len());
    let mut total = 0;
    for fx in &fixtures {
        let variants = generate_variants(&fx.record(), &TransformKind::ALL).unwrap();
        let expected: usize = fx.sites.values().sum();
        assert_eq!(variants.len(), expected, "{}: fan-out", fx.name);
        for v in &variants {
            let tree = parse_code(&v.code, Language::C).unwrap();
            assert!(!tree.has_errors(), "{} {} #{} reparses with errors:\n{}", fx.name, v.kind, v.site_index, v.code);
        }
        total += variants.len();
    }
    let Some(cc) = c_compiler() else {
        return Outcome::Pass(format!(
            "{} fixtures, {total} variants reparse, fan-out exact; no C compiler so execution not compared",
            fixtures.len()
        ));
    };
    let dir = tempfile::tempdir().unwrap();
    let failures: Vec<String> = thread::scope(|s| {
        let handles: Vec<_> = fixtures
            .iter()
            .map(|fx| {
                let (cc, dir) = (cc.as_str(), dir.path());
                s.spawn(move || {
                    let expected = match compile_and_run(cc, dir, &fx.name, &fx.program(&fx.function)) {
                        Ok(out) => out,
                        Err(e) => return vec![format!("{} original: {e}", fx.name)],
                    };
                    let mut failures = Vec::new();
                    if expected.trim().is_empty() {
                        failures.push(format!("{}: driver prints nothing", fx.name));
                    }
                    for v in generate_variants(&fx.record(), &TransformKind::ALL).unwrap() {
                        let stem = format!("{}_{}_{}", fx.name, v.kind, v.site_index);
                        match compile_and_run(cc, dir, &stem, &fx.program(&v.code)) {
                            Ok(out) if out == expected => {}
                            Ok(out) => failures.push(format!("{stem}: output differs\n{}\n--- got\n{out}--- want\n{expected}", v.code)),
                            Err(e) => failures.push(format!("{stem}: {e}\n{}", v.code)),
                        }
                    }
                    failures
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert!(failures.is_empty(), "{}", failures.join("\n\n"));
    Outcome::Pass(format!(
        "{} fixtures, {total} variants reparse and match the original's output; fan-out exact",
        fixtures.len()
    ))
}

fn corpus_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| !p.as_os_str().is_empty())
}

fn counter_from_env() -> (Box<dyn TokenCounter>, &'static str) {
    match std::env::var("VDKIT_COUNTER").as_deref() {
        Ok("lex") => (Box::new(LexCounter), "lex"),
        _ => (Box::new(SubwordApprox::default()), "subword"),
    }
}

pub const PAPER_VARIANTS: f64 = 48_182.0;
pub const VARIANT_TOLERANCE: f64 = 0.03;

pub fn corpus_variant_count() -> Outcome {
    let Some(path) = corpus_path("VDKIT_TEST_SET") else {
        return Outcome::Skip("set VDKIT_TEST_SET to the 23,144-function test split (JSONL)".into());
    };
    let records = read_corpus(&path).unwrap();
    let workers = thread::available_parallelism().map_or(4, |n| n.get());
    let chunk = records.len().div_ceil(workers).max(1);
    let (variants, failed) = thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut n = 0;
                    let mut failed = 0;
                    for r in part {
                        match generate_variants(r, &TransformKind::ALL) {
                            Ok(v) => n += v.len(),
                            Err(_) => failed += 1,
                        }
                    }
                    (n, failed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    });
    let deviation = (variants as f64 - PAPER_VARIANTS) / PAPER_VARIANTS;
    assert!(
        deviation.abs() <= VARIANT_TOLERANCE,
        "{variants} variants from {} functions ({failed} unparseable), {:+.1}% from 48,182",
        records.len(),
        deviation * 100.0
    );
    Outcome::Pass(format!("{variants} variants from {} functions ({:+.1}%)", records.len(), deviation * 100.0))
}

pub const PAPER_TRUNCATION_SHARE: f64 = 0.27;
pub const TRUNCATION_TOLERANCE: f64 = 0.02;

pub fn corpus_truncation_audit() -> Outcome {
    let Some(path) = corpus_path("VDKIT_PRIMEVUL_PAIRS") else {
        return Outcome::Skip("set VDKIT_PRIMEVUL_PAIRS to the paired corpus (JSONL)".into());
    };
    let records = read_corpus(&path).unwrap();
    let (counter, name) = counter_from_env();
    let report = audit_truncation(&records, 512, counter.as_ref());
    let pairs = report.totals.pairs;
    assert!(pairs > 0, "no complete pairs in {}", path.display());
    let share = report.truncation_collisions.len() as f64 / pairs as f64;
    assert!(
        (share - PAPER_TRUNCATION_SHARE).abs() <= TRUNCATION_TOLERANCE,
        "{} of {pairs} pairs ({:.1}%) collide under the {name} counter",
        report.truncation_collisions.len(),
        share * 100.0
    );
    Outcome::Pass(format!(
        "{} of {pairs} pairs ({:.1}%) under the {name} counter",
        report.truncation_collisions.len(),
        share * 100.0
    ))
}

pub const SLICE_BUDGETS: [usize; 4] = [64, 128, 256, 512];

/// 500 generated functions sliced at each budget; returns how many exceed
/// the largest budget whole.
pub fn slicing_budget_with(counter: &dyn TokenCounter) -> usize {
    let mut r = rng(2024);
    let mut over_budget = 0;
    for i in 0..500 {
        let statements = r.random_range(5..90);
        let code = random_function(&mut r, &format!("fn{i}"), statements);
        let func = SourceFunction::new(format!("s{i}"), code, Label::NonVulnerable);
        let original_lines: Vec<&str> = func.code.lines().collect();
        let mut previous: Option<BTreeSet<usize>> = None;
        for budget in SLICE_BUDGETS {
            let result = match slice_function(&func, budget, counter) {
                Ok(r) => r,
                Err(SliceError::EmptySlice) => {
                    assert!(previous.as_ref().is_none_or(BTreeSet::is_empty), "{}: empty after non-empty", func.id);
                    previous = Some(BTreeSet::new());
                    continue;
                }
                Err(e) => panic!("{}: {e}", func.id),
            };
            assert!(result.token_count <= budget, "{} at {budget}: {}", func.id, result.token_count);
            assert_eq!(counter.count(&result.sliced_code), result.token_count, "{}", func.id);
            assert_eq!(slice_function(&func, budget, counter).unwrap(), result, "{} is not deterministic", func.id);

            let rendered: Vec<&str> = result.selected_lines.iter().map(|&l| original_lines[l - 1]).collect();
            assert_eq!(result.sliced_code, rendered.join("\n"), "{}", func.id);
            if let Some(prev) = &previous {
                assert!(prev.is_subset(&result.selected_lines), "{} shrinks at {budget}", func.id);
            }
            if budget == 512 && counter.count(&func.code) > budget {
                over_budget += 1;
                assert!(result.selected_lines.len() < original_lines.len());
            }
            previous = Some(result.selected_lines);
        }
    }
    // The generator must exercise the budget for the property to mean much.
    assert!(over_budget >= 50, "only {over_budget} functions exceed the budget");
    over_budget
}

pub fn slicing_budget() -> Outcome {
    let over = slicing_budget_with(&LexCounter);
    Outcome::Pass(format!("500 functions x 4 budgets, {over} over 512 tokens before slicing"))
}

pub fn partition() -> Outcome {
    let records = synthetic_corpus(&mut rng(99), 1000);
    let start = Instant::now();
    let assignment = split_by_cwe_time(&records, SplitRatios::default()).unwrap();
    let report = audit_leakage(&assignment, &records);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    assert!(report.case1_violations.is_empty(), "{:?}", report.case1_violations);
    assert!(report.case2_violations.is_empty(), "{:?}", report.case2_violations);
    assert_eq!(assignment.len(), records.len());

    let mut groups: HashMap<&str, Vec<&SourceFunction>> = HashMap::new();
    for r in &records {
        groups.entry(r.cwe_ids[0].as_str()).or_default().push(r);
    }
    assert_eq!(groups.len(), 12);
    for (group, members) in &groups {
        let n = members.len();
        let count = |s: Split| members.iter().filter(|r| assignment.get(&r.id) == Some(s)).count() as i64;
        let (train, valid) = (count(Split::Train), count(Split::Valid));
        let cut1 = (n as f64 * 0.8).round() as i64;
        let cut2 = (n as f64 * 0.9).round() as i64;
        assert!((train - cut1).abs() <= 1, "{group}: train {train} vs {cut1} of {n}");
        // Groups of two or more always keep a test record.
        let cut2 = if n >= 2 { cut2.min(n as i64 - 1) } else { cut2 };
        assert!((train + valid - cut2).abs() <= 1, "{group}: train+valid {} vs {cut2} of {n}", train + valid);

        let dates = |s: Split| {
            members.iter().filter(|r| assignment.get(&r.id) == Some(s)).map(|r| r.commit_date.unwrap()).collect::<Vec<_>>()
        };
        if let (Some(last_train), Some(first_test)) = (dates(Split::Train).into_iter().max(), dates(Split::Test).into_iter().min()) {
            assert!(last_train <= first_test, "{group}: test record from {first_test} predates training up to {last_train}");
        }
    }
    Outcome::Pass(format!("1000 records, 12 groups, no leakage, {elapsed:.2?}"))
}

const METRIC_TOLERANCE: f64 = 1e-12;

fn verdict_of(v: Option<bool>) -> Verdict {
    match v {
        Some(true) => Verdict::Vulnerable,
        Some(false) => Verdict::NonVulnerable,
        None => Verdict::Abstain,
    }
}

fn compare_metrics(pairs: &[(Option<bool>, bool)]) {
    let verdicts: Vec<Verdict> = pairs.iter().map(|p| verdict_of(p.0)).collect();
    let labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Vulnerable } else { Label::NonVulnerable }).collect();
    let cwes = vec!["CWE-20".to_owned(); pairs.len()];
    let got = score(&verdicts, &labels, &cwes).unwrap();
    let want = oracle_metrics(pairs);
    for (name, g, w) in [
        ("accuracy", got.accuracy, want.accuracy),
        ("balanced_accuracy", got.balanced_accuracy, want.balanced_accuracy),
        ("f1", got.f1, want.f1),
        ("precision", got.precision, want.precision),
        ("recall", got.recall, want.recall),
        ("tnr", got.tnr, want.tnr),
    ] {
        assert!(close(g, w, METRIC_TOLERANCE), "{name}: got {g:?}, oracle {w:?}");
    }
}

pub const WORKED_VULNERABLE: usize = 694;
pub const WORKED_NON_VULNERABLE: usize = 22_450;

pub fn metrics_equivalence() -> Outcome {
    let mut r = rng(77);
    for _ in 0..1000 {
        let n = r.random_range(1..300);
        // Skewed sets hit the undefined-metric corners.
        let p_vulnerable = [0.0, 0.03, 0.5, 1.0][r.random_range(0..4)];
        let p_abstain = [0.0, 0.1][r.random_range(0..2)];
        let pairs: Vec<(Option<bool>, bool)> = (0..n)
            .map(|_| {
                let actual = r.random_bool(p_vulnerable);
                let verdict = if r.random_bool(p_abstain) { None } else { Some(r.random_bool(0.5)) };
                (verdict, actual)
            })
            .collect();
        compare_metrics(&pairs);
    }

    // Worked class counts: any synthetic verdicts must satisfy
    // balanced accuracy = (recall + tnr) / 2 with the fixed class sizes.
    let mut worked = Vec::with_capacity(WORKED_VULNERABLE + WORKED_NON_VULNERABLE);
    worked.extend((0..WORKED_VULNERABLE).map(|_| (Some(r.random_bool(0.6)), true)));
    worked.extend((0..WORKED_NON_VULNERABLE).map(|_| (Some(r.random_bool(0.3)), false)));
    compare_metrics(&worked);
    let verdicts: Vec<Verdict> = worked.iter().map(|p| verdict_of(p.0)).collect();
    let labels: Vec<Label> = worked.iter().map(|p| if p.1 { Label::Vulnerable } else { Label::NonVulnerable }).collect();
    let report = score(&verdicts, &labels, &vec![String::new(); worked.len()]).unwrap();
    let c = report.counts;
    assert_eq!(c.tp + c.fn_, WORKED_VULNERABLE);
    assert_eq!(c.tn + c.fp, WORKED_NON_VULNERABLE);
    let identity = (c.tp as f64 / WORKED_VULNERABLE as f64 + c.tn as f64 / WORKED_NON_VULNERABLE as f64) / 2.0;
    assert!((report.balanced_accuracy.unwrap() - identity).abs() <= METRIC_TOLERANCE);
    Outcome::Pass(format!(
        "1000 random sets within 1e-12; worked counts give balanced accuracy {:.4}",
        report.balanced_accuracy.unwrap()
    ))
}

/// Kind, field name and child count agree everywhere.
fn isomorphic(a: &AstNode, b: &AstNode) -> bool {
    a.kind == b.kind
        && a.field == b.field
        && a.children.len() == b.children.len()
        && a.children.iter().zip(&b.children).all(|(x, y)| isomorphic(x, y))
}

pub fn abstraction_corpus() -> Vec<SourceFunction> {
    let mut out: Vec<SourceFunction> = runnable_fixtures().iter().map(|f| f.record()).collect();
    let mut r = rng(100);
    let mut i = 0;
    while out.len() < 100 {
        let statements = r.random_range(3..30);
        out.push(SourceFunction::new(format!("gen{i}"), random_function(&mut r, &format!("gen{i}"), statements), Label::NonVulnerable));
        i += 1;
    }
    out
}

pub fn abstraction_shape() -> Outcome {
    let corpus = abstraction_corpus();
    let mut renamed = 0;
    for func in &corpus {
        let (code, map) = abstract_function(func).unwrap();
        let before = parse_code(&func.code, func.language).unwrap();
        let after = parse_code(&code, func.language).unwrap();
        assert!(isomorphic(before.root(), after.root()), "{}: shape changed\n{code}", func.id);

        // Token-by-token: every changed token is renamed consistently, and no
        // placeholder stands for two originals.
        let (ta, tb) = (before.tokens(TokenOptions::default()), after.tokens(TokenOptions::default()));
        assert_eq!(ta.len(), tb.len(), "{}", func.id);
        let mut forward: HashMap<&str, &str> = HashMap::new();
        let mut backward: HashMap<&str, &str> = HashMap::new();
        for (x, y) in ta.iter().zip(&tb) {
            if x.text == y.text {
                continue;
            }
            let placeholder = map.get(&x.text).unwrap_or_else(|| panic!("{}: {} changed but is unmapped", func.id, x.text));
            // Literals keep their encoding prefix and quotes around the placeholder.
            let expected = match x.text.find('"') {
                Some(q) if x.kind == "string_literal" => format!("{}\"{placeholder}\"", &x.text[..q]),
                _ => placeholder.to_owned(),
            };
            assert_eq!(expected, y.text, "{}: {}", func.id, x.text);
            assert_eq!(*forward.entry(&x.text).or_insert(&y.text), y.text, "{}", func.id);
            assert_eq!(*backward.entry(&y.text).or_insert(&x.text), x.text, "{}: {} is not injective", func.id, y.text);
        }
        assert!(map.is_injective(), "{}", func.id);
        let placeholders: BTreeSet<&str> = map.entries.iter().map(|e| e.abstracted.as_str()).collect();
        assert_eq!(placeholders.len(), map.len(), "{}", func.id);
        renamed += map.len();
    }
    Outcome::Pass(format!("{} functions, {renamed} entities renamed", corpus.len()))
}

pub fn normalization_snippets() -> Vec<String> {
    let text = fs::read_to_string(fixture_dir().join("normalization_snippets.txt")).unwrap();
    text.split("\n// ----\n").map(|s| s.trim_end_matches('\n').to_owned()).collect()
}

pub fn normalization() -> Outcome {
    let snippets = normalization_snippets();
    assert_eq!(snippets.len(), 50);
    for (i, s) in snippets.iter().enumerate() {
        let outputs: Vec<String> = NormalizationRule::ALL.iter().map(|&rule| normalize(s, rule)).collect();
        for (&rule, once) in NormalizationRule::ALL.iter().zip(&outputs) {
            assert_eq!(&normalize(once, rule), once, "snippet {i}: {rule} is not idempotent");
        }
        for a in 0..outputs.len() {
            for b in a + 1..outputs.len() {
                assert_ne!(
                    outputs[a], outputs[b],
                    "snippet {i}: {} and {} agree",
                    NormalizationRule::ALL[a], NormalizationRule::ALL[b]
                );
            }
        }
    }
    Outcome::Pass("50 snippets, 3 rules idempotent and pairwise distinct".into())
}

/// ingest, split, prompt, run against a local endpoint and score; returns
/// the inference log and the metrics CSV.
fn end_to_end_once(dir: &std::path::Path) -> (Vec<u8>, String) {
    let mut records = synthetic_corpus(&mut rng(8), 120);
    for r in &mut records {
        let name = format!("f_{}", r.id);
        r.code = match (r.label, r.pair_id.is_some()) {
            (Label::Vulnerable, _) => format!("void {name}(char *d, const char *s, int n) {{\n    memcpy(d, s, n);\n    d[n] = 0;\n}}"),
            (Label::NonVulnerable, true) => format!(
                "void {name}(char *d, const char *s, int n) {{\n    if (n > 15)\n        n = 15;\n    memcpy(d, s, n);\n    d[n] = 0;\n}}"
            ),
            (Label::NonVulnerable, false) => format!("int {name}(int x) {{\n    return x * 2;\n}}"),
        };
    }
    let input = dir.join("corpus.jsonl");
    write_corpus(&input, &records).unwrap();

    let (records, report) = ingest(&input).unwrap();
    assert!(report.is_empty(), "{:?}", report.rejections);
    let assignment = split_by_cwe_time(&records, SplitRatios::default()).unwrap();
    assert!(audit_leakage(&assignment, &records).passed());
    let train: Vec<SourceFunction> = assignment.select(&records, Split::Train).cloned().collect();
    let test: Vec<&SourceFunction> = assignment.select(&records, Split::Test).collect();
    assert!(!test.is_empty());
    let pool = ShotPool::new(&train);
    let bundles: Vec<_> = test
        .iter()
        .map(|r| build_prompt(r, PromptType::DataFlow, PromptSetting::FewShot, &pool, 7).unwrap())
        .collect();

    let server = MockServer::start(|request| {
        if last_user_message(request).contains("if (n > 15)") { "No." } else { "Yes, it is vulnerable." }.to_owned()
    });
    let config = EndpointConfig {
        url: server.url,
        backoff_ms: 1,
        concurrency: 3,
        ..EndpointConfig::default()
    };
    let backend = HttpBackend::from_config(&config);
    let mut log = Vec::new();
    let results = run_inference(&bundles, &config, &backend, Some(&mut log)).unwrap();
    assert_eq!(results.len(), bundles.len());
    assert!(results.iter().any(|r| r.attempts > 1), "the retry path was never taken");

    let verdicts: Vec<Verdict> = results.iter().map(|r| r.verdict).collect();
    let labels: Vec<Label> = test.iter().map(|r| r.label).collect();
    let cwes: Vec<String> = test.iter().map(|r| r.primary_cwe().to_owned()).collect();
    let metrics = score(&verdicts, &labels, &cwes).unwrap();
    let mut csv = Vec::new();
    metrics.write_csv(&mut csv).unwrap();
    (log, String::from_utf8(csv).unwrap())
}

pub fn mock_end_to_end() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = end_to_end_once(a.path());
    let second = end_to_end_once(b.path());
    assert_eq!(first.0, second.0, "inference logs differ between runs");
    assert_eq!(first.1, second.1, "metrics differ between runs");
    let requests = first.0.iter().filter(|&&b| b == b'\n').count();
    let accuracy = first.1.lines().find(|l| l.starts_with("accuracy,")).unwrap_or("accuracy,").to_owned();
    Outcome::Pass(format!("{requests} requests, identical logs and metrics across runs ({accuracy})"))
}
