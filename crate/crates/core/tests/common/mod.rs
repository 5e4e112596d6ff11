//! Shared support for the integration suites: fixture loading, a C compiler
//! harness, random program generators and independent oracles.

#![allow(dead_code)]

pub mod criteria;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::NaiveDate;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use vdkit::perturb::TransformKind;
use vdkit::{Label, SourceFunction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// A self-contained C program split into a prelude, the function under test
/// (named `target`) and a `main` that prints results for fixed inputs.
pub struct RunnableFixture {
    pub name: String,
    pub sites: BTreeMap<TransformKind, usize>,
    pub prelude: String,
    pub function: String,
    pub driver: String,
}

impl RunnableFixture {
    pub fn program(&self, function: &str) -> String {
        format!("{}\n{}\n{}\n", self.prelude, function, self.driver)
    }

    pub fn record(&self) -> SourceFunction {
        SourceFunction::new(self.name.clone(), self.function.clone(), Label::NonVulnerable)
    }
}

pub fn runnable_fixtures() -> Vec<RunnableFixture> {
    let dir = fixture_dir().join("runnable");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .expect("runnable fixture directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "c"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).unwrap();
            let header = text.lines().next().unwrap();
            let sites = header
                .trim_start_matches("// sites:")
                .split_whitespace()
                .map(|kv| {
                    let (k, v) = kv.split_once('=').unwrap();
                    (k.parse::<TransformKind>().unwrap(), v.parse::<usize>().unwrap())
                })
                .collect();
            let section = |name: &str| -> String {
                let marker = format!("// ==== {name}\n");
                let start = text.find(&marker).unwrap_or_else(|| panic!("{}: no {name} section", p.display())) + marker.len();
                let end = text[start..].find("// ==== ").map_or(text.len(), |e| start + e);
                text[start..end].trim_end().to_owned()
            };
            RunnableFixture {
                name: p.file_stem().unwrap().to_string_lossy().into_owned(),
                sites,
                prelude: section("prelude"),
                function: section("function"),
                driver: section("driver"),
            }
        })
        .collect()
}

/// The system C compiler, if one answers `--version`.
pub fn c_compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_owned());
    Command::new(&cc).arg("--version").output().ok().filter(|o| o.status.success()).map(|_| cc)
}

/// Compiles `source` in `dir` under `stem` and returns the program's stdout.
pub fn compile_and_run(cc: &str, dir: &Path, stem: &str, source: &str) -> Result<String, String> {
    let src = dir.join(format!("{stem}.c"));
    let bin = dir.join(stem);
    fs::write(&src, source).map_err(|e| e.to_string())?;
    let out = Command::new(cc)
        .args(["-std=c99", "-O0", "-w", "-o"])
        .arg(&bin)
        .arg(&src)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("compile failed:\n{}", String::from_utf8_lossy(&out.stderr)));
    }
    let run = Command::new(&bin).output().map_err(|e| e.to_string())?;
    if !run.status.success() {
        return Err(format!("exited with {}", run.status));
    }
    Ok(String::from_utf8_lossy(&run.stdout).into_owned())
}

pub fn ordinal(n: usize) -> String {
    let suffix = if (11..=13).contains(&(n % 100)) {
        "th"
    } else {
        ["th", "st", "nd", "rd", "th", "th", "th", "th", "th", "th"][n % 10]
    };
    format!("{n}{suffix}")
}

/// A generated straight-line function and the data-flow edges a textbook
/// reaching-definitions pass gives for it:
/// `(target var, target occurrence, source var, source occurrence)`.
pub struct StraightLine {
    pub code: String,
    pub edges: Vec<(String, usize, String, usize)>,
}

struct Emitter {
    tokens: Vec<String>,
    occurrences: HashMap<String, usize>,
}

impl Emitter {
    /// Emits a token; returns its occurrence number among equal tokens.
    fn emit(&mut self, tok: &str) -> usize {
        self.tokens.push(tok.to_owned());
        let n = self.occurrences.entry(tok.to_owned()).or_insert(0);
        *n += 1;
        *n
    }
}

/// Straight-line functions: declarations, plain and compound assignments,
/// increments, call statements and a final return, over integer
/// parameters and locals, with calls nested in expressions.
pub fn straight_line(rng: &mut impl Rng, max_statements: usize) -> StraightLine {
    let mut e = Emitter { tokens: Vec::new(), occurrences: HashMap::new() };
    let mut last_def: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<(String, usize, String, usize)> = Vec::new();

    let params = rng.random_range(0..=3);
    e.emit("int");
    e.emit("f");
    e.emit("(");
    if params == 0 {
        e.emit("void");
    }
    let mut vars: Vec<String> = Vec::new();
    for i in 0..params {
        if i > 0 {
            e.emit(",");
        }
        e.emit("int");
        let name = format!("p{i}");
        let occ = e.emit(&name);
        last_def.insert(name.clone(), occ);
        vars.push(name);
    }
    e.emit(")");
    e.emit("{");

    fn expr(
        rng: &mut impl Rng,
        e: &mut Emitter,
        vars: &[String],
        last_def: &HashMap<String, usize>,
        reads: &mut Vec<(String, usize, usize)>,
        depth: usize,
    ) {
        let leaf = depth == 0 || rng.random_bool(0.4);
        if leaf {
            if !vars.is_empty() && rng.random_bool(0.7) {
                let v = vars.choose(rng).unwrap().clone();
                let occ = e.emit(&v);
                reads.push((v.clone(), occ, last_def[&v]));
            } else {
                e.emit(&rng.random_range(0..100).to_string());
            }
            return;
        }
        match rng.random_range(0..5) {
            0 | 1 => {
                expr(rng, e, vars, last_def, reads, depth - 1);
                e.emit(["+", "-", "*", "/"].choose(rng).unwrap());
                expr(rng, e, vars, last_def, reads, depth - 1);
            }
            2 => {
                e.emit("(");
                expr(rng, e, vars, last_def, reads, depth - 1);
                e.emit(")");
            }
            3 => {
                e.emit("h");
                e.emit("(");
                expr(rng, e, vars, last_def, reads, depth - 1);
                e.emit(")");
            }
            _ => {
                e.emit("-");
                expr(rng, e, vars, last_def, reads, depth - 1);
            }
        }
    }

    let statements = rng.random_range(1..=max_statements);
    let mut locals = 0;
    for s in 0..statements {
        let last = s + 1 == statements;
        let mut reads = Vec::new();
        let choice = if last && rng.random_bool(0.5) { 9 } else { rng.random_range(0..8) };
        match choice {
            // int vK = E;
            0 | 1 => {
                let name = format!("v{locals}");
                locals += 1;
                e.emit("int");
                let occ = e.emit(&name);
                e.emit("=");
                expr(rng, &mut e, &vars, &last_def, &mut reads, 3);
                e.emit(";");
                for (v, _, d) in reads.drain(..) {
                    edges.push((name.clone(), occ, v, d));
                }
                last_def.insert(name.clone(), occ);
                vars.push(name);
            }
            // int vK;
            2 => {
                let name = format!("v{locals}");
                locals += 1;
                e.emit("int");
                let occ = e.emit(&name);
                e.emit(";");
                last_def.insert(name.clone(), occ);
                vars.push(name);
            }
            // X = E;  X op= E;
            3..=5 if !vars.is_empty() => {
                let target = vars.choose(rng).unwrap().clone();
                let occ = e.emit(&target);
                let compound = choice != 3;
                if compound {
                    e.emit(["+=", "-=", "*="].choose(rng).unwrap());
                    edges.push((target.clone(), occ, target.clone(), last_def[&target]));
                } else {
                    e.emit("=");
                }
                expr(rng, &mut e, &vars, &last_def, &mut reads, 3);
                e.emit(";");
                for (v, _, d) in reads.drain(..) {
                    edges.push((target.clone(), occ, v, d));
                }
                last_def.insert(target, occ);
            }
            // X++;
            6 if !vars.is_empty() => {
                let target = vars.choose(rng).unwrap().clone();
                let occ = e.emit(&target);
                e.emit("++");
                e.emit(";");
                edges.push((target.clone(), occ, target.clone(), last_def[&target]));
                last_def.insert(target, occ);
            }
            // return E;
            9 => {
                e.emit("return");
                expr(rng, &mut e, &vars, &last_def, &mut reads, 3);
                e.emit(";");
                for (v, occ, d) in reads.drain(..) {
                    edges.push((v.clone(), occ, v, d));
                }
            }
            // g(E, E);
            _ => {
                e.emit("g");
                e.emit("(");
                expr(rng, &mut e, &vars, &last_def, &mut reads, 2);
                e.emit(",");
                expr(rng, &mut e, &vars, &last_def, &mut reads, 2);
                e.emit(")");
                e.emit(";");
                for (v, occ, d) in reads.drain(..) {
                    edges.push((v.clone(), occ, v, d));
                }
            }
        }
    }
    e.emit("}");

    let mut unique = Vec::new();
    for edge in edges {
        if edge.0 == edge.2 && edge.1 == edge.3 {
            continue;
        }
        if !unique.contains(&edge) {
            unique.push(edge);
        }
    }
    StraightLine { code: e.tokens.join(" "), edges: unique }
}

/// A multi-line C function with nested blocks, loops, calls, array and
/// pointer accesses and string literals; one statement per line.
pub fn random_function(rng: &mut impl Rng, name: &str, statements: usize) -> String {
    struct Gen<'r, R: Rng> {
        rng: &'r mut R,
        lines: Vec<String>,
        vars: Vec<String>,
        next_local: usize,
        budget: usize,
    }

    impl<R: Rng> Gen<'_, R> {
        fn var(&mut self) -> String {
            self.vars.choose(self.rng).unwrap().clone()
        }

        fn expr(&mut self, depth: usize) -> String {
            if depth == 0 || self.rng.random_bool(0.35) {
                return match self.rng.random_range(0..6) {
                    0 => self.rng.random_range(0..64).to_string(),
                    1 => format!("buf[{}]", self.var()),
                    2 => "*p".to_owned(),
                    _ => self.var(),
                };
            }
            match self.rng.random_range(0..5) {
                0 => format!("{} + {}", self.expr(depth - 1), self.expr(depth - 1)),
                1 => format!("{} * {}", self.expr(depth - 1), self.expr(depth - 1)),
                2 => format!("({} - {})", self.expr(depth - 1), self.expr(depth - 1)),
                3 => format!("compute({})", self.expr(depth - 1)),
                _ => format!("{} % 7", self.expr(depth - 1)),
            }
        }

        fn cond(&mut self) -> String {
            let a = self.var();
            let b = self.expr(1);
            let op = ["<", ">", "<=", ">=", "==", "!="].choose(self.rng).unwrap().to_string();
            match self.rng.random_range(0..4) {
                0 => format!("{a} {op} {b} && {} > 0", self.var()),
                1 => format!("{a} {op} {b} || check({})", self.var()),
                _ => format!("{a} {op} {b}"),
            }
        }

        fn block(&mut self, indent: usize, depth: usize) {
            let pad = "    ".repeat(indent);
            let scope = self.vars.len();
            let count = self.rng.random_range(1..=4);
            for _ in 0..count {
                if self.budget == 0 {
                    break;
                }
                self.budget -= 1;
                let roll = self.rng.random_range(0..12);
                match roll {
                    0 | 1 => {
                        let name = format!("t{}", self.next_local);
                        self.next_local += 1;
                        let e = self.expr(2);
                        self.lines.push(format!("{pad}int {name} = {e};"));
                        self.vars.push(name);
                    }
                    2 | 3 => {
                        let v = self.var();
                        let e = self.expr(2);
                        self.lines.push(format!("{pad}{v} = {e};"));
                    }
                    4 => {
                        let i = self.var();
                        let e = self.expr(1);
                        self.lines.push(format!("{pad}buf[{i} % 16] = {e};"));
                    }
                    5 => {
                        let e = self.expr(1);
                        self.lines.push(format!("{pad}*p = {e};"));
                    }
                    6 => {
                        let v = self.var();
                        let text = ["overflow at %d", "value %d", "bad index %d", "ok"][self.rng.random_range(0..4)];
                        self.lines.push(format!("{pad}log_msg(\"{text}\", {v});"));
                    }
                    7 | 8 if depth > 0 => {
                        let c = self.cond();
                        self.lines.push(format!("{pad}if ({c}) {{"));
                        self.block(indent + 1, depth - 1);
                        if self.rng.random_bool(0.4) {
                            self.lines.push(format!("{pad}}} else {{"));
                            self.block(indent + 1, depth - 1);
                        }
                        self.lines.push(format!("{pad}}}"));
                    }
                    9 if depth > 0 => {
                        let c = self.cond();
                        self.lines.push(format!("{pad}while ({c}) {{"));
                        self.block(indent + 1, depth - 1);
                        let v = self.var();
                        self.lines.push(format!("{pad}    {v}++;"));
                        self.lines.push(format!("{pad}}}"));
                    }
                    10 if depth > 0 => {
                        let k = format!("k{}", self.next_local);
                        self.next_local += 1;
                        let bound = self.var();
                        self.lines.push(format!("{pad}for (int {k} = 0; {k} < {bound}; {k}++) {{"));
                        self.vars.push(k);
                        self.block(indent + 1, depth - 1);
                        self.vars.pop();
                        self.lines.push(format!("{pad}}}"));
                    }
                    _ => {
                        let v = self.var();
                        let e = self.expr(1);
                        self.lines.push(format!("{pad}{v} += {e};"));
                    }
                }
            }
            self.vars.truncate(scope);
        }
    }

    let mut g = Gen {
        rng,
        lines: vec![format!("int {name}(int n, int *p, char *buf, const char *s) {{")],
        vars: vec!["n".to_owned()],
        next_local: 0,
        budget: statements,
    };
    g.lines.push("    int acc = 0;".to_owned());
    g.vars.push("acc".to_owned());
    while g.budget > 0 {
        g.block(1, 3);
    }
    g.lines.push("    return acc;".to_owned());
    g.lines.push("}".to_owned());
    g.lines.join("\n")
}

pub const CWE_GROUPS: [&str; 12] = [
    "CWE-119", "CWE-20", "CWE-125", "CWE-787", "CWE-476", "CWE-416", "CWE-190", "CWE-200", "CWE-399", "CWE-362", "CWE-189", "CWE-264",
];

/// A synthetic corpus of `n` records over the twelve CWE groups: patch pairs
/// sharing a commit and date, plus lone non-vulnerable functions whose
/// commits hold at most two records. Code is unique per record.
pub fn synthetic_corpus(rng: &mut impl Rng, n: usize) -> Vec<SourceFunction> {
    let base = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    let mut out: Vec<SourceFunction> = Vec::with_capacity(n);
    let mut commit = 0;
    while out.len() < n {
        commit += 1;
        let weights = [30, 20, 14, 10, 8, 6, 4, 3, 2, 1, 1, 1];
        let total: u32 = weights.iter().sum();
        let mut pick = rng.random_range(0..total);
        let mut group = 0;
        while pick >= weights[group] {
            pick -= weights[group];
            group += 1;
        }
        let cwe = CWE_GROUPS[group];
        let date = base + chrono::Days::new(rng.random_range(0..5000));
        let commit_id = format!("commit{commit:05}");
        let make = |id: String, label: Label, pair: Option<String>| {
            let mut r = SourceFunction::new(id.clone(), format!("int fn_{id}(int x) {{ return x + {}; }}", id.len()), label);
            r.cwe_ids = vec![cwe.to_owned()];
            r.commit_date = Some(date);
            r.commit_id = commit_id.clone();
            r.pair_id = pair;
            r.project = "synthetic".into();
            r
        };
        let room = n - out.len();
        match rng.random_range(0..3) {
            0 | 1 if room >= 2 => {
                let pair = format!("pair{commit:05}");
                out.push(make(format!("{commit_id}_v"), Label::Vulnerable, Some(pair.clone())));
                out.push(make(format!("{commit_id}_n"), Label::NonVulnerable, Some(pair)));
            }
            _ => out.push(make(format!("{commit_id}_u"), Label::NonVulnerable, None)),
        }
    }
    out
}

/// Metrics from raw verdict/label pairs, written from the textbook formulas
/// with abstentions (`None`) counted as negative predictions.
pub struct OracleMetrics {
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tnr: Option<f64>,
}

pub fn oracle_metrics(pairs: &[(Option<bool>, bool)]) -> OracleMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0f64, 0f64, 0f64, 0f64);
    for &(predicted, actual) in pairs {
        let predicted = predicted.unwrap_or(false);
        match (predicted, actual) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { None } else { Some(a / b) };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let tnr = div(tn, tn + fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r != 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let balanced_accuracy = match (recall, tnr) {
        (Some(r), Some(t)) => Some((r + t) / 2.0),
        _ => None,
    };
    OracleMetrics {
        accuracy: div(tp + tn, tp + tn + fp + fn_),
        balanced_accuracy,
        f1,
        precision,
        recall,
        tnr,
    }
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}
