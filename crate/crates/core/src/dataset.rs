//! Corpus ingestion, leakage-free partitioning, training-set balancing and
//! audits.
//!
//! The corpus is line-delimited JSON, one [`SourceFunction`] per line.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parse::{parse_function, Label, SourceFunction};
use crate::perturb::normalize::{normalize, NormalizationRule};
use crate::slice::TokenCounter;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("record {0:?} has no commit_date")]
    MissingDate(String),
    #[error("invalid split ratios {0:?}")]
    InvalidRatios(String),
    #[error("the training split has no vulnerable records")]
    NoVulnerableTraining,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectionReason {
    /// The line is not a valid record.
    Format { message: String },
    ParseFailure { message: String },
    /// Two members of one patch pair carry the same label; the whole pair goes.
    PairLabelConflict { pair_id: String },
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line in the input.
    pub line: usize,
    pub id: Option<String>,
    pub reason: RejectionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub accepted: usize,
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.rejections.is_empty()
    }

    /// Rejection counts keyed by reason kind.
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejections {
            let key = match r.reason {
                RejectionReason::Format { .. } => "format",
                RejectionReason::ParseFailure { .. } => "parse_failure",
                RejectionReason::PairLabelConflict { .. } => "pair_label_conflict",
                RejectionReason::DuplicateId => "duplicate_id",
            };
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_owned(), source }
}

pub fn ingest(path: &Path) -> Result<(Vec<SourceFunction>, RejectionReport), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    ingest_reader(BufReader::new(file)).map_err(io_err(path))
}

/// Reads records, dropping malformed lines, unparseable functions, repeated
/// ids and patch pairs whose members share a label.
pub fn ingest_reader(reader: impl BufRead) -> io::Result<(Vec<SourceFunction>, RejectionReport)> {
    let mut report = RejectionReport::default();
    let mut kept: Vec<(usize, SourceFunction)> = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SourceFunction = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("line {line_no}: {e}");
                report.rejections.push(Rejection {
                    line: line_no,
                    id: None,
                    reason: RejectionReason::Format { message: e.to_string() },
                });
                continue;
            }
        };
        if let Err(e) = parse_function(&record) {
            log::warn!("line {line_no}: record {:?}: {e}", record.id);
            report.rejections.push(Rejection {
                line: line_no,
                id: Some(record.id),
                reason: RejectionReason::ParseFailure { message: e.to_string() },
            });
            continue;
        }
        if !ids.insert(record.id.clone()) {
            log::warn!("line {line_no}: duplicate id {:?}", record.id);
            report.rejections.push(Rejection {
                line: line_no,
                id: Some(record.id),
                reason: RejectionReason::DuplicateId,
            });
            continue;
        }
        kept.push((line_no, record));
    }

    let mut labels_by_pair: HashMap<&str, Vec<Label>> = HashMap::new();
    for (_, r) in &kept {
        if let Some(p) = &r.pair_id {
            labels_by_pair.entry(p).or_default().push(r.label);
        }
    }
    let conflicted: HashSet<String> = labels_by_pair
        .into_iter()
        .filter(|(_, labels)| {
            let vulnerable = labels.iter().filter(|l| l.is_vulnerable()).count();
            vulnerable > 1 || labels.len() - vulnerable > 1
        })
        .map(|(p, _)| p.to_owned())
        .collect();

    let mut records = Vec::with_capacity(kept.len());
    for (line, r) in kept {
        match r.pair_id.as_ref().filter(|p| conflicted.contains(*p)) {
            Some(pair_id) => {
                log::warn!("line {line}: pair {pair_id:?} has members sharing a label");
                report.rejections.push(Rejection {
                    line,
                    id: Some(r.id.clone()),
                    reason: RejectionReason::PairLabelConflict { pair_id: pair_id.clone() },
                });
            }
            None => records.push(r),
        }
    }
    report.rejections.sort_by_key(|r| r.line);
    report.accepted = records.len();
    Ok((records, report))
}

pub fn read_corpus(path: &Path) -> Result<Vec<SourceFunction>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_corpus<'a>(path: &Path, records: impl IntoIterator<Item = &'a SourceFunction>) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, records).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_records<'a>(w: &mut impl Write, records: impl IntoIterator<Item = &'a SourceFunction>) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Relative sizes of train, valid and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl SplitRatios {
    pub fn total(&self) -> u32 {
        self.train + self.valid + self.test
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 8, valid: 1, test: 1 }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.valid, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, DatasetError> {
        let bad = || DatasetError::InvalidRatios(s.to_owned());
        let parts: Vec<u32> = s
            .split([':', ',', '/'])
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [train, valid, test] if train > 0 && train + valid + test > 0 => Ok(SplitRatios { train, valid, test }),
            _ => Err(bad()),
        }
    }
}

/// Record id to split, for every accepted record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignments.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in self.assignments.values() {
            *out.entry(*s).or_insert(0) += 1;
        }
        out
    }

    /// Records in `split`, in input order.
    pub fn select<'a>(&'a self, records: &'a [SourceFunction], split: Split) -> impl Iterator<Item = &'a SourceFunction> + 'a {
        records.iter().filter(move |r| self.get(&r.id) == Some(split))
    }
}

/// Records linked by a shared commit or patch pair never end up apart.
fn clusters(records: &[SourceFunction]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..records.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut first_by_key: HashMap<(u8, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let keys = [(0u8, r.commit_id.as_str()), (1u8, r.pair_id.as_deref().unwrap_or(""))];
        for key in keys.into_iter().filter(|k| !k.1.is_empty()) {
            match first_by_key.get(&key) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    first_by_key.insert(key, i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..records.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Target (train, valid) counts for a group of `n`; the rest is test. Any
/// group of two or more keeps at least one test record.
pub fn group_targets(n: usize, ratios: SplitRatios) -> (usize, usize) {
    // Round the cut points rather than the sizes so errors do not accumulate.
    let total = f64::from(ratios.total());
    let cut = |share: u32| (((n as f64) * f64::from(share) / total).round() as usize).min(n);
    let mut train = cut(ratios.train);
    let mut valid = cut(ratios.train + ratios.valid) - train;
    if n >= 2 && train + valid == n && ratios.test > 0 {
        if valid > 0 {
            valid -= 1;
        } else {
            train -= 1;
        }
    }
    (train, valid)
}

/// Groups records by primary CWE, orders each group by
/// `(commit_date, commit_id, id)` and cuts it by `ratios`. Records that share
/// a commit or pair move together; a cluster straddling a cut goes to the
/// earlier split.
pub fn split_by_cwe_time(records: &[SourceFunction], ratios: SplitRatios) -> Result<SplitAssignment, DatasetError> {
    if ratios.train == 0 || ratios.total() == 0 {
        return Err(DatasetError::InvalidRatios(ratios.to_string()));
    }
    if let Some(r) = records.iter().find(|r| r.commit_date.is_none()) {
        return Err(DatasetError::MissingDate(r.id.clone()));
    }
    let sort_key = |i: usize| {
        let r = &records[i];
        (r.commit_date, r.commit_id.as_str(), r.id.as_str())
    };

    let mut by_group: BTreeMap<&str, Vec<Vec<usize>>> = BTreeMap::new();
    for mut cluster in clusters(records) {
        cluster.sort_by_key(|&i| sort_key(i));
        let keyed = cluster
            .iter()
            .copied()
            .find(|&i| records[i].label.is_vulnerable())
            .unwrap_or(cluster[0]);
        by_group.entry(records[keyed].primary_cwe()).or_default().push(cluster);
    }

    let mut assignment = SplitAssignment::default();
    for clusters in by_group.values_mut() {
        clusters.sort_by_key(|c| sort_key(c[0]));
        let n: usize = clusters.iter().map(Vec::len).sum();
        let (train, valid) = group_targets(n, ratios);
        let mut before = 0;
        for cluster in clusters.iter() {
            let split = if before < train {
                Split::Train
            } else if before < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            for &i in cluster {
                assignment.assignments.insert(records[i].id.clone(), split);
            }
            before += cluster.len();
        }
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancedTraining {
    /// Kept training ids, in input order.
    pub ids: Vec<String>,
    pub vulnerable: usize,
    pub non_vulnerable: usize,
    /// Fewer negatives than positives were available; all were kept.
    pub insufficient_negatives: bool,
}

/// Keeps every vulnerable training record and an equal number of
/// non-vulnerable ones drawn without replacement.
pub fn balance_training(assignment: &SplitAssignment, records: &[SourceFunction], seed: u64) -> Result<BalancedTraining, DatasetError> {
    let train: Vec<&SourceFunction> = assignment.select(records, Split::Train).collect();
    let vulnerable = train.iter().filter(|r| r.label.is_vulnerable()).count();
    if vulnerable == 0 {
        return Err(DatasetError::NoVulnerableTraining);
    }
    let negatives: Vec<usize> = (0..train.len()).filter(|&i| !train[i].label.is_vulnerable()).collect();
    let insufficient = negatives.len() < vulnerable;
    let mut keep: HashSet<usize> = (0..train.len()).filter(|&i| train[i].label.is_vulnerable()).collect();
    if insufficient {
        log::warn!(
            "only {} non-vulnerable training records for {} vulnerable ones; keeping all",
            negatives.len(),
            vulnerable
        );
        keep.extend(&negatives);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        keep.extend(sample(&mut rng, negatives.len(), vulnerable).into_iter().map(|k| negatives[k]));
    }
    let ids: Vec<String> = (0..train.len()).filter(|i| keep.contains(i)).map(|i| train[i].id.clone()).collect();
    Ok(BalancedTraining {
        non_vulnerable: ids.len() - vulnerable,
        vulnerable,
        ids,
        insufficient_negatives: insufficient,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTotals {
    pub records: usize,
    pub pairs: usize,
    pub commits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Pair ids whose members sit in different splits.
    pub case1_violations: Vec<String>,
    /// Commit ids whose functions sit in different splits.
    pub case2_violations: Vec<String>,
    /// Records with equal whitespace-normalized code in different splits.
    pub duplicate_hash_violations: Vec<(String, String)>,
    /// Pair ids whose members are identical after truncation.
    pub truncation_collisions: Vec<String>,
    pub totals: AuditTotals,
    pub ratios: BTreeMap<String, f64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.case1_violations.is_empty()
            && self.case2_violations.is_empty()
            && self.duplicate_hash_violations.is_empty()
            && self.truncation_collisions.is_empty()
    }

    /// Folds in the findings of another audit over the same records.
    pub fn merge(mut self, other: AuditReport) -> AuditReport {
        self.case1_violations.extend(other.case1_violations);
        self.case2_violations.extend(other.case2_violations);
        self.duplicate_hash_violations.extend(other.duplicate_hash_violations);
        self.truncation_collisions.extend(other.truncation_collisions);
        self.totals.records = self.totals.records.max(other.totals.records);
        self.totals.pairs = self.totals.pairs.max(other.totals.pairs);
        self.totals.commits = self.totals.commits.max(other.totals.commits);
        self.ratios.extend(other.ratios);
        self
    }

    fn set_ratio(&mut self, name: &str, count: usize, total: usize) {
        let ratio = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        self.ratios.insert(name.to_owned(), ratio);
    }
}

pub fn code_hash(code: &str) -> String {
    Sha256::digest(normalize(code, NormalizationRule::CodexGlueCleaner).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Finds pairs and commits spread over several splits, and formatting-only
/// clones across splits. Records without an assignment are ignored.
pub fn audit_leakage(assignment: &SplitAssignment, records: &[SourceFunction]) -> AuditReport {
    let assigned: Vec<(&SourceFunction, Split)> = records
        .iter()
        .filter_map(|r| assignment.get(&r.id).map(|s| (r, s)))
        .collect();

    let mut pairs: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut commits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut hashes: HashMap<String, Vec<(&str, Split)>> = HashMap::new();
    let mut hash_order: Vec<String> = Vec::new();
    for &(r, split) in &assigned {
        if let Some(p) = &r.pair_id {
            pairs.entry(p).or_default().insert(split);
        }
        if !r.commit_id.is_empty() {
            commits.entry(&r.commit_id).or_default().insert(split);
        }
        let h = code_hash(&r.code);
        let entry = hashes.entry(h.clone()).or_default();
        if entry.is_empty() {
            hash_order.push(h);
        }
        entry.push((&r.id, split));
    }

    let spread = |m: &BTreeMap<&str, BTreeSet<Split>>| -> Vec<String> {
        m.iter().filter(|(_, s)| s.len() > 1).map(|(k, _)| (*k).to_owned()).collect()
    };
    let mut duplicates = Vec::new();
    for h in &hash_order {
        let members = &hashes[h];
        let (first_id, first_split) = members[0];
        for &(id, split) in &members[1..] {
            if split != first_split {
                duplicates.push((first_id.to_owned(), id.to_owned()));
            }
        }
    }

    let mut report = AuditReport {
        case1_violations: spread(&pairs),
        case2_violations: spread(&commits),
        duplicate_hash_violations: duplicates,
        truncation_collisions: Vec::new(),
        totals: AuditTotals {
            records: assigned.len(),
            pairs: pairs.len(),
            commits: commits.len(),
        },
        ratios: BTreeMap::new(),
    };
    report.set_ratio("case1", report.case1_violations.len(), pairs.len());
    report.set_ratio("case2", report.case2_violations.len(), commits.len());
    report.set_ratio("duplicate_hash", report.duplicate_hash_violations.len(), assigned.len());
    report
}

/// Complete patch pairs as (vulnerable, non-vulnerable), ordered by pair id.
pub fn complete_pairs(records: &[SourceFunction]) -> Vec<(&str, &SourceFunction, &SourceFunction)> {
    let mut by_pair: BTreeMap<&str, (Option<&SourceFunction>, Option<&SourceFunction>)> = BTreeMap::new();
    for r in records {
        if let Some(p) = &r.pair_id {
            let slot = by_pair.entry(p).or_default();
            if r.label.is_vulnerable() {
                slot.0.get_or_insert(r);
            } else {
                slot.1.get_or_insert(r);
            }
        }
    }
    by_pair
        .into_iter()
        .filter_map(|(p, slots)| match slots {
            (Some(v), Some(n)) => Some((p, v, n)),
            _ => None,
        })
        .collect()
}

/// Flags patch pairs whose two functions are byte-identical once both are cut
/// to their first `budget` tokens.
pub fn audit_truncation(records: &[SourceFunction], budget: usize, counter: &dyn TokenCounter) -> AuditReport {
    let pairs = complete_pairs(records);
    let collisions: Vec<String> = pairs
        .iter()
        .filter(|(_, v, n)| counter.truncate(&v.code, budget) == counter.truncate(&n.code, budget))
        .map(|(p, _, _)| (*p).to_owned())
        .collect();
    let mut report = AuditReport {
        totals: AuditTotals {
            records: records.len(),
            pairs: pairs.len(),
            commits: 0,
        },
        ..AuditReport::default()
    };
    report.set_ratio("truncation", collisions.len(), pairs.len());
    report.truncation_collisions = collisions;
    report
}
