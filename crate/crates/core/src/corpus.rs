//! Problem corpora, train/test splits, and the trainer exchange format.
//!
//! A corpus is a line-delimited JSON file with one [`Problem`] per line. Tests
//! may be given as plain strings (ids `t0, t1, ...` are synthesized) or as
//! `{test_id, snippet}` objects.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Upper bound on the training split, regardless of corpus size.
pub const MAX_TRAIN_PROBLEMS: usize = 200;
/// Default share of the training split reserved for revise-model seeding.
pub const DEFAULT_REVISE_SEED_FRACTION: f64 = 0.30;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate problem id \"{id}\" (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("corpus too small: {0}")]
    TooSmall(String),
    #[error("revise-seed fraction must lie strictly between 0 and 1, got {0}")]
    FractionOutOfRange(f64),
    #[error("invalid split manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid training pair #{index}: {message}")]
    InvalidPair { index: usize, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub test_id: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub requirement: String,
    /// Reference solution; doubles as the correct solution shown to the reviser.
    pub solution: String,
    pub tests: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_point: Option<String>,
}

impl Problem {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("problem id is empty".into());
        }
        if self.solution.trim().is_empty() {
            return Err(format!("problem {}: solution is empty", self.id));
        }
        if self.tests.is_empty() {
            return Err(format!("problem {}: test suite is empty", self.id));
        }
        let mut seen = HashSet::new();
        for t in &self.tests {
            if t.snippet.trim().is_empty() {
                return Err(format!("problem {}: test {} has an empty snippet", self.id, t.test_id));
            }
            if !seen.insert(t.test_id.as_str()) {
                return Err(format!("problem {}: duplicate test id {}", self.id, t.test_id));
            }
        }
        Ok(())
    }

    pub fn test(&self, test_id: &str) -> Option<&TestCase> {
        self.tests.iter().find(|t| t.test_id == test_id)
    }
}

// Wire shape of a corpus line before normalization.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    id: String,
    requirement: String,
    solution: String,
    tests: Vec<RawTest>,
    #[serde(default)]
    entry_point: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTest {
    Plain(String),
    Keyed { test_id: String, snippet: String },
}

impl RawProblem {
    fn normalize(self) -> Problem {
        let tests = self
            .tests
            .into_iter()
            .enumerate()
            .map(|(i, t)| match t {
                RawTest::Plain(snippet) => TestCase {
                    test_id: format!("t{i}"),
                    snippet,
                },
                RawTest::Keyed { test_id, snippet } => TestCase { test_id, snippet },
            })
            .collect();
        Problem {
            id: self.id,
            requirement: self.requirement,
            solution: self.solution,
            tests,
            entry_point: self.entry_point,
        }
    }
}

/// A validated corpus, kept in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemSet {
    problems: Vec<Problem>,
}

impl ProblemSet {
    pub fn new(problems: Vec<Problem>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, p) in problems.iter().enumerate() {
            p.validate().map_err(|message| CorpusError::Schema { line: i + 1, message })?;
            if !seen.insert(p.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: p.id.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self { problems })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Problem> {
        self.problems.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.problems.iter().map(|p| p.id.clone()).collect()
    }

    /// Problems with the given ids, sorted by id. Unknown ids are reported.
    pub fn select(&self, ids: &[String]) -> Result<Vec<Problem>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let p = self
                .get(id)
                .ok_or_else(|| CorpusError::InvalidManifest(format!("unknown problem id {id}")))?;
            out.push(p.clone());
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

pub fn load_problems(path: &Path) -> Result<ProblemSet> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawProblem = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let problem = raw.normalize();
        problem
            .validate()
            .map_err(|message| CorpusError::Schema { line: line_no, message })?;
        if !seen.insert(problem.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: problem.id,
                line: line_no,
            });
        }
        problems.push(problem);
    }
    Ok(ProblemSet { problems })
}

/// Train/test partition plus the revise-seed/adapt partition of the train side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest")]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub revise_seed_ids: Vec<String>,
    pub adapt_ids: Vec<String>,
    pub rng_seed: u64,
}

#[derive(Deserialize)]
struct RawManifest {
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    revise_seed_ids: Vec<String>,
    adapt_ids: Vec<String>,
    rng_seed: u64,
}

impl TryFrom<RawManifest> for SplitManifest {
    type Error = CorpusError;

    fn try_from(raw: RawManifest) -> Result<Self> {
        let m = SplitManifest {
            train_ids: raw.train_ids,
            test_ids: raw.test_ids,
            revise_seed_ids: raw.revise_seed_ids,
            adapt_ids: raw.adapt_ids,
            rng_seed: raw.rng_seed,
        };
        m.validate()?;
        Ok(m)
    }
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let set = |v: &[String], name: &str| -> Result<BTreeSet<String>> {
            let s: BTreeSet<String> = v.iter().cloned().collect();
            if s.len() != v.len() {
                return Err(CorpusError::InvalidManifest(format!("{name} contains duplicates")));
            }
            Ok(s)
        };
        let train = set(&self.train_ids, "train_ids")?;
        let test = set(&self.test_ids, "test_ids")?;
        let seed = set(&self.revise_seed_ids, "revise_seed_ids")?;
        let adapt = set(&self.adapt_ids, "adapt_ids")?;
        if !train.is_disjoint(&test) {
            return Err(CorpusError::InvalidManifest("train and test overlap".into()));
        }
        if !seed.is_disjoint(&adapt) {
            return Err(CorpusError::InvalidManifest("revise-seed and adapt overlap".into()));
        }
        let union: BTreeSet<String> = seed.union(&adapt).cloned().collect();
        if union != train {
            return Err(CorpusError::InvalidManifest(
                "revise-seed and adapt do not cover train exactly".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::InvalidManifest(e.to_string()))
    }
}

/// Number of training problems for a corpus of `total` problems:
/// `min(200, floor(0.4 * total))`.
pub fn train_size(total: usize) -> usize {
    (total * 2 / 5).min(MAX_TRAIN_PROBLEMS)
}

/// Round-half-up count of revise-seed problems.
pub fn revise_seed_size(train: usize, fraction: f64) -> usize {
    (fraction * train as f64 + 0.5).floor() as usize
}

fn sorted_ids(ids: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = ids.into_iter().collect();
    v.sort();
    v
}

/// Uniform train/test split. Depends only on the set of ids and the seed.
pub fn split_train_test(problems: &ProblemSet, rng_seed: u64) -> Result<SplitManifest> {
    let total = problems.len();
    let n_train = train_size(total);
    if n_train == 0 || n_train == total {
        return Err(CorpusError::TooSmall(format!(
            "{total} problems give {n_train} train / {} test",
            total - n_train
        )));
    }
    let mut ids = sorted_ids(problems.ids());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    let train = sorted_ids(ids);
    Ok(SplitManifest {
        adapt_ids: train.clone(),
        train_ids: train,
        test_ids: sorted_ids(test),
        revise_seed_ids: Vec::new(),
        rng_seed,
    })
}

/// Partition the training ids into revise-seed and adapt sets.
pub fn split_revise_seed(manifest: &SplitManifest, fraction: f64, rng_seed: u64) -> Result<SplitManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::FractionOutOfRange(fraction));
    }
    let n_seed = revise_seed_size(manifest.train_ids.len(), fraction);
    let mut ids = sorted_ids(manifest.train_ids.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ids.shuffle(&mut rng);
    let adapt = ids.split_off(n_seed);
    let out = SplitManifest {
        train_ids: manifest.train_ids.clone(),
        test_ids: manifest.test_ids.clone(),
        revise_seed_ids: sorted_ids(ids),
        adapt_ids: sorted_ids(adapt),
        rng_seed: manifest.rng_seed,
    };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    DatasetSample,
    Revision,
    ReviseSeed,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainPair {
    pub prompt: String,
    pub completion: String,
    pub origin: PairOrigin,
    pub problem_id: String,
    pub iteration: u32,
}

impl TrainPair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.prompt.is_empty() {
            return Err("empty prompt".into());
        }
        if self.completion.is_empty() {
            return Err("empty completion".into());
        }
        Ok(())
    }
}

/// Write pairs one JSON record per line, replacing `path` atomically.
pub fn emit_training_file(pairs: &[TrainPair], path: &Path) -> Result<usize> {
    for (index, p) in pairs.iter().enumerate() {
        p.validate()
            .map_err(|message| CorpusError::InvalidPair { index, message })?;
    }
    write_jsonl(path, pairs).map_err(io_err(path))?;
    Ok(pairs.len())
}

pub fn load_training_file(path: &Path) -> Result<Vec<TrainPair>> {
    read_jsonl(path)
}

/// Serialize records as JSON lines and atomically replace `path`.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(std::io::Error::other)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Write to a sibling temp file then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
