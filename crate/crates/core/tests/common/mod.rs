//! Scripted corpora for pipeline-level tests.
//!
//! Problem `p{i:03}` asks for `f(x) = x + K` with `K = i + 1`. Every model
//! passes every problem unless a failure is scheduled for that model, in
//! which case its generation candidates mix wrong programs with a correct
//! one. Revisions come from a single frozen revise model.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use deed::corpus::{split_revise_seed, split_train_test, write_jsonl, Problem, ProblemSet, SplitManifest, TestCase};
use deed::gateway::{MockCandidate, MockEntry, MockScript, Stage};
use deed::reviser::SeedRevision;

pub const MOCK_TRAINER: &str = env!("CARGO_BIN_EXE_deed-mock-trainer");
pub const DEED: &str = env!("CARGO_BIN_EXE_deed");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fail {
    /// A passing, non-reference revision exists.
    Revisable,
    /// Every revision candidate fails or equals the reference solution.
    Unrevisable,
}

pub fn k_of(i: usize) -> usize {
    i + 1
}

pub fn solution(k: usize) -> String {
    format!("def f(x):\n    return x + {k}\n")
}

/// Two wrong programs with distinct edit distances to the close revision.
pub fn wrong_a(k: usize) -> String {
    format!("def f(x):\n    return x - {k}\n")
}

pub fn wrong_b(k: usize) -> String {
    format!("def f(x):\n    return {k} - x\n")
}

pub fn revision_close(k: usize) -> String {
    format!("def f(x):\n    return x + {k}  # fixed\n")
}

pub fn revision_far(k: usize) -> String {
    format!("def f(x):\n    y = x\n    total = y + {k}\n    return total\n")
}

fn cand(text: String, logprobs: &[f64]) -> MockCandidate {
    MockCandidate {
        text,
        logprobs: logprobs.to_vec(),
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub problems: Vec<Problem>,
    pub manifest: SplitManifest,
    pub seed: u64,
    pub k_samples: usize,
    pub n_revision_samples: usize,
    pub eval_n: usize,
    failures: BTreeMap<(String, String), Fail>,
    /// Passing eval samples per problem for a given model; default all pass.
    eval_passes: BTreeMap<(String, String), usize>,
    /// Appended at the top level and inside `[revise]`, respectively.
    pub extra_toml: String,
    pub revise_toml: String,
    pub max_iterations: u32,
}

impl Fixture {
    pub fn new(total: usize, seed: u64) -> Self {
        let problems: Vec<Problem> = (0..total)
            .map(|i| {
                let k = k_of(i);
                Problem {
                    id: format!("p{i:03}"),
                    requirement: format!("Write f(x) that returns x + {k}."),
                    solution: solution(k),
                    tests: vec![
                        TestCase {
                            test_id: "t0".into(),
                            snippet: format!("assert f(2) == {}", 2 + k),
                        },
                        TestCase {
                            test_id: "t1".into(),
                            snippet: format!("assert f(0) == {k}"),
                        },
                    ],
                    entry_point: Some("f".into()),
                }
            })
            .collect();
        let set = ProblemSet::new(problems.clone()).unwrap();
        let tt = split_train_test(&set, seed).unwrap();
        let manifest = split_revise_seed(&tt, 0.3, seed).unwrap();
        Self {
            dir: tempfile::tempdir().unwrap(),
            problems,
            manifest,
            seed,
            k_samples: 3,
            n_revision_samples: 3,
            eval_n: 10,
            failures: BTreeMap::new(),
            eval_passes: BTreeMap::new(),
            extra_toml: String::new(),
            revise_toml: String::new(),
            max_iterations: 2,
        }
    }

    pub fn adapt(&self) -> &[String] {
        &self.manifest.adapt_ids
    }

    pub fn fail(&mut self, model: &str, pid: &str, kind: Fail) {
        self.failures.insert((model.to_string(), pid.to_string()), kind);
    }

    pub fn eval_passes(&mut self, model: &str, pid: &str, c: usize) {
        self.eval_passes.insert((model.to_string(), pid.to_string()), c);
    }

    fn index(pid: &str) -> usize {
        pid[1..].parse().unwrap()
    }

    pub fn script(&self) -> MockScript {
        let mut entries = Vec::new();
        for p in &self.problems {
            let i = Self::index(&p.id);
            let k = k_of(i);
            entries.push(MockEntry {
                problem_id: p.id.clone(),
                stage: Stage::Generate,
                model: None,
                candidates: (0..self.k_samples).map(|_| cand(solution(k), &[-0.05, -0.1])).collect(),
            });
            // every third problem offers two equally distant revisions, exercising the tie-break
            let revise: Vec<MockCandidate> = (0..self.n_revision_samples)
                .map(|j| match j % 4 {
                    0 => cand(solution(k), &[]),
                    1 if i % 3 == 0 => cand(revision_far(k), &[]),
                    1 => cand(revision_close(k), &[]),
                    2 => cand(revision_far(k), &[]),
                    _ => cand(wrong_a(k), &[]),
                })
                .collect();
            entries.push(MockEntry {
                problem_id: p.id.clone(),
                stage: Stage::Revise,
                model: None,
                candidates: revise,
            });
            entries.push(MockEntry {
                problem_id: p.id.clone(),
                stage: Stage::Eval,
                model: None,
                candidates: (0..self.eval_n).map(|_| cand(solution(k), &[])).collect(),
            });
        }
        for ((model, pid), kind) in &self.failures {
            let i = Self::index(pid);
            let k = k_of(i);
            let (la, lb): (&[f64], &[f64]) = match i % 3 {
                0 => (&[-0.5, -0.1], &[-0.3, -0.3]),
                1 => (&[-0.4], &[-0.2, -0.6]),
                _ => (&[], &[-1.5]),
            };
            let gen: Vec<MockCandidate> = (0..self.k_samples)
                .map(|j| match j % 3 {
                    0 => cand(wrong_a(k), la),
                    1 => cand(wrong_b(k), lb),
                    _ => cand(solution(k), &[-0.01]),
                })
                .collect();
            entries.push(MockEntry {
                problem_id: pid.clone(),
                stage: Stage::Generate,
                model: Some(model.clone()),
                candidates: gen,
            });
            if *kind == Fail::Unrevisable {
                entries.retain(|e| !(e.problem_id == *pid && e.stage == Stage::Revise && e.model.is_none()));
                entries.push(MockEntry {
                    problem_id: pid.clone(),
                    stage: Stage::Revise,
                    model: None,
                    candidates: (0..self.n_revision_samples)
                        .map(|j| if j % 2 == 0 { cand(solution(k), &[]) } else { cand(wrong_b(k), &[]) })
                        .collect(),
                });
            }
        }
        for ((model, pid), c) in &self.eval_passes {
            let k = k_of(Self::index(pid));
            entries.push(MockEntry {
                problem_id: pid.clone(),
                stage: Stage::Eval,
                model: Some(model.clone()),
                candidates: (0..self.eval_n)
                    .map(|j| if j < *c { cand(solution(k), &[]) } else { cand(wrong_a(k), &[]) })
                    .collect(),
            });
        }
        MockScript { entries }
    }

    pub fn seeds(&self) -> Vec<SeedRevision> {
        self.manifest
            .revise_seed_ids
            .iter()
            .map(|pid| {
                let k = k_of(Self::index(pid));
                SeedRevision {
                    problem_id: pid.clone(),
                    error_code: wrong_a(k),
                    revised_code: revision_close(k),
                }
            })
            .collect()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Write corpus, script, seeds and `deed.toml`; returns the config path.
    pub fn write(&self) -> PathBuf {
        write_jsonl(&self.path("problems.jsonl"), &self.problems).unwrap();
        self.script().save(&self.path("script.json")).unwrap();
        write_jsonl(&self.path("seeds.jsonl"), &self.seeds()).unwrap();
        let cfg = format!(
            r#"corpus = "problems.jsonl"
base_model = "mock-v1"
max_iterations = {max}
workers = 4
{extra_top}
[split]
seed = {seed}

[sampling]
k_samples = {k}
n_revision_samples = {n}

[revise]
seeds = "seeds.jsonl"
{revise_extra}
[backend]
kind = "mock"
mock_script = "script.json"

[backend.retry]
max_retries = 0
backoff_ms = 0

[trainer]
command = ["{trainer}"]

[eval]
n = {eval_n}

[sandbox]
command = ["python3", "-I", "-S", "{{file}}"]
timeout_secs = 5.0
"#,
            max = self.max_iterations,
            extra_top = self.extra_toml,
            revise_extra = self.revise_toml,
            seed = self.seed,
            k = self.k_samples,
            n = self.n_revision_samples,
            trainer = MOCK_TRAINER,
            eval_n = self.eval_n,
        );
        let path = self.path("deed.toml");
        std::fs::write(&path, cfg).unwrap();
        path
    }
}

/// Schedule failures so that iteration `l` (model `mock-v{l}`) yields
/// `nrc[l-1]` revisable error codes plus `extra_unrevisable` that cannot be
/// revised, each group on fresh adapt problems.
pub fn schedule_nrc(fx: &mut Fixture, nrc: &[usize], extra_unrevisable: usize) {
    let adapt: Vec<String> = fx.adapt().to_vec();
    let mut next = adapt.iter();
    for (l, &n) in nrc.iter().enumerate() {
        let model = format!("mock-v{}", l + 1);
        for _ in 0..n {
            fx.fail(&model, next.next().expect("enough adapt problems"), Fail::Revisable);
        }
        for _ in 0..extra_unrevisable {
            if let Some(pid) = next.next() {
                fx.fail(&model, pid, Fail::Unrevisable);
            }
        }
    }
}

/// Every regular file under `root`, relative path to bytes.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
