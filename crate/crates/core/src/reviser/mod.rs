//! Automatic code revision.
//!
//! For each collected error record the reviser renders a revision prompt from
//! the requirement, the reference solution, the error code, its error messages
//! and its failed tests; samples revisions; keeps those that pass every test
//! and differ from the reference solution; and selects the one closest to the
//! error code by edit distance.

mod levenshtein;
mod template;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collector::{score_serde, trim_at_stop, CandidateLog, SamplingParams, SkippedProblem};
use crate::collector::ErrorRecord;
use crate::corpus::{PairOrigin, Problem, TrainPair};
use crate::gateway::{Gateway, PromptKey, Stage};
use crate::sandbox::{test_eval, Sandbox, SandboxError};

pub use levenshtein::levenshtein;
pub use template::{
    RevisionTemplate, TemplateError, DEFAULT_TEMPLATE, DEFAULT_TEMPLATE_VERSION, PLACEHOLDERS,
    REVISION_INSTRUCTION,
};

/// Default number of worked examples in a few-shot revision prompt.
pub const DEFAULT_FSP_EXAMPLES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ReviseError {
    #[error("few-shot prompt needs {needed} examples, only {available} available")]
    InsufficientExamples { needed: usize, available: usize },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionParts {
    pub requirement: String,
    pub correct_solution: String,
    pub error_code: String,
    pub error_messages: String,
    pub failed_tests: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionPrompt {
    pub problem_id: String,
    pub text: String,
    pub parts: RevisionParts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub problem_id: String,
    pub error_code: String,
    pub revised_code: String,
    pub edit_distance: usize,
    pub iteration: u32,
}

fn or_none(s: String) -> String {
    if s.trim().is_empty() {
        "(none)".to_string()
    } else {
        s
    }
}

/// Render the revision prompt for error record `e` of problem `p`.
pub fn build_revision_prompt(template: &RevisionTemplate, p: &Problem, e: &ErrorRecord) -> RevisionPrompt {
    assert_eq!(p.id, e.problem_id, "error record belongs to a different problem");
    // failed tests in the problem's test order
    let failed: Vec<&str> = p
        .tests
        .iter()
        .filter(|t| e.failed_tests.contains(&t.test_id))
        .map(|t| t.snippet.trim_end())
        .collect();
    let parts = RevisionParts {
        requirement: p.requirement.trim_end().to_string(),
        correct_solution: p.solution.trim_end().to_string(),
        error_code: e.code.trim_end().to_string(),
        error_messages: or_none(e.error_message.trim_end().to_string()),
        failed_tests: or_none(failed.join("\n")),
    };
    let text = template.render([
        &parts.requirement,
        &parts.correct_solution,
        &parts.error_code,
        &parts.error_messages,
        &parts.failed_tests,
    ]);
    RevisionPrompt {
        problem_id: p.id.clone(),
        text,
        parts,
    }
}

/// Concatenate the first `k` worked examples ahead of the target prompt.
pub fn build_fsp_prompt(
    examples: &[(RevisionPrompt, String)],
    target: &RevisionPrompt,
    k: usize,
) -> Result<String, ReviseError> {
    if examples.len() < k {
        return Err(ReviseError::InsufficientExamples {
            needed: k,
            available: examples.len(),
        });
    }
    let mut out = String::new();
    for (prompt, revised) in &examples[..k] {
        out.push_str(&prompt.text);
        out.push_str(revised.trim_end());
        out.push_str("\n\n");
    }
    out.push_str(&target.text);
    Ok(out)
}

/// Canonical form for the "identical to the reference solution" check:
/// newlines unified, trailing whitespace stripped per line, surrounding blank
/// lines dropped.
pub fn normalize_code(s: &str) -> String {
    let unified = s.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    lines.join("\n").trim_matches('\n').to_string()
}

/// Index of the smallest distance; ties go to the earliest.
fn argmin_first(values: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Revision candidate as seen by selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionLog {
    #[serde(flatten)]
    pub candidate: CandidateLog,
    pub equals_solution: bool,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Revisions {
    pub records: Vec<RevisionRecord>,
    pub skipped: Vec<SkippedProblem>,
    pub log: Vec<RevisionLog>,
}

/// How revision prompts are formed.
#[derive(Debug, Clone)]
pub enum RevisePrompting {
    /// A revise model fine-tuned on revision prompts.
    FineTuned,
    /// The model under adaptation with worked examples prepended.
    FewShot {
        examples: Vec<(RevisionPrompt, String)>,
        k: usize,
    },
}

pub struct RevisionContext<'a> {
    pub gateway: &'a Gateway,
    pub sandbox: &'a Sandbox,
    pub template: &'a RevisionTemplate,
    pub prompting: &'a RevisePrompting,
    pub params: &'a SamplingParams,
    pub iteration: u32,
}

pub fn collect_revisions(
    errors: &[ErrorRecord],
    problems: &BTreeMap<String, Problem>,
    ctx: &RevisionContext<'_>,
) -> Result<Revisions, ReviseError> {
    assert!(ctx.params.n >= 1, "n_samples must be at least 1");
    if let RevisePrompting::FewShot { examples, k } = ctx.prompting {
        if examples.len() < *k {
            return Err(ReviseError::InsufficientExamples {
                needed: *k,
                available: examples.len(),
            });
        }
    }
    let mut ordered: Vec<&ErrorRecord> = errors.iter().collect();
    ordered.sort_by(|a, b| a.problem_id.cmp(&b.problem_id));

    let results: Vec<Result<_, ReviseError>> = ordered
        .par_iter()
        .map(|e| {
            let p = problems
                .get(&e.problem_id)
                .unwrap_or_else(|| panic!("error record for unknown problem {}", e.problem_id));
            revise_one(p, e, ctx)
        })
        .collect();

    let mut out = Revisions::default();
    for r in results {
        match r? {
            Err(skip) => out.skipped.push(skip),
            Ok((record, log)) => {
                out.records.extend(record);
                out.log.extend(log);
            }
        }
    }
    Ok(out)
}

type OneRevision = Result<(Option<RevisionRecord>, Vec<RevisionLog>), SkippedProblem>;

fn revise_one(p: &Problem, e: &ErrorRecord, ctx: &RevisionContext<'_>) -> Result<OneRevision, ReviseError> {
    let target = build_revision_prompt(ctx.template, p, e);
    let prompt = match ctx.prompting {
        RevisePrompting::FineTuned => target.text,
        RevisePrompting::FewShot { examples, k } => build_fsp_prompt(examples, &target, *k)?,
    };
    let req = ctx.params.request(prompt, PromptKey::new(&p.id, Stage::Revise));
    let candidates = match ctx.gateway.generate(&req) {
        Ok(c) => c,
        Err(err) => {
            log::warn!("revision: generation failed for {}: {err}", p.id);
            return Ok(Err(SkippedProblem {
                problem_id: p.id.clone(),
                reason: err.to_string(),
            }));
        }
    };

    let solution = normalize_code(&p.solution);
    let mut log = Vec::with_capacity(candidates.len());
    let mut survivors = Vec::new();
    for c in &candidates {
        let code = trim_at_stop(&c.text, &ctx.params.stop);
        let outcome = ctx.sandbox.run_tests(code, p)?;
        let equals_solution = normalize_code(code) == solution;
        let distance = levenshtein(&e.code, code);
        if test_eval(&outcome) == 1 && !equals_solution {
            survivors.push((log.len(), code.to_string(), distance));
        }
        log.push(RevisionLog {
            candidate: CandidateLog {
                problem_id: p.id.clone(),
                backend_index: c.backend_index,
                text: code.to_string(),
                score: c.score(),
                verdict: outcome.verdict,
                selected: false,
            },
            equals_solution,
            edit_distance: distance,
        });
    }
    let record = argmin_first(survivors.iter().map(|s| s.2)).map(|best| {
        let (log_idx, code, distance) = survivors.swap_remove(best);
        log[log_idx].candidate.selected = true;
        RevisionRecord {
            problem_id: p.id.clone(),
            error_code: e.code.clone(),
            revised_code: code,
            edit_distance: distance,
            iteration: ctx.iteration,
        }
    });
    Ok(Ok((record, log)))
}

/// A hand-revised error code used to teach the revise model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRevision {
    pub problem_id: String,
    pub error_code: String,
    pub revised_code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub prompt: RevisionPrompt,
    pub revised_code: String,
    #[serde(with = "score_serde")]
    pub error_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedSet {
    pub pairs: Vec<TrainPair>,
    pub examples: Vec<SeedExample>,
    pub rejected: Vec<SkippedProblem>,
}

impl SeedSet {
    pub fn few_shot_examples(&self) -> Vec<(RevisionPrompt, String)> {
        self.examples
            .iter()
            .map(|e| (e.prompt.clone(), e.revised_code.clone()))
            .collect()
    }
}

/// Turn hand-revised seeds into revise-model training pairs. Error messages
/// and failed tests are recomputed by replaying the seed's error code.
pub fn build_revise_training_set(
    seed_problems: &[Problem],
    seeds: &[SeedRevision],
    sandbox: &Sandbox,
    template: &RevisionTemplate,
) -> Result<SeedSet, SandboxError> {
    let by_id: BTreeMap<&str, &Problem> = seed_problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut ordered: Vec<&SeedRevision> = seeds.iter().collect();
    ordered.sort_by(|a, b| (&a.problem_id, &a.error_code).cmp(&(&b.problem_id, &b.error_code)));

    let checked: Vec<Result<SeedExample, SkippedProblem>> = ordered
        .par_iter()
        .map(|s| -> Result<_, SandboxError> {
            let reject = |reason: String| {
                log::warn!("revise seed for {} rejected: {reason}", s.problem_id);
                Err(SkippedProblem {
                    problem_id: s.problem_id.clone(),
                    reason,
                })
            };
            let Some(p) = by_id.get(s.problem_id.as_str()) else {
                return Ok(reject("problem is not in the revise-seed set".into()));
            };
            if s.revised_code.trim().is_empty() {
                return Ok(reject("revised code is empty".into()));
            }
            let revised = sandbox.run_tests(&s.revised_code, p)?;
            if test_eval(&revised) != 1 {
                return Ok(reject(format!(
                    "revised code fails its tests: {}",
                    revised.error_message()
                )));
            }
            let replay = sandbox.run_tests(&s.error_code, p)?;
            let record = ErrorRecord {
                problem_id: p.id.clone(),
                code: s.error_code.clone(),
                avg_logprob: f64::NEG_INFINITY,
                error_message: replay.error_message(),
                failed_tests: replay.failed_test_ids(),
                iteration: 0,
            };
            Ok(Ok(SeedExample {
                prompt: build_revision_prompt(template, p, &record),
                revised_code: s.revised_code.clone(),
                error_score: f64::NEG_INFINITY,
            }))
        })
        .collect::<Result<_, _>>()?;

    let mut out = SeedSet::default();
    for c in checked {
        match c {
            Ok(ex) => {
                out.pairs.push(TrainPair {
                    prompt: ex.prompt.text.clone(),
                    completion: ex.revised_code.clone(),
                    origin: PairOrigin::ReviseSeed,
                    problem_id: ex.prompt.problem_id.clone(),
                    iteration: 0,
                });
                out.examples.push(ex);
            }
            Err(skip) => out.rejected.push(skip),
        }
    }
    Ok(out)
}
