//! Error-code collection: sample candidates per problem, discard the ones that
//! pass, and keep the failing candidate the model was most confident in.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Problem;
use crate::gateway::{Candidate, Gateway, GenerationRequest, PromptKey, Stage};
use crate::sandbox::{test_eval, Sandbox, SandboxError, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub problem_id: String,
    pub code: String,
    /// Mean token log-probability; `null` on disk when the backend gave none.
    #[serde(with = "score_serde")]
    pub avg_logprob: f64,
    pub error_message: String,
    pub failed_tests: Vec<String>,
    pub iteration: u32,
}

/// One sampled candidate as seen by a selection step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub problem_id: String,
    pub backend_index: usize,
    pub text: String,
    #[serde(with = "score_serde")]
    pub score: f64,
    pub verdict: Verdict,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedProblem {
    pub problem_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    pub records: Vec<ErrorRecord>,
    pub skipped: Vec<SkippedProblem>,
    pub log: Vec<CandidateLog>,
}

/// Sampling knobs shared by collection, revision, and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingParams {
    pub model_ref: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

impl SamplingParams {
    pub fn request(&self, prompt: String, key: PromptKey) -> GenerationRequest {
        GenerationRequest {
            prompt,
            n: self.n,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stop: (!self.stop.is_empty()).then(|| self.stop.clone()),
            model_ref: self.model_ref.clone(),
            key,
        }
    }
}

/// Prompt template for direct generation; `{requirement}` and `{entry_point}`
/// are substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub template: String,
}

impl Default for GenerationPrompt {
    fn default() -> Self {
        Self {
            template: "{requirement}".into(),
        }
    }
}

impl GenerationPrompt {
    pub fn render(&self, p: &Problem) -> String {
        self.template
            .replace("{requirement}", &p.requirement)
            .replace("{entry_point}", p.entry_point.as_deref().unwrap_or(""))
    }
}

/// Cut generated text at the earliest stop marker.
pub fn trim_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Index of the highest-scoring entry; ties go to the earliest.
pub(crate) fn argmax_first(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

enum ProblemResult {
    Skipped(SkippedProblem),
    Done {
        record: Option<ErrorRecord>,
        log: Vec<CandidateLog>,
    },
}

pub fn collect_errors(
    problems: &[Problem],
    gw: &Gateway,
    sandbox: &Sandbox,
    params: &SamplingParams,
    prompt: &GenerationPrompt,
    iteration: u32,
) -> Result<Collection, SandboxError> {
    assert!(params.n >= 1, "k_samples must be at least 1");
    let mut ordered: Vec<&Problem> = problems.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let results: Vec<ProblemResult> = ordered
        .par_iter()
        .map(|p| collect_one(p, gw, sandbox, params, prompt, iteration))
        .collect::<Result<_, _>>()?;

    let mut out = Collection::default();
    for r in results {
        match r {
            ProblemResult::Skipped(s) => out.skipped.push(s),
            ProblemResult::Done { record, log } => {
                out.records.extend(record);
                out.log.extend(log);
            }
        }
    }
    Ok(out)
}

fn collect_one(
    p: &Problem,
    gw: &Gateway,
    sandbox: &Sandbox,
    params: &SamplingParams,
    prompt: &GenerationPrompt,
    iteration: u32,
) -> Result<ProblemResult, SandboxError> {
    let req = params.request(prompt.render(p), PromptKey::new(&p.id, Stage::Generate));
    let candidates: Vec<Candidate> = match gw.generate(&req) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("collection: generation failed for {}: {e}", p.id);
            return Ok(ProblemResult::Skipped(SkippedProblem {
                problem_id: p.id.clone(),
                reason: e.to_string(),
            }));
        }
    };

    let mut log = Vec::with_capacity(candidates.len());
    let mut failing = Vec::new();
    for c in &candidates {
        let code = trim_at_stop(&c.text, &params.stop);
        let outcome = sandbox.run_tests(code, p)?;
        log.push(CandidateLog {
            problem_id: p.id.clone(),
            backend_index: c.backend_index,
            text: code.to_string(),
            score: c.score(),
            verdict: outcome.verdict,
            selected: false,
        });
        if test_eval(&outcome) == 0 {
            failing.push((log.len() - 1, code.to_string(), c.score(), outcome));
        }
    }

    let record = argmax_first(failing.iter().map(|f| f.2)).map(|best| {
        let (log_idx, code, score, outcome) = failing.swap_remove(best);
        log[log_idx].selected = true;
        ErrorRecord {
            problem_id: p.id.clone(),
            code,
            avg_logprob: score,
            error_message: outcome.error_message(),
            failed_tests: outcome.failed_test_ids(),
            iteration,
        }
    });
    Ok(ProblemResult::Done { record, log })
}

/// Serde adapter mapping negative infinity to `null`.
pub mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}
