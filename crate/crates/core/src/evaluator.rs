//! Final evaluation: sample `n` completions per held-out problem, execute them,
//! and estimate Pass@k without bias.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collector::{trim_at_stop, GenerationPrompt, SamplingParams};
use crate::corpus::Problem;
use crate::gateway::{Gateway, PromptKey, Stage};
use crate::sandbox::{test_eval, Sandbox, SandboxError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("k must satisfy 1 <= k <= n (n = {n}, k = {k})")]
    InvalidK { n: usize, k: usize },
    #[error("c = {c} exceeds n = {n}")]
    InvalidC { n: usize, c: usize },
    #[error("pass@any needs at least one problem")]
    Empty,
    #[error("n = {n} is smaller than the largest k = {k}")]
    TooFewSamples { n: usize, k: usize },
    #[error("repeats must be at least 1")]
    NoRepeats,
}

/// Unbiased probability that at least one of `k` draws (without replacement)
/// from `n` samples, `c` of them correct, is correct.
///
/// Computed as `1 - prod_{j=n-c+1}^{n} (1 - k/j)`, which never forms a
/// binomial coefficient.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::InvalidK { n, k });
    }
    if c > n {
        return Err(EvalError::InvalidC { n, c });
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let k = k as f64;
    let prod: f64 = (n - c + 1..=n).map(|j| 1.0 - k / j as f64).product();
    Ok(1.0 - prod)
}

/// Fraction of problems with at least one correct sample.
pub fn pass_at_any(per_problem: &[(usize, usize)]) -> Result<f64, EvalError> {
    if per_problem.is_empty() {
        return Err(EvalError::Empty);
    }
    let hit = per_problem.iter().filter(|(_, c)| *c >= 1).count();
    Ok(hit as f64 / per_problem.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemEval {
    pub problem_id: String,
    pub n: usize,
    pub c: usize,
    /// Set when some samples could not be generated and were counted as failing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub pass_at_k: BTreeMap<usize, f64>,
    pub pass_any: f64,
    pub problems: Vec<ProblemEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_ref: String,
    pub temperature: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub n: usize,
    /// Mean over runs.
    pub pass_at_k: BTreeMap<usize, f64>,
    pub pass_any: f64,
    pub runs: Vec<RunEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub sampling: SamplingParams,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub timestamp: u64,
}

impl EvalOptions {
    /// n = 50 samples at temperature 0.8, scoring Pass@{1,5,10}.
    pub fn new(model_ref: impl Into<String>, timestamp: u64) -> Self {
        Self {
            sampling: SamplingParams {
                model_ref: model_ref.into(),
                n: 50,
                temperature: 0.8,
                max_tokens: 1024,
                stop: Vec::new(),
            },
            ks: vec![1, 5, 10],
            repeats: 1,
            timestamp,
        }
    }
}

fn aggregate(problems: Vec<ProblemEval>, ks: &[usize]) -> Result<RunEval, EvalError> {
    let counts: Vec<(usize, usize)> = problems.iter().map(|p| (p.n, p.c)).collect();
    let mut pass = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        for &(n, c) in &counts {
            sum += pass_at_k(n, c, k)?;
        }
        pass.insert(k, sum / counts.len() as f64);
    }
    Ok(RunEval {
        pass_at_k: pass,
        pass_any: pass_at_any(&counts)?,
        problems,
    })
}

fn eval_problem(
    p: &Problem,
    gw: &Gateway,
    sandbox: &Sandbox,
    opts: &EvalOptions,
    prompt: &GenerationPrompt,
) -> Result<ProblemEval, SandboxError> {
    let n = opts.sampling.n;
    let req = opts.sampling.request(prompt.render(p), PromptKey::new(&p.id, Stage::Eval));
    let candidates = match gw.generate(&req) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("eval: generation failed for {}: {e}", p.id);
            return Ok(ProblemEval {
                problem_id: p.id.clone(),
                n,
                c: 0,
                annotation: Some(format!("{n} of {n} samples missing, counted as failing: {e}")),
            });
        }
    };
    let mut c = 0;
    for cand in &candidates {
        let code = trim_at_stop(&cand.text, &opts.sampling.stop);
        c += test_eval(&sandbox.run_tests(code, p)?) as usize;
    }
    Ok(ProblemEval {
        problem_id: p.id.clone(),
        n,
        c,
        annotation: None,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

pub fn evaluate_model(
    test_set: &[Problem],
    gw: &Gateway,
    sandbox: &Sandbox,
    opts: &EvalOptions,
    prompt: &GenerationPrompt,
) -> Result<EvalReport, EvaluateError> {
    let n = opts.sampling.n;
    if let Some(&k) = opts.ks.iter().max() {
        if n < k {
            return Err(EvalError::TooFewSamples { n, k }.into());
        }
    }
    if opts.ks.contains(&0) {
        return Err(EvalError::InvalidK { n, k: 0 }.into());
    }
    if opts.repeats == 0 {
        return Err(EvalError::NoRepeats.into());
    }
    if test_set.is_empty() {
        return Err(EvalError::Empty.into());
    }
    let mut ordered: Vec<&Problem> = test_set.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut runs = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let problems = ordered
            .par_iter()
            .map(|p| eval_problem(p, gw, sandbox, opts, prompt))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(aggregate(problems, &opts.ks)?);
    }
    let r = runs.len() as f64;
    let pass_at_k = opts
        .ks
        .iter()
        .map(|&k| (k, runs.iter().map(|run| run.pass_at_k[&k]).sum::<f64>() / r))
        .collect();
    let pass_any = runs.iter().map(|run| run.pass_any).sum::<f64>() / r;
    Ok(EvalReport {
        model_ref: opts.sampling.model_ref.clone(),
        temperature: opts.sampling.temperature,
        timestamp: opts.timestamp,
        n,
        pass_at_k,
        pass_any,
        runs,
    })
}

/// Plain-text comparison of several reports, one row per model.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.pass_at_k.keys().copied()).collect();
    ks.sort_unstable();
    ks.dedup();

    let mut header = vec!["model".to_string()];
    header.extend(ks.iter().map(|k| format!("Pass@{k}")));
    header.extend(["pass@any".to_string(), "problems".to_string(), "runs".to_string()]);

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model_ref.clone()];
            row.extend(ks.iter().map(|k| match r.pass_at_k.get(k) {
                Some(v) => format!("{:.2}", v * 100.0),
                None => "-".to_string(),
            }));
            row.push(format!("{:.2}", r.pass_any * 100.0));
            row.push(r.runs.first().map_or(0, |x| x.problems.len()).to_string());
            row.push(r.runs.len().to_string());
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    line(&mut out, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in &rows {
        line(&mut out, r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Probability that a uniformly drawn k-subset of n items, the first c of
    /// which are correct, contains a correct item. Enumerates every subset.
    pub(crate) fn enumerate_pass_at_k(n: usize, c: usize, k: usize) -> f64 {
        let correct_mask: u32 = (1u32 << c) - 1;
        let (mut total, mut hit) = (0u64, 0u64);
        for s in 0u32..(1u32 << n) {
            if s.count_ones() as usize == k {
                total += 1;
                hit += (s & correct_mask != 0) as u64;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn matches_enumeration() {
        for n in 1..=12 {
            for c in 0..=n {
                for k in 1..=n {
                    let got = pass_at_k(n, c, k).unwrap();
                    let want = enumerate_pass_at_k(n, c, k);
                    assert!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
                }
            }
        }
        assert!((pass_at_k(5, 2, 2).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn edge_values_are_exact() {
        assert_eq!(pass_at_k(50, 0, 1).unwrap(), 0.0);
        assert_eq!(pass_at_k(7, 1, 7).unwrap(), 1.0);
        for n in 1..=50 {
            for k in 1..=n {
                assert_eq!(pass_at_k(n, n, k).unwrap(), 1.0);
                assert_eq!(pass_at_k(n, 0, k).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn invalid_arguments() {
        assert_eq!(pass_at_k(5, 1, 6), Err(EvalError::InvalidK { n: 5, k: 6 }));
        assert_eq!(pass_at_k(5, 1, 0), Err(EvalError::InvalidK { n: 5, k: 0 }));
        assert_eq!(pass_at_k(5, 6, 1), Err(EvalError::InvalidC { n: 5, c: 6 }));
        assert_eq!(pass_at_any(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn monotone_in_c_and_k() {
        for n in [10, 50] {
            for c in 0..=n {
                for k in 1..=n {
                    let v = pass_at_k(n, c, k).unwrap();
                    assert!((0.0..=1.0).contains(&v));
                    if c < n {
                        assert!(pass_at_k(n, c + 1, k).unwrap() >= v);
                    }
                    if k < n {
                        assert!(pass_at_k(n, c, k + 1).unwrap() >= v);
                    }
                }
            }
        }
    }

    #[test]
    fn pass_any() {
        assert_eq!(pass_at_any(&[(5, 2), (5, 0)]).unwrap(), 0.5);
        assert_eq!(pass_at_any(&[(5, 0), (5, 0)]).unwrap(), 0.0);
        assert_eq!(pass_at_any(&[(5, 1), (5, 5)]).unwrap(), 1.0);
    }

    #[test]
    fn aggregate_is_mean_over_problems() {
        let pe = |id: &str, c| ProblemEval {
            problem_id: id.into(),
            n: 5,
            c,
            annotation: None,
        };
        let run = aggregate(vec![pe("a", 2), pe("b", 0)], &[2]).unwrap();
        assert!((run.pass_at_k[&2] - 0.35).abs() < 1e-12);
        assert_eq!(run.pass_any, 0.5);
    }

    #[test]
    fn table_lists_each_model() {
        let report = |m: &str, v: f64| EvalReport {
            model_ref: m.into(),
            temperature: 0.8,
            timestamp: 0,
            n: 10,
            pass_at_k: [(1, v), (5, v)].into_iter().collect(),
            pass_any: v,
            runs: vec![],
        };
        let t = render_table(&[report("base", 0.25), report("adapted-v2", 0.5)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("model") && lines[0].contains("Pass@5"));
        assert!(lines[3].starts_with("adapted-v2") && lines[3].contains("50.00"));
    }
}
