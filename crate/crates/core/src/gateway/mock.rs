//! Scripted backend for tests and offline pipeline runs.
//!
//! Candidates are looked up by `(problem_id, stage, model)`, falling back to
//! an entry without a model. The prompt text is never consulted, so template
//! changes leave fixtures valid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Candidate, GenerationRequest, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCandidate {
    pub text: String,
    /// Fabricated token log-probabilities; omitted means "backend reports none".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub problem_id: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub candidates: Vec<MockCandidate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("script serializes");
        crate::corpus::write_atomic(path, text.as_bytes())
    }
}

type Key = (String, Stage, Option<String>);

#[derive(Debug, Clone)]
pub struct MockBackend {
    table: BTreeMap<Key, Vec<MockCandidate>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        let mut table = BTreeMap::new();
        for e in script.entries {
            if let Some(bad) = e
                .candidates
                .iter()
                .flat_map(|c| c.logprobs.iter())
                .find(|lp| !(**lp <= 0.0))
            {
                return Err(BackendError::Config(format!(
                    "mock entry ({}, {}): log-probability {bad} is not <= 0",
                    e.problem_id, e.stage
                )));
            }
            let key = (e.problem_id.clone(), e.stage, e.model.clone());
            if table.insert(key, e.candidates).is_some() {
                return Err(BackendError::Config(format!(
                    "mock entry ({}, {}, {:?}) defined twice",
                    e.problem_id, e.stage, e.model
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Self::new(MockScript::load(path)?)
    }

    fn lookup(&self, req: &GenerationRequest) -> Option<&Vec<MockCandidate>> {
        let pid = req.key.problem_id.clone();
        self.table
            .get(&(pid.clone(), req.key.stage, Some(req.model_ref.clone())))
            .or_else(|| self.table.get(&(pid, req.key.stage, None)))
    }
}

impl Backend for MockBackend {
    fn generate_once(&self, req: &GenerationRequest, n: usize, _endpoint: Option<&str>) -> Result<Vec<Candidate>, BackendError> {
        let script = self.lookup(req).ok_or_else(|| {
            BackendError::Config(format!("no mock script for {} on model {}", req.key, req.model_ref))
        })?;
        if script.len() < req.n {
            return Err(BackendError::Config(format!(
                "mock script for {} has {} candidates, {} requested",
                req.key,
                script.len(),
                req.n
            )));
        }
        // already-delivered candidates are skipped when the gateway tops up
        let start = req.n - n;
        Ok(script[start..start + n]
            .iter()
            .enumerate()
            .map(|(i, c)| Candidate {
                text: c.text.clone(),
                token_logprobs: c.logprobs.clone(),
                backend_index: start + i,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, ModelEntry, PromptKey, RetryPolicy};

    fn entry(pid: &str, stage: Stage, model: Option<&str>, texts: &[&str]) -> MockEntry {
        MockEntry {
            problem_id: pid.into(),
            stage,
            model: model.map(Into::into),
            candidates: texts
                .iter()
                .enumerate()
                .map(|(i, t)| MockCandidate {
                    text: t.to_string(),
                    logprobs: vec![-(i as f64) - 0.5],
                })
                .collect(),
        }
    }

    fn gateway(script: MockScript) -> Gateway {
        let gw = Gateway::new(Box::new(MockBackend::new(script).unwrap()), RetryPolicy::default(), 4);
        gw.register_model("m1", ModelEntry::default());
        gw.register_model("m2", ModelEntry::default());
        gw
    }

    fn req(pid: &str, stage: Stage, n: usize, model: &str) -> GenerationRequest {
        GenerationRequest {
            prompt: "ignored".into(),
            n,
            temperature: 0.8,
            max_tokens: 32,
            stop: None,
            model_ref: model.into(),
            key: PromptKey::new(pid, stage),
        }
    }

    #[test]
    fn scripted_outputs_in_order() {
        let gw = gateway(MockScript {
            entries: vec![entry("p1", Stage::Generate, None, &["a", "b", "c", "d", "e"])],
        });
        let out = gw.generate(&req("p1", Stage::Generate, 5, "m1")).unwrap();
        let texts: Vec<_> = out.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "b", "c", "d", "e"]);
        assert_eq!(out[3].token_logprobs, vec![-3.5]);
        // pure: same key, same answer
        assert_eq!(gw.generate(&req("p1", Stage::Generate, 5, "m1")).unwrap(), out);
    }

    #[test]
    fn short_script_is_config_error_naming_key() {
        let gw = gateway(MockScript {
            entries: vec![entry("p1", Stage::Generate, None, &["a", "b"])],
        });
        match gw.generate(&req("p1", Stage::Generate, 3, "m1")) {
            Err(GatewayError::Config(msg)) => assert!(msg.contains("p1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn model_specific_entries_take_precedence() {
        let gw = gateway(MockScript {
            entries: vec![
                entry("p1", Stage::Generate, None, &["generic"]),
                entry("p1", Stage::Generate, Some("m2"), &["tuned"]),
            ],
        });
        assert_eq!(gw.generate(&req("p1", Stage::Generate, 1, "m1")).unwrap()[0].text, "generic");
        assert_eq!(gw.generate(&req("p1", Stage::Generate, 1, "m2")).unwrap()[0].text, "tuned");
        assert!(gw.generate(&req("p1", Stage::Revise, 1, "m1")).is_err());
    }

    #[test]
    fn positive_logprob_rejected() {
        let mut e = entry("p1", Stage::Eval, None, &["a"]);
        e.candidates[0].logprobs = vec![0.3];
        assert!(MockBackend::new(MockScript { entries: vec![e] }).is_err());
    }

    #[test]
    fn script_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mock.json");
        let mut script = MockScript {
            entries: vec![entry("p1", Stage::Revise, Some("m1"), &["x", "y"])],
        };
        script.entries[0].candidates[1].logprobs.clear();
        script.save(&path).unwrap();
        assert_eq!(MockScript::load(&path).unwrap(), script);
    }
}
