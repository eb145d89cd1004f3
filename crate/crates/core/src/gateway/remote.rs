//! OpenAI-compatible `/v1/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, Candidate, GenerationRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    /// Value sent as `logprobs`; servers return `token_logprobs` when >= 0.
    pub logprobs: u32,
    /// Largest `n` sent in one HTTP request.
    pub max_n_per_request: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            api_key_env: Some("DEED_API_KEY".into()),
            timeout_secs: 300.0,
            logprobs: 1,
            max_n_per_request: 50,
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("cfg", &self.cfg).finish()
    }
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    fn call(&self, url: &str, req: &GenerationRequest, n: usize) -> Result<Vec<Candidate>, BackendError> {
        let mut body = json!({
            "model": req.model_ref,
            "prompt": req.prompt,
            "n": n,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "logprobs": self.cfg.logprobs,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        let mut call = self.agent.post(url);
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                call = call.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => {
                return Err(BackendError::Transient(format!("HTTP {status}: {}", excerpt(&text))));
            }
            _ => return Err(BackendError::Config(format!("HTTP {status}: {}", excerpt(&text)))),
        }
        parse_choices(&text)
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

fn parse_choices(text: &str) -> Result<Vec<Candidate>, BackendError> {
    let parsed: CompletionResponse =
        serde_json::from_str(text).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let mut choices: Vec<(usize, Choice)> = parsed
        .choices
        .into_iter()
        .enumerate()
        .map(|(pos, c)| (c.index.unwrap_or(pos), c))
        .collect();
    choices.sort_by_key(|(i, _)| *i);
    choices
        .into_iter()
        .map(|(i, c)| {
            let token_logprobs: Vec<f64> = c
                .logprobs
                .map(|l| l.token_logprobs.into_iter().flatten().collect())
                .unwrap_or_default();
            if let Some(bad) = token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
                return Err(BackendError::Malformed(format!("choice {i}: log-probability {bad} > 0")));
            }
            Ok(Candidate {
                text: c.text,
                token_logprobs,
                backend_index: i,
            })
        })
        .collect()
}

impl Backend for RemoteBackend {
    fn generate_once(&self, req: &GenerationRequest, n: usize, endpoint: Option<&str>) -> Result<Vec<Candidate>, BackendError> {
        let url = endpoint.unwrap_or(&self.cfg.endpoint);
        let chunk = self.cfg.max_n_per_request.max(1);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let want = (n - out.len()).min(chunk);
            match self.call(url, req, want) {
                Ok(batch) if batch.is_empty() => break,
                Ok(batch) => out.extend(batch.into_iter().take(want)),
                // keep what earlier chunks produced; the gateway tops up
                Err(e) if out.is_empty() => return Err(e),
                Err(e) => {
                    log::warn!("remote chunk failed after {} candidates: {e:?}", out.len());
                    break;
                }
            }
        }
        Ok(out)
    }
}
