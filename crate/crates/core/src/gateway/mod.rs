//! Generation gateway over pluggable model backends.
//!
//! The gateway validates requests, resolves model references, bounds the
//! number of in-flight requests, and retries transient backend failures with
//! exponential backoff until exactly `n` candidates are collected.

mod mock;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use mock::{MockBackend, MockCandidate, MockEntry, MockScript};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Revise,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Revise => "revise",
            Stage::Eval => "eval",
        })
    }
}

/// Identifies what a request is for, independent of the rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptKey {
    pub problem_id: String,
    pub stage: Stage,
}

impl PromptKey {
    pub fn new(problem_id: impl Into<String>, stage: Stage) -> Self {
        Self {
            problem_id: problem_id.into(),
            stage,
        }
    }
}

impl fmt::Display for PromptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.problem_id, self.stage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop: Option<Vec<String>>,
    pub model_ref: String,
    pub key: PromptKey,
}

impl GenerationRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.n == 0 {
            return Err(GatewayError::InvalidRequest("n must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Per-token log-probabilities; empty when the backend reports none.
    pub token_logprobs: Vec<f64>,
    pub backend_index: usize,
}

impl Candidate {
    /// Mean token log-probability, or negative infinity when unscoreable.
    pub fn score(&self) -> f64 {
        avg_logprob(self).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Arithmetic mean of the candidate's token log-probabilities.
pub fn avg_logprob(c: &Candidate) -> Result<f64, GatewayError> {
    if c.token_logprobs.is_empty() {
        return Err(GatewayError::UndefinedScore);
    }
    Ok(c.token_logprobs.iter().sum::<f64>() / c.token_logprobs.len() as f64)
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("unknown model reference \"{0}\"")]
    UnknownModel(String),
    #[error("backend unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("backend returned {got} of {expected} candidates after retries")]
    ShortResponse { expected: usize, got: usize },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("score undefined for a candidate without token log-probabilities")]
    UndefinedScore,
}

/// Failure of a single backend call.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection failures, 429/5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Config(String),
}

pub trait Backend: Send + Sync {
    /// One attempt at producing up to `n` candidates. `endpoint` overrides the
    /// backend's default address for models registered with their own.
    fn generate_once(
        &self,
        req: &GenerationRequest,
        n: usize,
        endpoint: Option<&str>,
    ) -> Result<Vec<Candidate>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub requests: u64,
    pub retries: u64,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    models: RwLock<BTreeMap<String, ModelEntry>>,
    slots: Semaphore,
    requests: AtomicU64,
    retries: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("retry", &self.retry)
            .field("models", &self.models.read().unwrap())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backend,
            retry,
            models: RwLock::new(BTreeMap::new()),
            slots: Semaphore::new(max_in_flight),
            requests: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    pub fn register_model(&self, model_ref: impl Into<String>, entry: ModelEntry) {
        self.models.write().unwrap().insert(model_ref.into(), entry);
    }

    pub fn resolve(&self, model_ref: &str) -> Result<ModelEntry, GatewayError> {
        self.models
            .read()
            .unwrap()
            .get(model_ref)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownModel(model_ref.to_string()))
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    /// Exactly `req.n` candidates, indexed `0..n` in sampling order.
    pub fn generate(&self, req: &GenerationRequest) -> Result<Vec<Candidate>, GatewayError> {
        req.validate()?;
        let entry = self.resolve(&req.model_ref)?;
        let _permit = self.slots.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);

        let mut out: Vec<Candidate> = Vec::with_capacity(req.n);
        let mut attempt = 0u32;
        loop {
            let need = req.n - out.len();
            let last_error = match self.backend.generate_once(req, need, entry.endpoint.as_deref()) {
                Ok(batch) => {
                    out.extend(batch.into_iter().take(need));
                    if out.len() == req.n {
                        break;
                    }
                    format!("short response ({} of {})", out.len(), req.n)
                }
                Err(BackendError::Transient(msg)) => msg,
                Err(BackendError::Malformed(msg)) => return Err(GatewayError::Malformed(msg)),
                Err(BackendError::Config(msg)) => return Err(GatewayError::Config(msg)),
            };
            if attempt >= self.retry.max_retries {
                return Err(if out.is_empty() {
                    GatewayError::Unreachable {
                        attempts: attempt + 1,
                        last: last_error,
                    }
                } else {
                    GatewayError::ShortResponse {
                        expected: req.n,
                        got: out.len(),
                    }
                });
            }
            log::warn!("generation {} attempt {} failed: {last_error}; retrying", req.key, attempt + 1);
            std::thread::sleep(self.retry.delay(attempt));
            attempt += 1;
            self.retries.fetch_add(1, Ordering::Relaxed);
        }
        for (i, c) in out.iter_mut().enumerate() {
            c.backend_index = i;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn cand(lps: &[f64]) -> Candidate {
        Candidate {
            text: "x".into(),
            token_logprobs: lps.to_vec(),
            backend_index: 0,
        }
    }

    #[test]
    fn avg_logprob_examples() {
        assert_eq!(avg_logprob(&cand(&[-1.0, -2.0, -3.0])).unwrap(), -2.0);
        assert_eq!(avg_logprob(&cand(&[-0.7])).unwrap(), -0.7);
        assert!(matches!(avg_logprob(&cand(&[])), Err(GatewayError::UndefinedScore)));
        assert_eq!(cand(&[]).score(), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn avg_logprob_permutation_invariant(mut v in prop::collection::vec(-20.0f64..=0.0, 1..50), seed in any::<u64>()) {
            let a = avg_logprob(&cand(&v)).unwrap();
            use rand::{SeedableRng, seq::SliceRandom};
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = avg_logprob(&cand(&v)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn avg_logprob_concatenation(a in prop::collection::vec(-20.0f64..=0.0, 1..30),
                                     b in prop::collection::vec(-20.0f64..=0.0, 1..30)) {
            let joined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let lhs = avg_logprob(&cand(&joined)).unwrap() * joined.len() as f64;
            let rhs = avg_logprob(&cand(&a)).unwrap() * a.len() as f64
                + avg_logprob(&cand(&b)).unwrap() * b.len() as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        per_call: usize,
    }

    impl Backend for Flaky {
        fn generate_once(&self, req: &GenerationRequest, n: usize, _: Option<&str>) -> Result<Vec<Candidate>, BackendError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if call < self.failures {
                return Err(BackendError::Transient("timed out".into()));
            }
            Ok((0..n.min(self.per_call))
                .map(|i| Candidate {
                    text: format!("{}-{call}-{i}", req.key.problem_id),
                    token_logprobs: vec![-0.1],
                    backend_index: 99,
                })
                .collect())
        }
    }

    fn request(n: usize) -> GenerationRequest {
        GenerationRequest {
            prompt: "p".into(),
            n,
            temperature: 0.8,
            max_tokens: 16,
            stop: None,
            model_ref: "m".into(),
            key: PromptKey::new("p1", Stage::Generate),
        }
    }

    fn gateway(b: Flaky, retries: u32) -> Gateway {
        let gw = Gateway::new(
            Box::new(b),
            RetryPolicy {
                max_retries: retries,
                backoff_ms: 1,
            },
            4,
        );
        gw.register_model("m", ModelEntry::default());
        gw
    }

    #[test]
    fn retries_transient_failures() {
        let gw = gateway(Flaky { failures: 2, calls: AtomicUsize::new(0), per_call: 10 }, 3);
        let out = gw.generate(&request(3)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|c| c.backend_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(gw.stats().retries, 2);
    }

    #[test]
    fn gives_up_after_budget() {
        let gw = gateway(Flaky { failures: 10, calls: AtomicUsize::new(0), per_call: 10 }, 2);
        match gw.generate(&request(3)) {
            Err(GatewayError::Unreachable { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tops_up_short_batches() {
        let gw = gateway(Flaky { failures: 0, calls: AtomicUsize::new(0), per_call: 2 }, 3);
        assert_eq!(gw.generate(&request(5)).unwrap().len(), 5);
        let gw = gateway(Flaky { failures: 0, calls: AtomicUsize::new(0), per_call: 1 }, 1);
        assert!(matches!(
            gw.generate(&request(5)),
            Err(GatewayError::ShortResponse { expected: 5, got: 2 })
        ));
    }

    #[test]
    fn rejects_invalid_requests_and_unknown_models() {
        let gw = gateway(Flaky { failures: 0, calls: AtomicUsize::new(0), per_call: 1 }, 0);
        assert!(matches!(gw.generate(&request(0)), Err(GatewayError::InvalidRequest(_))));
        let mut r = request(1);
        r.temperature = -1.0;
        assert!(matches!(gw.generate(&r), Err(GatewayError::InvalidRequest(_))));
        let mut r = request(1);
        r.model_ref = "ghost".into();
        assert!(matches!(gw.generate(&r), Err(GatewayError::UnknownModel(m)) if m == "ghost"));
    }

    #[test]
    fn in_flight_cap_is_respected() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl Backend for Slow {
            fn generate_once(&self, _: &GenerationRequest, n: usize, _: Option<&str>) -> Result<Vec<Candidate>, BackendError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(vec![cand(&[-1.0]); n])
            }
        }
        let slow = Arc::new(Slow { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        struct Shared(Arc<Slow>);
        impl Backend for Shared {
            fn generate_once(&self, r: &GenerationRequest, n: usize, e: Option<&str>) -> Result<Vec<Candidate>, BackendError> {
                self.0.generate_once(r, n, e)
            }
        }
        let gw = Arc::new(Gateway::new(Box::new(Shared(slow.clone())), RetryPolicy::default(), 2));
        gw.register_model("m", ModelEntry::default());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let gw = gw.clone();
                std::thread::spawn(move || gw.generate(&request(1)).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }
}
