//! Run configuration.
//!
//! A run is described by one TOML file. Relative paths are resolved against
//! the file's directory when it is loaded; the resolved configuration is what
//! gets stored in the run directory and digested for resume checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collector::SamplingParams;
use crate::gateway::{RemoteConfig, RetryPolicy};
use crate::replay::{HyperParams, TrainMode};
use crate::reviser::DEFAULT_FSP_EXAMPLES;
use crate::sandbox::RunnerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Share of the training problems set aside as revise seeds.
    pub revise_seed_fraction: f64,
    /// Refuse to start when a reference solution fails its own tests.
    pub verify_solutions: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            revise_seed_fraction: 0.3,
            verify_solutions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Candidates drawn per problem when collecting error codes.
    pub k_samples: usize,
    /// Candidates drawn per error code when revising.
    pub n_revision_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    /// Generation prompt; `{requirement}` and `{entry_point}` are substituted.
    pub generation_template: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k_samples: 5,
            n_revision_samples: 30,
            temperature: 0.8,
            max_tokens: 1024,
            stop: Vec::new(),
            generation_template: "{requirement}".into(),
        }
    }
}

impl SamplingConfig {
    pub fn params(&self, model_ref: &str, n: usize) -> SamplingParams {
        SamplingParams {
            model_ref: model_ref.to_string(),
            n,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stop: self.stop.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviseMode {
    /// A revise model fine-tuned once on the seed revisions.
    Ft,
    /// The model under adaptation, prompted with seed revisions as examples.
    Fsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviseConfig {
    pub mode: ReviseMode,
    /// JSONL of `{problem_id, error_code, revised_code}` for revise-seed problems.
    pub seeds: Option<PathBuf>,
    /// Use this model for revision instead of training or reusing one.
    pub model_ref: Option<String>,
    /// Custom revision template; the shipped one is used when absent.
    pub template: Option<PathBuf>,
    pub fsp_examples: usize,
}

impl Default for ReviseConfig {
    fn default() -> Self {
        Self {
            mode: ReviseMode::Ft,
            seeds: None,
            model_ref: None,
            template: None,
            fsp_examples: DEFAULT_FSP_EXAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub remote: RemoteConfig,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock_script: None,
            remote: RemoteConfig::default(),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Trainer argv prefix. A bare program name is looked up next to the
    /// running executable first, then on `PATH`.
    pub command: Vec<String>,
    pub mode: TrainMode,
    /// Overrides the defaults for `mode` when present.
    pub hparams: Option<HyperParams>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            command: vec!["deed-mock-trainer".into()],
            mode: TrainMode::Full,
            hparams: None,
        }
    }
}

impl TrainerConfig {
    pub fn effective_hparams(&self) -> HyperParams {
        self.hparams.clone().unwrap_or_else(|| HyperParams::for_mode(self.mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
    pub ks: Vec<usize>,
    pub repeats: usize,
    /// Evaluation prompt; defaults to the generation prompt.
    pub template: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 50,
            ks: vec![1, 5, 10],
            repeats: 1,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub base_model: String,
    pub max_iterations: u32,
    /// Worker threads for sampling and execution.
    pub workers: usize,
    pub split: SplitConfig,
    pub sampling: SamplingConfig,
    pub revise: ReviseConfig,
    pub backend: BackendConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub sandbox: RunnerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("problems.jsonl"),
            base_model: "mock-v1".into(),
            max_iterations: 2,
            workers: 4,
            split: SplitConfig::default(),
            sampling: SamplingConfig::default(),
            revise: ReviseConfig::default(),
            backend: BackendConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
            sandbox: RunnerConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Read, resolve relative paths against the file's directory, and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = std::path::absolute(dir).map_err(|source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        cfg.resolve_paths(&dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus);
        for p in [
            &mut self.revise.seeds,
            &mut self.revise.template,
            &mut self.backend.mock_script,
            &mut self.sandbox.scratch_root,
            &mut self.sandbox.audit_log,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        if let Some(first) = self.trainer.command.first_mut() {
            if first.contains('/') && Path::new(first.as_str()).is_relative() {
                *first = base.join(first.as_str()).display().to_string();
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.base_model.trim().is_empty() {
            return bad("base_model is empty");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.sampling.k_samples == 0 || self.sampling.n_revision_samples == 0 {
            return bad("k_samples and n_revision_samples must be at least 1");
        }
        if !(self.sampling.temperature >= 0.0 && self.sampling.temperature.is_finite()) {
            return bad("temperature must be a finite nonnegative number");
        }
        if self.sampling.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        if !(self.split.revise_seed_fraction > 0.0 && self.split.revise_seed_fraction < 1.0) {
            return bad("revise_seed_fraction must lie strictly between 0 and 1");
        }
        if self.backend.kind == BackendKind::Mock && self.backend.mock_script.is_none() {
            return bad("backend.kind = \"mock\" needs backend.mock_script");
        }
        if self.trainer.command.is_empty() {
            return bad("trainer.command is empty");
        }
        self.trainer
            .effective_hparams()
            .validate(self.trainer.mode)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.revise.mode {
            ReviseMode::Ft if self.revise.seeds.is_none() && self.revise.model_ref.is_none() => {
                return bad("revise.mode = \"ft\" needs revise.seeds or revise.model_ref");
            }
            ReviseMode::Fsp if self.revise.seeds.is_none() => {
                return bad("revise.mode = \"fsp\" needs revise.seeds for its examples");
            }
            ReviseMode::Fsp if self.revise.fsp_examples == 0 => {
                return bad("revise.fsp_examples must be at least 1");
            }
            _ => {}
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and positive");
        }
        if self.eval.ks.iter().any(|k| *k > self.eval.n) {
            return bad("eval.n must be at least every k in eval.ks");
        }
        if self.eval.repeats == 0 {
            return bad("eval.repeats must be at least 1");
        }
        Ok(())
    }

    /// Serialized form stored as the run's `config` file.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        digest_text(&self.canonical())
    }
}

pub fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Starter configuration written by `deed init`.
pub fn scaffold() -> String {
    let mut cfg = RunConfig::default();
    cfg.backend.mock_script = Some(PathBuf::from("mock_script.json"));
    cfg.revise.seeds = Some(PathBuf::from("revise_seeds.jsonl"));
    cfg.canonical()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.max_iterations, 2);
        assert_eq!(c.sampling.k_samples, 5);
        assert_eq!(c.sampling.n_revision_samples, 30);
        assert_eq!(c.sampling.temperature, 0.8);
        assert_eq!(c.sampling.max_tokens, 1024);
        assert_eq!(c.split.revise_seed_fraction, 0.3);
        assert_eq!(c.revise.mode, ReviseMode::Ft);
        assert_eq!(c.revise.fsp_examples, 4);
        assert_eq!((c.eval.n, c.eval.ks.clone()), (50, vec![1, 5, 10]));
        assert_eq!(c.trainer.effective_hparams(), HyperParams::full());
    }

    #[test]
    fn scaffold_round_trips() {
        let text = scaffold();
        let cfg = RunConfig::parse(&text, "scaffold").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.canonical(), text);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deed.toml");
        std::fs::write(
            &path,
            "corpus = \"data/p.jsonl\"\n[backend]\nmock_script = \"s.json\"\n[revise]\nseeds = \"/abs/seeds.jsonl\"\n[trainer]\ncommand = [\"./bin/train\", \"--x\"]\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus, dir.path().join("data/p.jsonl"));
        assert_eq!(cfg.backend.mock_script, Some(dir.path().join("s.json")));
        assert_eq!(cfg.revise.seeds, Some(PathBuf::from("/abs/seeds.jsonl")));
        assert_eq!(cfg.trainer.command[0], dir.path().join("./bin/train").display().to_string());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RunConfig::default();
        c.backend.mock_script = Some("s".into());
        c.revise.seeds = Some("x".into());
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.max_iterations = 0;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.revise.seeds = None;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.eval.n = 5;
        assert!(bad.validate().is_err());
        assert!(RunConfig::parse("unknown_key = 1\n", "t").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.max_iterations = 3;
        assert_ne!(a.digest(), b.digest());
    }
}
