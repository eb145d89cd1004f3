//! The adaptation loop: collect error codes, revise them, train on the
//! accumulated revisions, repeat.
//!
//! Every phase ends by persisting its outputs and the run state, so a run
//! interrupted anywhere resumes at the first phase that did not finish.
//!
//! Run directory layout:
//!
//! ```text
//! config                      resolved configuration (digested)
//! state                       PipelineState
//! split.manifest              train/test and revise-seed/adapt ids
//! revise/seed.pairs           revise-model training pairs
//! revise/seed.examples        few-shot examples derived from the seeds
//! revise/trainer/result       revise-model trainer manifest (ft mode)
//! iterN/errors                selected error records
//! iterN/revisions             selected revision records
//! iterN/train.pairs           replay union trained on in iteration N
//! iterN/trainer/result        trainer manifest
//! eval/report                 evaluation report
//! ```

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collector::{collect_errors, CandidateLog, ErrorRecord, GenerationPrompt, SkippedProblem};
use crate::corpus::{
    emit_training_file, load_problems, read_jsonl, split_revise_seed, split_train_test, write_atomic, write_jsonl,
    CorpusError, PairOrigin, Problem, ProblemSet, SplitManifest, TrainPair,
};
use crate::evaluator::{evaluate_model, EvalOptions, EvalReport, EvaluateError};
use crate::gateway::{Backend, Gateway, GatewayError, MockBackend, ModelEntry, RemoteBackend};
use crate::replay::{assemble_replay, launch_training, BufferError, ReplayBuffer, TrainerError, TrainerJob};
use crate::reviser::{
    build_revise_training_set, collect_revisions, ReviseError, RevisePrompting, RevisionContext, RevisionLog,
    RevisionRecord, RevisionTemplate, SeedExample, SeedRevision, TemplateError,
};
use crate::sandbox::{verify_solutions, Sandbox, SandboxError};

pub use config::{
    digest_text, scaffold, BackendConfig, BackendKind, ConfigError, EvalConfig, ReviseConfig, ReviseMode, RunConfig,
    SamplingConfig, SplitConfig, TrainerConfig,
};

pub const CONFIG_FILE: &str = "config";
pub const STATE_FILE: &str = "state";
pub const SPLIT_FILE: &str = "split.manifest";

/// Pipeline phases, in execution order. Also tags errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Config,
    Resume,
    Split,
    ReviseModel,
    Collect,
    Revise,
    Train,
    Eval,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Config => "config",
            Phase::Resume => "resume",
            Phase::Split => "split",
            Phase::ReviseModel => "revise-model",
            Phase::Collect => "collect",
            Phase::Revise => "revise",
            Phase::Train => "train",
            Phase::Eval => "eval",
            Phase::Done => "done",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Revise(#[from] ReviseError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error("{0}")]
    State(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, thiserror::Error)]
#[error("{phase}: {failure}")]
pub struct PipelineError {
    pub phase: Phase,
    #[source]
    pub failure: Failure,
}

type PResult<T> = Result<T, PipelineError>;

fn tag<E: Into<Failure>>(phase: Phase) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        phase,
        failure: e.into(),
    }
}

fn state_err(phase: Phase, msg: impl Into<String>) -> PipelineError {
    PipelineError {
        phase,
        failure: Failure::State(msg.into()),
    }
}

fn io_tag(phase: Phase, context: impl fmt::Display) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.to_string();
    move |source| PipelineError {
        phase,
        failure: Failure::Io { context, source },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub n_errors: usize,
    pub n_revisions: usize,
    /// Pairs this iteration added to the replay union.
    pub n_new_pairs: usize,
    /// Size of the replay union after this iteration.
    pub cumulative_revisions: usize,
    /// Problems whose generation failed beyond the retry budget.
    pub n_skipped: usize,
    pub base_model_ref: String,
    /// `None` when training was skipped.
    pub model_ref: Option<String>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Completed iterations.
    pub iteration: u32,
    /// Next phase to run.
    pub pending: Phase,
    pub current_model_ref: String,
    /// `None` in few-shot mode without an explicit revise model: the current
    /// model revises.
    pub revise_model_ref: Option<String>,
    /// Every model the run can address, with serving overrides.
    pub models: BTreeMap<String, ModelEntry>,
    pub buffer: ReplayBuffer,
    pub history: Vec<IterationStats>,
    pub rng_seed: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

impl PipelineState {
    fn initial(cfg: &RunConfig) -> Self {
        Self {
            iteration: 0,
            pending: Phase::Split,
            current_model_ref: cfg.base_model.clone(),
            revise_model_ref: None,
            models: [(cfg.base_model.clone(), ModelEntry::default())].into_iter().collect(),
            buffer: ReplayBuffer::new(),
            history: Vec::new(),
            rng_seed: cfg.split.seed,
            config_digest: cfg.digest(),
            stop_reason: None,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self, Failure> {
        let path = run_dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| Failure::Io {
            context: path.display().to_string(),
            source,
        })?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Failure::State(format!("{}: {e}", path.display())))?;
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), Failure> {
        if self.history.len() != self.iteration as usize {
            return Err(Failure::State(format!(
                "history has {} entries for {} iterations",
                self.history.len(),
                self.iteration
            )));
        }
        if self.buffer.latest() != self.iteration {
            return Err(Failure::State(format!(
                "replay buffer reaches iteration {}, state is at {}",
                self.buffer.latest(),
                self.iteration
            )));
        }
        Ok(())
    }

    /// Cumulative revised-code counts, one per iteration.
    pub fn cumulative_revisions(&self) -> Vec<usize> {
        self.history.iter().map(|h| h.cumulative_revisions).collect()
    }
}

pub fn iter_dir(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join(format!("iter{iteration}"))
}

/// Locate a bare trainer program next to the running executable, so the
/// shipped mock trainer works without being on `PATH`.
fn locate_program(cmd: &[String]) -> Vec<String> {
    let mut cmd = cmd.to_vec();
    if let Some(first) = cmd.first_mut() {
        if !first.contains('/') {
            let sibling = std::env::current_exe()
                .ok()
                .and_then(|exe| exe.parent().map(|d| d.join(first.as_str())))
                .filter(|p| p.is_file());
            if let Some(p) = sibling {
                *first = p.display().to_string();
            }
        }
    }
    cmd
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>, Failure> {
    Ok(match cfg.kind {
        BackendKind::Mock => {
            let path = cfg
                .mock_script
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("backend.mock_script is not set".into()))?;
            Box::new(MockBackend::from_file(path).map_err(|e| ConfigError::Invalid(e.to_string()))?)
        }
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.remote.clone())),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T, phase: Phase) -> PResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_tag(phase, path.display()))
}

fn jsonl<T: Serialize>(path: &Path, records: &[T], phase: Phase) -> PResult<()> {
    write_jsonl(path, records).map_err(io_tag(phase, path.display()))
}

/// A run bound to its directory, configuration, and services.
pub struct Pipeline {
    cfg: RunConfig,
    run_dir: PathBuf,
    problems: ProblemSet,
    gateway: Gateway,
    sandbox: Sandbox,
    template: RevisionTemplate,
    prompt: GenerationPrompt,
    pool: rayon::ThreadPool,
    trainer_cmd: Vec<String>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("run_dir", &self.run_dir).finish()
    }
}

impl Pipeline {
    fn build(cfg: RunConfig, run_dir: PathBuf, backend: Option<Box<dyn Backend>>, phase: Phase) -> PResult<Self> {
        cfg.validate().map_err(tag(phase))?;
        let problems = load_problems(&cfg.corpus).map_err(tag(phase))?;
        let backend = match backend {
            Some(b) => b,
            None => build_backend(&cfg.backend).map_err(|failure| PipelineError { phase, failure })?,
        };
        let gateway = Gateway::new(backend, cfg.backend.retry, cfg.backend.max_in_flight);
        let sandbox = Sandbox::new(cfg.sandbox.clone()).map_err(tag(phase))?;
        let template = match &cfg.revise.template {
            Some(p) => RevisionTemplate::load(p).map_err(tag(phase))?,
            None => RevisionTemplate::default(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| state_err(phase, format!("worker pool: {e}")))?;
        Ok(Self {
            prompt: GenerationPrompt {
                template: cfg.sampling.generation_template.clone(),
            },
            trainer_cmd: locate_program(&cfg.trainer.command),
            cfg,
            run_dir,
            problems,
            gateway,
            sandbox,
            template,
            pool,
        })
    }

    /// Start a new run in `run_dir`, which must not already hold one.
    pub fn create(cfg: RunConfig, run_dir: &Path, backend: Option<Box<dyn Backend>>) -> PResult<(Self, PipelineState)> {
        if run_dir.join(STATE_FILE).exists() {
            return Err(state_err(
                Phase::Config,
                format!("{} already holds a run; resume it instead", run_dir.display()),
            ));
        }
        let p = Self::build(cfg, run_dir.to_path_buf(), backend, Phase::Config)?;
        std::fs::create_dir_all(run_dir).map_err(io_tag(Phase::Config, run_dir.display()))?;
        write_atomic(&run_dir.join(CONFIG_FILE), p.cfg.canonical().as_bytes())
            .map_err(io_tag(Phase::Config, run_dir.join(CONFIG_FILE).display()))?;
        let state = PipelineState::initial(&p.cfg);
        p.register_models(&state);
        p.persist(&state, Phase::Config)?;
        Ok((p, state))
    }

    /// Reopen a run. The stored configuration must still match the digest
    /// recorded at creation, and so must `expected` when given.
    pub fn open(run_dir: &Path, expected: Option<&RunConfig>, backend: Option<Box<dyn Backend>>) -> PResult<(Self, PipelineState)> {
        let phase = Phase::Resume;
        let state = PipelineState::load(run_dir).map_err(|failure| PipelineError { phase, failure })?;
        let path = run_dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_tag(phase, path.display()))?;
        if digest_text(&text) != state.config_digest {
            return Err(state_err(
                phase,
                format!("{} changed since the run started (config digest mismatch)", path.display()),
            ));
        }
        if let Some(cfg) = expected {
            if cfg.digest() != state.config_digest {
                return Err(state_err(phase, "supplied config differs from the run's config (digest mismatch)"));
            }
        }
        let cfg = RunConfig::parse(&text, &path.display().to_string()).map_err(tag(phase))?;
        let p = Self::build(cfg, run_dir.to_path_buf(), backend, phase)?;
        p.register_models(&state);
        Ok((p, state))
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn problems(&self) -> &ProblemSet {
        &self.problems
    }

    fn register_models(&self, state: &PipelineState) {
        for (name, entry) in &state.models {
            self.gateway.register_model(name.clone(), entry.clone());
        }
    }

    fn persist(&self, state: &PipelineState, phase: Phase) -> PResult<()> {
        state.check().map_err(|failure| PipelineError { phase, failure })?;
        write_json(&self.run_dir.join(STATE_FILE), state, phase)
    }

    fn manifest(&self, phase: Phase) -> PResult<SplitManifest> {
        SplitManifest::load(&self.run_dir.join(SPLIT_FILE)).map_err(tag(phase))
    }

    fn select(&self, ids: &[String], phase: Phase) -> PResult<Vec<Problem>> {
        self.problems.select(ids).map_err(tag(phase))
    }

    /// Run the pending phase and persist. Returns the phase that ran.
    pub fn step(&self, state: &mut PipelineState) -> PResult<Phase> {
        let phase = state.pending;
        let mut next = state.clone();
        self.pool.install(|| match phase {
            Phase::Split => self.split(&mut next),
            Phase::ReviseModel => self.revise_model(&mut next),
            Phase::Collect => self.collect(&mut next),
            Phase::Revise => self.revise(&mut next),
            Phase::Train => self.train(&mut next),
            Phase::Done => Ok(()),
            other => Err(state_err(other, format!("{other} is not a resumable phase"))),
        })?;
        if phase != Phase::Done {
            self.persist(&next, phase)?;
        }
        *state = next;
        Ok(phase)
    }

    /// Run one full iteration from wherever the state stands.
    pub fn run_iteration(&self, state: &mut PipelineState) -> PResult<()> {
        let target = state.iteration + 1;
        while state.pending != Phase::Done && state.iteration < target {
            self.step(state)?;
        }
        Ok(())
    }

    /// Run until the loop stops.
    pub fn run(&self, state: &mut PipelineState) -> PResult<()> {
        while state.pending != Phase::Done {
            self.step(state)?;
        }
        Ok(())
    }

    fn split(&self, state: &mut PipelineState) -> PResult<()> {
        let phase = Phase::Split;
        let split = &self.cfg.split;
        let tt = split_train_test(&self.problems, split.seed).map_err(tag(phase))?;
        let manifest = split_revise_seed(&tt, split.revise_seed_fraction, split.seed).map_err(tag(phase))?;
        if split.verify_solutions {
            let all: Vec<Problem> = self.problems.iter().cloned().collect();
            let failing = verify_solutions(&self.sandbox, &all).map_err(tag(phase))?;
            if !failing.is_empty() {
                let ids: Vec<&str> = failing.iter().map(|(id, _)| id.as_str()).collect();
                return Err(state_err(
                    phase,
                    format!("reference solutions fail their own tests: {}", ids.join(", ")),
                ));
            }
        }
        manifest.save(&self.run_dir.join(SPLIT_FILE)).map_err(tag(phase))?;
        log::info!(
            "split: {} train / {} test, {} revise-seed / {} adapt",
            manifest.train_ids.len(),
            manifest.test_ids.len(),
            manifest.revise_seed_ids.len(),
            manifest.adapt_ids.len()
        );
        state.pending = Phase::ReviseModel;
        Ok(())
    }

    fn revise_model(&self, state: &mut PipelineState) -> PResult<()> {
        let phase = Phase::ReviseModel;
        let dir = self.run_dir.join("revise");
        let rc = &self.cfg.revise;
        let mut seed_pairs = Vec::new();
        if let Some(seeds_path) = &rc.seeds {
            let manifest = self.manifest(phase)?;
            let seed_problems = self.select(&manifest.revise_seed_ids, phase)?;
            let mut seeds: Vec<SeedRevision> = read_jsonl(seeds_path).map_err(tag(phase))?;
            // seed files may cover the whole corpus; only the revise-seed split is used
            let total = seeds.len();
            let wanted: std::collections::BTreeSet<&String> = manifest.revise_seed_ids.iter().collect();
            seeds.retain(|s| wanted.contains(&s.problem_id));
            if seeds.len() < total {
                log::info!("revise seeds: {} entries outside the revise-seed split ignored", total - seeds.len());
            }
            let set = build_revise_training_set(&seed_problems, &seeds, &self.sandbox, &self.template)
                .map_err(tag(phase))?;
            emit_training_file(&set.pairs, &dir.join("seed.pairs")).map_err(tag(phase))?;
            jsonl(&dir.join("seed.examples"), &set.examples, phase)?;
            jsonl(&dir.join("seed.rejected"), &set.rejected, phase)?;
            log::info!("revise seeds: {} accepted, {} rejected", set.pairs.len(), set.rejected.len());
            seed_pairs = set.pairs;
        }

        state.revise_model_ref = match (rc.mode, &rc.model_ref) {
            (_, Some(m)) => {
                state.models.entry(m.clone()).or_default();
                Some(m.clone())
            }
            (ReviseMode::Fsp, None) => {
                if seed_pairs.len() < rc.fsp_examples {
                    return Err(PipelineError {
                        phase,
                        failure: ReviseError::InsufficientExamples {
                            needed: rc.fsp_examples,
                            available: seed_pairs.len(),
                        }
                        .into(),
                    });
                }
                None
            }
            (ReviseMode::Ft, None) => {
                let job = TrainerJob {
                    train_file: dir.join("seed.pairs"),
                    base_model_ref: self.cfg.base_model.clone(),
                    mode: self.cfg.trainer.mode,
                    hparams: self.cfg.trainer.effective_hparams(),
                    output_dir: dir.join("trainer"),
                };
                let result = launch_training(&self.trainer_cmd, &job, Some(&self.gateway)).map_err(tag(phase))?;
                log::info!("revise model {} trained (loss {})", result.model_ref, result.final_loss);
                state.models.insert(
                    result.model_ref.clone(),
                    ModelEntry {
                        endpoint: result.endpoint.clone(),
                    },
                );
                Some(result.model_ref)
            }
        };
        self.register_models(state);
        state.pending = Phase::Collect;
        Ok(())
    }

    fn collect(&self, state: &mut PipelineState) -> PResult<()> {
        let phase = Phase::Collect;
        let l = state.iteration + 1;
        let manifest = self.manifest(phase)?;
        let adapt = self.select(&manifest.adapt_ids, phase)?;
        let params = self.cfg.sampling.params(&state.current_model_ref, self.cfg.sampling.k_samples);
        let c = collect_errors(&adapt, &self.gateway, &self.sandbox, &params, &self.prompt, l).map_err(tag(phase))?;
        let dir = iter_dir(&self.run_dir, l);
        jsonl(&dir.join("errors"), &c.records, phase)?;
        jsonl(&dir.join("errors.candidates"), &c.log, phase)?;
        jsonl(&dir.join("errors.skipped"), &c.skipped, phase)?;
        log::info!("iteration {l}: {} error codes from {} problems", c.records.len(), adapt.len());
        state.pending = Phase::Revise;
        Ok(())
    }

    fn revise(&self, state: &mut PipelineState) -> PResult<()> {
        let phase = Phase::Revise;
        let l = state.iteration + 1;
        let dir = iter_dir(&self.run_dir, l);
        let errors: Vec<ErrorRecord> = read_jsonl(&dir.join("errors")).map_err(tag(phase))?;
        let manifest = self.manifest(phase)?;
        let problems: BTreeMap<String, Problem> = self
            .select(&manifest.adapt_ids, phase)?
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect();
        let prompting = match self.cfg.revise.mode {
            ReviseMode::Ft => RevisePrompting::FineTuned,
            ReviseMode::Fsp => {
                let examples: Vec<SeedExample> =
                    read_jsonl(&self.run_dir.join("revise").join("seed.examples")).map_err(tag(phase))?;
                RevisePrompting::FewShot {
                    examples: examples.into_iter().map(|e| (e.prompt, e.revised_code)).collect(),
                    k: self.cfg.revise.fsp_examples,
                }
            }
        };
        let model = state.revise_model_ref.as_deref().unwrap_or(&state.current_model_ref);
        let params = self.cfg.sampling.params(model, self.cfg.sampling.n_revision_samples);
        let ctx = RevisionContext {
            gateway: &self.gateway,
            sandbox: &self.sandbox,
            template: &self.template,
            prompting: &prompting,
            params: &params,
            iteration: l,
        };
        let r = collect_revisions(&errors, &problems, &ctx).map_err(tag(phase))?;
        jsonl(&dir.join("revisions"), &r.records, phase)?;
        jsonl(&dir.join("revisions.candidates"), &r.log, phase)?;
        jsonl(&dir.join("revisions.skipped"), &r.skipped, phase)?;
        log::info!("iteration {l}: {} of {} error codes revised", r.records.len(), errors.len());
        state.pending = Phase::Train;
        Ok(())
    }

    fn train(&self, state: &mut PipelineState) -> PResult<()> {
        let phase = Phase::Train;
        let l = state.iteration + 1;
        let dir = iter_dir(&self.run_dir, l);
        let errors: Vec<ErrorRecord> = read_jsonl(&dir.join("errors")).map_err(tag(phase))?;
        let revisions: Vec<RevisionRecord> = read_jsonl(&dir.join("revisions")).map_err(tag(phase))?;
        let skipped: Vec<SkippedProblem> = read_jsonl(&dir.join("errors.skipped")).map_err(tag(phase))?;

        let before = assemble_replay(&state.buffer, state.iteration).len();
        state.buffer.open_iteration(l).map_err(tag(phase))?;
        for r in &revisions {
            let p = self
                .problems
                .get(&r.problem_id)
                .ok_or_else(|| state_err(phase, format!("revision for unknown problem {}", r.problem_id)))?;
            let pair = TrainPair {
                prompt: self.prompt.render(p),
                completion: r.revised_code.clone(),
                origin: PairOrigin::Revision,
                problem_id: r.problem_id.clone(),
                iteration: l,
            };
            state.buffer.insert(l, pair).map_err(tag(phase))?;
        }
        let union = assemble_replay(&state.buffer, l);
        let n_new = union.len() - before;

        let base = state.current_model_ref.clone();
        let mut stats = IterationStats {
            iteration: l,
            n_errors: errors.len(),
            n_revisions: revisions.len(),
            n_new_pairs: n_new,
            cumulative_revisions: union.len(),
            n_skipped: skipped.len(),
            base_model_ref: base.clone(),
            model_ref: None,
            final_loss: None,
        };

        if n_new == 0 {
            log::info!("iteration {l}: no new revised code; training skipped, stopping");
            state.stop_reason = Some("no new revised code".into());
        } else {
            let train_file = dir.join("train.pairs");
            emit_training_file(&union, &train_file).map_err(tag(phase))?;
            let job = TrainerJob {
                train_file,
                base_model_ref: base,
                mode: self.cfg.trainer.mode,
                hparams: self.cfg.trainer.effective_hparams(),
                output_dir: dir.join("trainer"),
            };
            let result = launch_training(&self.trainer_cmd, &job, Some(&self.gateway)).map_err(tag(phase))?;
            log::info!(
                "iteration {l}: trained {} on {} pairs (loss {})",
                result.model_ref,
                union.len(),
                result.final_loss
            );
            state.models.insert(
                result.model_ref.clone(),
                ModelEntry {
                    endpoint: result.endpoint.clone(),
                },
            );
            state.current_model_ref = result.model_ref.clone();
            stats.model_ref = Some(result.model_ref);
            stats.final_loss = Some(result.final_loss);
            if l >= self.cfg.max_iterations {
                state.stop_reason = Some("max_iterations reached".into());
            }
        }

        state.history.push(stats);
        state.iteration = l;
        state.pending = if state.stop_reason.is_some() {
            Phase::Done
        } else {
            Phase::Collect
        };
        Ok(())
    }

    /// Evaluate `model_ref` (the run's current model by default) on the test
    /// split and write the report to `out` (`eval/report` by default).
    /// `repeats` overrides the configured number of evaluation runs.
    pub fn evaluate(
        &self,
        state: &PipelineState,
        model_ref: Option<&str>,
        repeats: Option<usize>,
        out: Option<&Path>,
        timestamp: u64,
    ) -> PResult<EvalReport> {
        let phase = Phase::Eval;
        if state.pending <= Phase::Split {
            return Err(state_err(phase, "the run has not been split yet"));
        }
        let manifest = self.manifest(phase)?;
        let test = self.select(&manifest.test_ids, phase)?;
        let model = model_ref.unwrap_or(&state.current_model_ref);
        if !state.models.contains_key(model) {
            self.gateway.register_model(model, ModelEntry::default());
        }
        let ec = &self.cfg.eval;
        let mut opts = EvalOptions::new(model, timestamp);
        opts.sampling = self.cfg.sampling.params(model, ec.n);
        opts.ks = ec.ks.clone();
        opts.repeats = repeats.unwrap_or(ec.repeats);
        let prompt = GenerationPrompt {
            template: ec.template.clone().unwrap_or_else(|| self.prompt.template.clone()),
        };
        let report = self
            .pool
            .install(|| evaluate_model(&test, &self.gateway, &self.sandbox, &opts, &prompt))
            .map_err(tag(phase))?;
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.run_dir.join("eval").join("report"));
        write_atomic(&path, report.to_json().as_bytes()).map_err(io_tag(phase, path.display()))?;
        Ok(report)
    }
}

/// Candidate logs of one iteration, for audits.
pub fn load_candidate_logs(run_dir: &Path, iteration: u32) -> Result<(Vec<CandidateLog>, Vec<RevisionLog>), CorpusError> {
    let dir = iter_dir(run_dir, iteration);
    Ok((read_jsonl(&dir.join("errors.candidates"))?, read_jsonl(&dir.join("revisions.candidates"))?))
}
