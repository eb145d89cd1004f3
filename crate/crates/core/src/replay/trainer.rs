//! Out-of-process trainer contract.
//!
//! The trainer is invoked as
//! `<cmd> --train-file F --base-model M --mode {full|lora} --hparams H --output-dir O`
//! and must write `O/result` as `{model_ref, final_loss, epochs_run}` before
//! exiting 0.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::write_atomic;
use crate::gateway::{Gateway, ModelEntry};

pub const RESULT_FILE: &str = "result";
pub const HPARAMS_FILE: &str = "hparams.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    Lora,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    pub epochs: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
}

impl HyperParams {
    /// Full-parameter fine-tuning: AdamW (0.9, 0.9), linear schedule, lr 5e-6,
    /// batch 1 with 32 accumulation steps, 10 epochs.
    pub fn full() -> Self {
        Self {
            learning_rate: 5e-6,
            batch_size: 1,
            grad_accum_steps: 32,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.9,
            schedule: Schedule::Linear,
            lora_rank: None,
            lora_alpha: None,
        }
    }

    /// Low-rank adaptation: lr 2e-4, rank 128, alpha 8, otherwise as `full`.
    pub fn lora() -> Self {
        Self {
            learning_rate: 2e-4,
            lora_rank: Some(128),
            lora_alpha: Some(8.0),
            ..Self::full()
        }
    }

    pub fn for_mode(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Full => Self::full(),
            TrainMode::Lora => Self::lora(),
        }
    }

    pub fn validate(&self, mode: TrainMode) -> Result<(), TrainerError> {
        let bad = |m: String| Err(TrainerError::HyperParams(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return bad("batch_size, grad_accum_steps and epochs must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        match (mode, self.lora_rank, self.lora_alpha) {
            (TrainMode::Lora, Some(r), Some(a)) if r > 0 && a > 0.0 => Ok(()),
            (TrainMode::Lora, _, _) => bad("lora mode requires positive lora_rank and lora_alpha".into()),
            (TrainMode::Full, None, None) => Ok(()),
            (TrainMode::Full, _, _) => bad("lora_rank/lora_alpha are only valid in lora mode".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerJob {
    pub train_file: PathBuf,
    pub base_model_ref: String,
    pub mode: TrainMode,
    pub hparams: HyperParams,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerResult {
    pub model_ref: String,
    pub final_loss: f64,
    pub epochs_run: u32,
    /// Serving address for the new model, when it differs from the default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl TrainerResult {
    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TrainerError::Manifest(format!("{}: {e}", path.display())))?;
        let r: TrainerResult =
            serde_json::from_str(&text).map_err(|e| TrainerError::Manifest(format!("{}: {e}", path.display())))?;
        if r.model_ref.trim().is_empty() {
            return Err(TrainerError::Manifest("model_ref is empty".into()));
        }
        if !(r.final_loss >= 0.0 && r.final_loss.is_finite()) {
            return Err(TrainerError::Manifest(format!("final_loss {} is not a finite nonnegative number", r.final_loss)));
        }
        Ok(r)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("training file {0} is missing or empty")]
    EmptyTrainFile(String),
    #[error("trainer command is not configured")]
    NoCommand,
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
    #[error("could not start trainer {cmd}: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trainer exited with {status}; stderr tail:\n{stderr_tail}")]
    Failed { status: String, stderr_tail: String },
    #[error("bad trainer result manifest: {0}")]
    Manifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn has_records(path: &Path) -> bool {
    fs::read_to_string(path)
        .map(|t| t.lines().any(|l| !l.trim().is_empty()))
        .unwrap_or(false)
}

fn tail_lines(s: &str, n: usize) -> String {
    let lines: Vec<&str> = s.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// Run the trainer to completion and register the resulting model.
pub fn launch_training(command: &[String], job: &TrainerJob, gateway: Option<&Gateway>) -> Result<TrainerResult, TrainerError> {
    if !has_records(&job.train_file) {
        return Err(TrainerError::EmptyTrainFile(job.train_file.display().to_string()));
    }
    let (program, args) = command.split_first().ok_or(TrainerError::NoCommand)?;
    job.hparams.validate(job.mode)?;

    fs::create_dir_all(&job.output_dir)?;
    let result_path = job.output_dir.join(RESULT_FILE);
    if result_path.exists() {
        fs::remove_file(&result_path)?;
    }
    let hparams_path = job.output_dir.join(HPARAMS_FILE);
    let mut hp = serde_json::to_string_pretty(&job.hparams).expect("hparams serialize");
    hp.push('\n');
    write_atomic(&hparams_path, hp.as_bytes())?;

    let output = Command::new(program)
        .args(args)
        .arg("--train-file")
        .arg(&job.train_file)
        .arg("--base-model")
        .arg(&job.base_model_ref)
        .arg("--mode")
        .arg(job.mode.as_str())
        .arg("--hparams")
        .arg(&hparams_path)
        .arg("--output-dir")
        .arg(&job.output_dir)
        .stdin(Stdio::null())
        .output()
        .map_err(|source| TrainerError::Spawn {
            cmd: program.clone(),
            source,
        })?;
    let stderr = String::from_utf8_lossy(&output.stderr);
    if !output.status.success() {
        return Err(TrainerError::Failed {
            status: output.status.to_string(),
            stderr_tail: tail_lines(&stderr, 20),
        });
    }
    let result = TrainerResult::load(&result_path)?;
    if let Some(gw) = gateway {
        gw.register_model(
            result.model_ref.clone(),
            ModelEntry {
                endpoint: result.endpoint.clone(),
            },
        );
    }
    Ok(result)
}
