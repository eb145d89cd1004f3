//! A stand-in trainer that honors the trainer contract without touching any
//! weights. The reported loss is a deterministic function of the data size
//! and epoch budget.

use std::path::Path;

use crate::corpus::{load_training_file, write_atomic, PairOrigin, TrainPair};

use super::{HyperParams, TrainMode, TrainerError, TrainerResult, RESULT_FILE};

#[derive(Debug, thiserror::Error)]
pub enum MockTrainerError {
    #[error("failure requested via {FAIL_ENV}")]
    Requested,
    #[error("{0} holds no training pairs")]
    NoPairs(String),
    #[error("hparams: {0}")]
    HyperParams(String),
    #[error(transparent)]
    Invalid(#[from] TrainerError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Setting this variable makes the mock trainer exit with an error, for
/// exercising failure and resume paths.
pub const FAIL_ENV: &str = "DEED_MOCK_TRAINER_FAIL";

/// `name-vN` becomes `name-v(N+1)`; anything else gains `-v1`. A job trained
/// only on revise-seed pairs yields `{base}-revise`.
pub fn next_model_ref(base: &str, pairs: &[TrainPair]) -> String {
    if !pairs.is_empty() && pairs.iter().all(|p| p.origin == PairOrigin::ReviseSeed) {
        return format!("{base}-revise");
    }
    if let Some((stem, v)) = base.rsplit_once("-v") {
        if let Ok(n) = v.parse::<u64>() {
            if !v.starts_with('+') {
                return format!("{stem}-v{}", n + 1);
            }
        }
    }
    format!("{base}-v1")
}

/// Per-epoch loss curve: strictly decreasing in the epoch, lower with more data.
pub fn loss_curve(n_pairs: usize, epochs: u32) -> Vec<f64> {
    let scale = 1.0 + 1.0 / n_pairs.max(1) as f64;
    (1..=epochs)
        .map(|e| {
            let l = scale / (1.0 + e as f64);
            (l * 1e6).round() / 1e6
        })
        .collect()
}

pub fn train(
    train_file: &Path,
    base_model: &str,
    mode: TrainMode,
    hparams_file: &Path,
    output_dir: &Path,
) -> Result<TrainerResult, MockTrainerError> {
    if std::env::var_os(FAIL_ENV).is_some() {
        return Err(MockTrainerError::Requested);
    }
    let hp: HyperParams = serde_json::from_str(&std::fs::read_to_string(hparams_file)?)
        .map_err(|e| MockTrainerError::HyperParams(e.to_string()))?;
    hp.validate(mode)?;
    let pairs = load_training_file(train_file)?;
    if pairs.is_empty() {
        return Err(MockTrainerError::NoPairs(train_file.display().to_string()));
    }
    let curve = loss_curve(pairs.len(), hp.epochs);
    let result = TrainerResult {
        model_ref: next_model_ref(base_model, &pairs),
        final_loss: *curve.last().expect("epochs > 0"),
        epochs_run: hp.epochs,
        endpoint: None,
    };
    let mut text = serde_json::to_string_pretty(&result).expect("result serializes");
    text.push('\n');
    write_atomic(&output_dir.join(RESULT_FILE), text.as_bytes())?;
    Ok(result)
}
