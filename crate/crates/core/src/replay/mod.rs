//! Experience replay and the trainer boundary.

mod buffer;
pub mod mock_trainer;
mod trainer;

pub use buffer::{assemble_replay, BufferError, ReplayBuffer};
pub use trainer::{
    launch_training, HyperParams, Schedule, TrainMode, TrainerError, TrainerJob, TrainerResult, HPARAMS_FILE,
    RESULT_FILE,
};
