use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use deed::replay::{mock_trainer, TrainMode};

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Lora,
}

/// Contract-compatible trainer that fabricates a loss curve.
#[derive(Parser)]
#[command(name = "deed-mock-trainer")]
struct Args {
    #[arg(long)]
    train_file: PathBuf,
    #[arg(long)]
    base_model: String,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    hparams: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

fn main() {
    let a = Args::parse();
    let mode = match a.mode {
        Mode::Full => TrainMode::Full,
        Mode::Lora => TrainMode::Lora,
    };
    match mock_trainer::train(&a.train_file, &a.base_model, mode, &a.hparams, &a.output_dir) {
        Ok(r) => eprintln!("trained {} (loss {})", r.model_ref, r.final_loss),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
