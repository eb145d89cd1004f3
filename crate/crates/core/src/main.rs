use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use deed::evaluator::{render_table, EvalReport};
use deed::pipeline::{scaffold, Phase, Pipeline, PipelineError, PipelineState, RunConfig};

#[derive(Parser)]
#[command(name = "deed", version, about = "Adapt a code model on revisions of its own errors")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a starter configuration.
    Init {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Create a run and split the corpus.
    Split {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Collect error codes for the next iteration.
    Collect {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Revise the collected error codes.
    Revise {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run the pending training job (revise model or adapted model).
    Train {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run the whole loop, or resume an interrupted run.
    Run {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
        run_dir: Option<PathBuf>,
        /// Override max_iterations for a new run.
        #[arg(long, conflicts_with = "resume")]
        iterations: Option<u32>,
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a model on the test split.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to the run's current model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Defaults to `<run-dir>/eval/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare evaluation reports (files or run directories).
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn exit_code(phase: Phase) -> u8 {
    match phase {
        Phase::Config => 2,
        Phase::Resume => 3,
        Phase::Split => 4,
        Phase::ReviseModel => 5,
        Phase::Collect => 6,
        Phase::Revise => 7,
        Phase::Train => 8,
        Phase::Eval => 9,
        Phase::Done => 1,
    }
}

enum Failed {
    Phase(PipelineError),
    Other(anyhow::Error),
}

impl From<PipelineError> for Failed {
    fn from(e: PipelineError) -> Self {
        Failed::Phase(e)
    }
}

impl From<anyhow::Error> for Failed {
    fn from(e: anyhow::Error) -> Self {
        Failed::Other(e)
    }
}

fn config_error(e: impl Into<deed::pipeline::Failure>) -> PipelineError {
    PipelineError {
        phase: Phase::Config,
        failure: e.into(),
    }
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

fn print_history(state: &PipelineState) {
    println!("iteration  errors  revisions  cumulative  loss      model");
    for h in &state.history {
        let loss = h.final_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        println!(
            "{:>9}  {:>6}  {:>9}  {:>10}  {:<8}  {}",
            h.iteration,
            h.n_errors,
            h.n_revisions,
            h.cumulative_revisions,
            loss,
            h.model_ref.as_deref().unwrap_or("(not trained)")
        );
    }
    if let Some(r) = &state.stop_reason {
        println!("stopped: {r}");
    }
}

/// Run exactly one named phase, which must be the pending one.
fn single_phase(run_dir: &Path, wanted: &[Phase]) -> Result<(), Failed> {
    let (p, mut state) = Pipeline::open(run_dir, None, None)?;
    if !wanted.contains(&state.pending) {
        return Err(anyhow::anyhow!("the pending phase is {}, not {}", state.pending, wanted[0]).into());
    }
    let ran = p.step(&mut state)?;
    println!("{ran} done; next: {}", state.pending);
    Ok(())
}

fn load_report(path: &Path) -> anyhow::Result<EvalReport> {
    let file = if path.is_dir() { path.join("eval").join("report") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

fn dispatch(cmd: Cmd) -> Result<(), Failed> {
    match cmd {
        Cmd::Init { dir, force } => {
            let path = dir.join("deed.toml");
            if path.exists() && !force {
                return Err(anyhow::anyhow!("{} exists; pass --force to overwrite", path.display()).into());
            }
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(&path, scaffold()).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Cmd::Split { config, run_dir } => {
            let cfg = RunConfig::load(&config).map_err(config_error)?;
            let (p, mut state) = Pipeline::create(cfg, &run_dir, None)?;
            p.step(&mut state)?;
            println!("split written to {}", run_dir.join(deed::pipeline::SPLIT_FILE).display());
        }
        Cmd::Collect { run_dir } => single_phase(&run_dir, &[Phase::Collect])?,
        Cmd::Revise { run_dir } => single_phase(&run_dir, &[Phase::Revise])?,
        Cmd::Train { run_dir } => single_phase(&run_dir, &[Phase::Train, Phase::ReviseModel])?,
        Cmd::Run {
            config,
            run_dir,
            iterations,
            resume,
        } => {
            let (p, mut state) = match resume {
                Some(dir) => {
                    let expected = match &config {
                        Some(c) => Some(RunConfig::load(c).map_err(config_error)?),
                        None => None,
                    };
                    Pipeline::open(&dir, expected.as_ref(), None)?
                }
                None => {
                    let (config, run_dir) = (config.expect("clap enforces"), run_dir.expect("clap enforces"));
                    let mut cfg = RunConfig::load(&config).map_err(config_error)?;
                    if let Some(n) = iterations {
                        cfg.max_iterations = n;
                    }
                    Pipeline::create(cfg, &run_dir, None)?
                }
            };
            p.run(&mut state)?;
            print_history(&state);
        }
        Cmd::Eval {
            run_dir,
            model,
            repeats,
            out,
        } => {
            let (p, state) = Pipeline::open(&run_dir, None, None)?;
            let report = p.evaluate(&state, model.as_deref(), repeats, out.as_deref(), timestamp())?;
            print!("{}", render_table(&[report]));
        }
        Cmd::Report { paths } => {
            let reports = paths.iter().map(|p| load_report(p)).collect::<anyhow::Result<Vec<_>>>()?;
            print!("{}", render_table(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failed::Phase(e)) => {
            eprintln!("error[{}]: {}", e.phase, e.failure);
            ExitCode::from(exit_code(e.phase))
        }
        Err(Failed::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
