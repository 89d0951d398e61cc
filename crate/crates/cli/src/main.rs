mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protsi::config::TrainConfig;
use protsi::Error;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::Usage(_) => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "protsi", version, about = "Few-shot scoring of short answers against a model answer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory written by `ingest`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Sets the data, model and episode seeds at once.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub disable_l2: bool,
    #[arg(long, global = true)]
    pub disable_l3: bool,
    /// euclidean or squared.
    #[arg(long, global = true)]
    pub distance: Option<String>,
    /// toy or file:PATH.
    #[arg(long, global = true)]
    pub embedder: Option<String>,
    /// rule or cache:PATH.
    #[arg(long, global = true)]
    pub paraphraser: Option<String>,
    /// Question id; may be omitted when the data directory holds one question.
    #[arg(long, global = true)]
    pub question: Option<String>,
}

impl Common {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            let s = s.to_string();
            for key in ["data_seed", "model_seed", "episode_seed"] {
                cfg.set(key, &s)?;
            }
        }
        if self.disable_l2 {
            cfg.set("disable_l2", "true")?;
        }
        if self.disable_l3 {
            cfg.set("disable_l3", "true")?;
        }
        for (key, value) in [
            ("distance", &self.distance),
            ("embedder", &self.embedder),
            ("paraphraser", &self.paraphraser),
        ] {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out_dir.clone().ok_or_else(|| usage("--out-dir is required"))?;
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        Ok(dir)
    }

    pub fn data_dir(&self) -> CliResult<PathBuf> {
        self.data_dir.clone().ok_or_else(|| usage("--data-dir is required"))
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a TSV or JSON-lines dataset and resolve question specs.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON map of question id to rubric range and model answer.
        #[arg(long)]
        questions: PathBuf,
    },
    /// Split the data and write the sampled episodes.
    Episodes,
    /// Train, keep the best-validation model and evaluate it on the test episodes.
    Train,
    /// Evaluate a checkpoint on stored episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Score one answer using the support set of a stored episode.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_index: usize,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "input")]
        answer_id: String,
    },
    /// Train the full objective and each ablation on the same episodes.
    Ablate,
    /// Finite-difference check of the full objective on a one-episode problem.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Scale the backward pass of parameters with this id prefix.
        #[arg(long, hide = true)]
        fault_group: Option<String>,
        #[arg(long, hide = true, default_value_t = 2.0)]
        fault_factor: f64,
    },
    /// Write a generated dataset and questions file in the ingest formats.
    Synth {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("--threads: {e}")))?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Ingest { dataset, questions } => commands::ingest(c, &dataset, &questions),
        Command::Episodes => commands::episodes(c),
        Command::Train => commands::train(c),
        Command::Eval { checkpoint, episodes } => commands::eval(c, &checkpoint, &episodes),
        Command::Predict {
            checkpoint,
            episodes,
            episode_index,
            text,
            answer_id,
        } => commands::predict(c, &checkpoint, &episodes, episode_index, &answer_id, &text),
        Command::Ablate => commands::ablate(c),
        Command::Gradcheck {
            step,
            tolerance,
            fault_group,
            fault_factor,
        } => commands::gradcheck(c, step, tolerance, fault_group.map(|g| (g, fault_factor))),
        Command::Synth {
            classes,
            per_class,
            label_noise,
        } => commands::synth(c, classes, per_class, label_noise),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PROTSI_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
