//! `drgrade`: dataset degradation and assembly, training, evaluation,
//! single-image attribution and the HTTP service.
//!
//! Progress and results go to stdout as JSON lines. Failures print one JSON
//! line to stderr and exit with 1 (usage or configuration), 2 (bad input
//! data) or 3 (internal error, including a failed bind).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "drgrade", version, about = "Diabetic-retinopathy grading toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Write all eight light/blur/artifact combinations of every manifest image.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample a grade-balanced manifest from one or more manifests.
    BuildDataset {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        per_label: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic graded corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the attention CNN and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random rotation, flip, scale and shift of every image each epoch.
        #[arg(long)]
        augment: bool,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Integrated Gradients overlay for one image.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// `predicted` or a grade 0-4.
        #[arg(long, default_value = "predicted")]
        target: String,
        /// `black` or the path of a baseline image.
        #[arg(long, default_value = "black")]
        baseline: String,
        /// Also write the raw mask as CSV.
        #[arg(long)]
        mask_csv: Option<PathBuf>,
    },
    /// Run the HTTP service until SIGTERM or Ctrl-C.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

/// A failure with its exit code and machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            exit: 1,
            code: "usage",
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            exit: 1,
            code: "config_error",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            exit: 2,
            code: "data_error",
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError {
            exit: 3,
            code: "internal_error",
            message: message.into(),
        }
    }

    fn emit(&self) {
        let line = serde_json::json!({
            "error": {"code": self.code, "message": self.message},
            "exit_code": self.exit,
        });
        eprintln!("{line}");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            CliError::usage(e.to_string().trim()).emit();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.emit();
            ExitCode::from(e.exit)
        }
    }
}
