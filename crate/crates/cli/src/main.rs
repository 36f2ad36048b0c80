//! `facerestore`: reproducible pipelines over the synthetic face corpus.
//!
//! Every invocation resolves a [`config::RunConfig`], writes it to
//! `<run root>/<command>-<hash>/run.json`, and places all outputs next to
//! it. The run root is `runs` unless `A2BFR_RUN_ROOT` names another one.
//! Errors go to stderr as one JSON object; the exit status is 2 for invalid
//! input and 1 for failures while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facerestore::Error;
use serde_json::json;

use config::RunConfig;

pub const RUN_ROOT_ENV: &str = "A2BFR_RUN_ROOT";

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: "validation", message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: "runtime", message: message.into() }
    }

    /// Any library error raised while checking configuration is invalid input.
    pub fn from_validation(e: Error) -> Self {
        Self::validation(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        if self.kind == "validation" {
            2
        } else {
            1
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::InsufficientData(_) => {
                Self::validation(e.to_string())
            }
            _ => Self::runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "facerestore", version, about = "Attribute-aware face restoration pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<String>,
    /// Dotted-key override such as `train.steps_total=500`; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Upper bound on worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a paired synthetic corpus.
    Synthgen(Common),
    /// Degrade one image or every source image of a corpus.
    Degrade(Common),
    /// Train the attribute and identity encoder.
    TrainEncoder(Common),
    /// Train the restoration model.
    Train(Common),
    /// Restore one image under an attribute prompt.
    Restore {
        #[command(flatten)]
        common: Common,
        /// Prompt such as `glasses=1,smile=0`.
        #[arg(long)]
        attrs: Option<String>,
    },
    /// Edit corpus source images toward their target prompts.
    Edit(Common),
    /// Build a quality-filtered paired dataset.
    Forge {
        #[command(flatten)]
        common: Common,
        /// Also write discarded edits for inspection.
        #[arg(long)]
        dump_rejects: bool,
    },
    /// Evaluate a model on a corpus.
    Eval(Common),
    /// Write a contact sheet of restorations.
    Grid(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common, Vec<String>) {
        match self {
            Command::Synthgen(c) => ("synthgen", c, vec![]),
            Command::Degrade(c) => ("degrade", c, vec![]),
            Command::TrainEncoder(c) => ("train-encoder", c, vec![]),
            Command::Train(c) => ("train", c, vec![]),
            Command::Restore { common, attrs } => (
                "restore",
                common,
                attrs.iter().map(|a| format!("restore.attrs={}", serde_json::to_string(a).unwrap())).collect(),
            ),
            Command::Edit(c) => ("edit", c, vec![]),
            Command::Forge { common, dump_rejects } => (
                "forge",
                common,
                if *dump_rejects { vec!["forge.dump_rejects=true".into()] } else { vec![] },
            ),
            Command::Eval(c) => ("eval", c, vec![]),
            Command::Grid(c) => ("grid", c, vec![]),
        }
    }
}

fn execute(cli: Cli) -> Result<serde_json::Value, CliError> {
    let (name, common, extra) = cli.command.parts();
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::validation("--workers must be at least 1"));
        }
        facerestore::par::set_worker_limit(n);
    }
    let mut overrides = common.set.clone();
    overrides.extend(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let dir = root.join(format!("{name}-{}", cfg.run_hash(name)));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serialises") + "\n";
    std::fs::write(dir.join("run.json"), echo).map_err(|e| CliError::runtime(format!("cannot write run.json: {e}")))?;
    let result = commands::run(name, &cfg, &dir)?;
    Ok(json!({ "command": name, "run_dir": dir, "result": result }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::validation(e.to_string().trim().to_string());
            eprintln!("{}", json!({ "error": { "kind": err.kind, "message": err.message } }));
            return ExitCode::from(err.exit_code());
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serialises"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", json!({ "error": { "kind": err.kind, "message": err.message } }));
            ExitCode::from(err.exit_code())
        }
    }
}
