mod args;
mod commands;
mod export;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Command;

/// Learning-rate scheduling with a latent ODE model of training runs.
#[derive(Parser, Debug)]
#[command(name = "lodesched", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Re-run the invocation recorded in an effective-config file.
    #[arg(long, value_name = "CONFIG")]
    replay: Option<PathBuf>,
    /// With --replay, write outputs here instead of the recorded path.
    #[arg(long, requires = "replay")]
    out: Option<PathBuf>,
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn config_path(out: &Path) -> PathBuf {
    sibling(out, "config.json")
}

/// `<out>.<suffix>`, next to the output.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_replay(path: &Path, out: Option<PathBuf>) -> Result<Command, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("--replay: cannot read {}: {e}", path.display())))?;
    let mut command: Command = serde_json::from_str(&text)
        .map_err(|e| usage(format!("--replay: {} is not an effective config: {e}", path.display())))?;
    if let Some(out) = out {
        *command.out_mut() = out;
    }
    Ok(command)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let command = match (cli.command, cli.replay) {
        (Some(c), None) => c,
        (None, Some(path)) => load_replay(&path, cli.out)?,
        _ => return Err(usage("expected a subcommand or --replay <CONFIG>")),
    };
    commands::validate(&command)?;
    // The effective config: the recorded form of `command` is what --replay reads back.
    let record = serde_json::to_string_pretty(&command).expect("config serializes");
    commands::execute(&command)?;
    let path = config_path(command.out());
    fs::write(&path, record + "\n")
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
