use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use structpe::cli::{run, Command};
use structpe::config::RunConfig;

#[derive(Parser)]
#[command(name = "structpe", version, about = "Structure-informed positional encoding for pianoroll generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// MIDI files, label files and offsets to a corpus of rolls and index streams
    Ingest(Common),
    /// Train a model on an ingested corpus
    Train(Common),
    /// Generate rolls for corpus songs from a checkpoint
    Generate(Common),
    /// Score generated rolls against targets
    Evaluate(Common),
    /// Write self-similarity heatmaps for roll files
    PlotSsm(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file
    #[arg(long)]
    config: PathBuf,
    /// Config overrides as `--key value` pairs, e.g. `--model.d_model 64`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| format!("expected `--key`, found `{flag}`"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it.next().ok_or_else(|| format!("`{flag}` needs a value"))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.cmd {
        Cmd::Ingest(c) => (Command::Ingest, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::PlotSsm(c) => (Command::PlotSsm, c),
    };
    let overrides = match parse_overrides(&common.overrides) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = RunConfig::load(&common.config, &overrides).and_then(|cfg| run(cmd, &cfg));
    match result {
        Ok(failures) if failures.is_empty() => ExitCode::SUCCESS,
        Ok(failures) => {
            for (id, reason) in &failures.0 {
                eprintln!("{}: {id}: {reason}", cmd.name());
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
