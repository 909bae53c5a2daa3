use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dsxai::io::config::RunConfig;
use dsxai::workflow::{self, Command};
use dsxai::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Synth,
    Train,
    Downscale,
    Evaluate,
    Explain,
    Delta,
    Render,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Train => Command::Train,
            Cmd::Downscale => Command::Downscale,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Explain => Command::Explain,
            Cmd::Delta => Command::Delta,
            Cmd::Render => Command::Render,
        }
    }
}

/// Perfect-prognosis downscaling with saliency diagnostics.
#[derive(Debug, Parser)]
#[command(name = "dsxai", version)]
struct Args {
    command: Cmd,

    /// Run-config file with `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override or add a config entry, `key=value`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(args: Args) -> Result<(), Error> {
    let mut config = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::from_pairs([], &std::env::current_dir()?),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--set expects key=value, got '{kv}'")))?;
        config.set(k.trim(), v.trim());
    }
    let summary = workflow::run(args.command.into(), &config)?;
    for (k, v) in &summary.manifest.summary {
        println!("{k}\t{v}");
    }
    println!("manifest\t{}", summary.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
