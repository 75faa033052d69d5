use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sideways::commands::{self, CommandError};
use sideways::config::{ConfigError, RunConfig};
use sideways::Mode;

#[derive(Parser)]
#[command(name = "sideways", about = "Train and inspect depth-parallel video networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in configuration: `paper` or `desk`. `sweep` trains
    /// the learning-rate and weight-decay grid and may be combined with `--config`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, checkpoint.bin and report.json.
    Train(Common),
    /// Run the gradient and schedule oracles.
    Gradcheck(Common),
    /// Write the step trace of one episode as JSON lines.
    Trace(Common),
    /// Compare Sideways and BP throughput on the parallel engine.
    Bench(Common),
    /// Compare real-time autoencoding error of both modes.
    RealtimeCompare(Common),
    /// Print a configuration with every default filled in.
    Config(Common),
}

fn load(c: &Common) -> Result<RunConfig, CommandError> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(_), Some(name)) if name != "sweep" => {
            return Err(ConfigError::Invalid {
                field: "preset".into(),
                message: format!("`{name}` cannot be combined with --config"),
            }
            .into())
        }
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name).ok_or_else(|| ConfigError::Invalid {
            field: "preset".into(),
            message: format!("unknown preset `{name}`"),
        })?,
        (None, None) => RunConfig::default(),
    };
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train(c) if c.preset.as_deref() == Some("sweep") => {
            let runs = commands::cmd_sweep(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&runs).unwrap());
        }
        Command::Train(c) => {
            let s = commands::cmd_train(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&s).unwrap());
        }
        Command::Gradcheck(c) => {
            let cfg = load(&c)?;
            let report = sideways::verify::run_gradcheck(&cfg.gradcheck);
            print!("{}", report.to_text());
            commands::cmd_gradcheck(&cfg)?;
        }
        Command::Trace(c) => print!("{}", commands::cmd_trace(&load(&c)?)?.to_jsonl()),
        Command::Bench(c) => println!("{}", commands::cmd_bench(&load(&c)?)?.to_json()),
        Command::RealtimeCompare(c) => {
            let r = commands::cmd_realtime_compare(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&r).unwrap());
        }
        Command::Config(c) => {
            let cfg = load(&c)?;
            print!("{}", cfg.to_toml());
            if c.preset.as_deref() == Some("sweep") {
                println!("\n# `train --preset sweep` runs:");
                for (name, _) in cfg.sweep() {
                    println!("#   {name}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
