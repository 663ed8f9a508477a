mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::commands::Command;
use crate::error::CliError;
use crate::manifest::Manifest;

/// Wasserstein-robust training, attacks, certificates and robust cart-pole.
#[derive(Debug, Parser)]
#[command(name = "wrm", version)]
struct Cli {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset to start from; overrides `preset` in the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`, or the recorded one on replay).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for data-parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Re-run the command recorded in a manifest and compare output hashes.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn execute(command: Command, cfg: config::Config, out_dir: PathBuf) -> Result<Manifest, CliError> {
    let started_at = now();
    let inputs = manifest::hash_inputs(&command.inputs())?;
    let outputs = commands::run(&command, &cfg, &out_dir)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        command,
        config: cfg,
        out_dir,
        started_at,
        finished_at: now(),
        inputs,
        outputs: manifest::hash_outputs(&outputs)?,
    };
    let path = manifest.save()?;
    eprintln!("wrote {}", path.display());
    Ok(manifest)
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }

    if let Some(path) = &cli.replay {
        if cli.command.is_some() || cli.config.is_some() || cli.preset.is_some() || cli.seed.is_some() {
            return Err(CliError::Usage(
                "--replay takes the command and configuration from the manifest".into(),
            ));
        }
        let recorded = Manifest::load(path)?;
        recorded.config.validate()?;
        let out_dir = cli.out_dir.unwrap_or_else(|| recorded.out_dir.clone());
        let fresh = execute(recorded.command.clone(), recorded.config.clone(), out_dir)?;
        let bad = recorded.output_mismatches(&fresh.outputs);
        if !bad.is_empty() {
            return Err(CliError::Runtime(format!("replay mismatch in: {}", bad.join(", "))));
        }
        println!("replay matched {} output(s)", fresh.outputs.len());
        return Ok(());
    }

    let command = cli
        .command
        .ok_or_else(|| CliError::Usage("missing subcommand (see --help)".into()))?;
    let mut cfg = config::resolve(cli.config.as_deref(), cli.preset.as_deref(), cli.seed)?;
    command.apply_overrides(&mut cfg);
    cfg.validate()?;
    execute(command, cfg, cli.out_dir.unwrap_or_else(|| PathBuf::from("out")))?;
    Ok(())
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
