//! `mdclosure`: simulate, extract, train, predict, diagnose and verify
//! closure models from one JSON experiment config.

mod config;
mod exit;
mod provenance;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use exit::Failure;

#[derive(Parser, Debug)]
#[command(name = "mdclosure", version, about = "Data-driven closure models for partially observed dynamics")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to `<output root>/<config name>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output root used when --out is absent.
    #[arg(long, global = true, env = "MDCLOSURE_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Replace every seed in the config by ones derived from this value.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate the full system and record the trajectory.
    Simulate,
    /// Extract the resolved state and theta.
    Extract,
    /// Fit the configured closure on the training split.
    Train,
    /// Run the closed loop from verification initial conditions.
    Predict,
    /// Compare closure and truth statistics.
    Stats,
    /// Run the configured rate and horizon checks.
    Verify,
    /// simulate, extract, train, predict, stats (and verify when configured).
    Pipeline,
    /// Parse and validate the config, then print its effective form.
    Check,
    /// Print the JSON schema for experiment configs.
    Schema,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::config(anyhow::anyhow!("--config is required for this command")))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed_override {
        cfg.override_seeds(s);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.command == Command::Schema {
        print!("{}", config::SCHEMA);
        return Ok(());
    }
    let cfg = load(cli)?;
    if cli.command == Command::Check {
        println!("{}", serde_json::to_string_pretty(&cfg).map_err(Failure::config)?);
        return Ok(());
    }
    if let Some(n) = cli.threads {
        mdclosure::par::set_threads(n).map_err(Failure::config)?;
    }
    let out = cli.out.clone().unwrap_or_else(|| cli.out_root.join(&cfg.name));
    let out: &Path = &out;
    match cli.command {
        Command::Simulate => stages::simulate(&cfg, out),
        Command::Extract => stages::extract(&cfg, out),
        Command::Train => stages::train_stage(&cfg, out),
        Command::Predict => stages::predict(&cfg, out),
        Command::Stats => stages::stats(&cfg, out),
        Command::Verify => stages::verify(&cfg, out),
        Command::Pipeline => stages::pipeline(&cfg, out),
        Command::Check | Command::Schema => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use exit::Code;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_fixed() {
        assert_eq!(Code::Config as u8, 2);
        assert_eq!(Code::Numerical as u8, 3);
        assert_eq!(Code::Provenance as u8, 4);
    }
}
