//! `chargejump`: command-line front end for offset-charge jump analysis.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 unreadable or
//! inconsistent data, 3 analysis failure.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod analysis;
mod commands;
mod config;
mod failure;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser};

use crate::commands::Command;
use crate::config::RunConfig;
use crate::failure::{Failure, Outcome};

/// Offset-charge jump detection and rate statistics for Ramsey charge tomography.
#[derive(Debug, Parser)]
#[command(name = "chargejump", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

// Flags that override the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Shield configuration tag.
    #[arg(long, global = true)]
    tag: Option<String>,
    /// Detection threshold for every qubit.
    #[arg(long, global = true)]
    chi2_threshold: Option<f64>,
    /// Central coverage of quoted intervals.
    #[arg(long, global = true)]
    coverage: Option<f64>,
}

fn configure(g: &GlobalArgs) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = Some(w);
    }
    if let Some(t) = &g.tag {
        cfg.shield_config_tag = t.clone();
    }
    if let Some(c) = g.chi2_threshold {
        cfg.set_threshold(c);
    }
    if let Some(c) = g.coverage {
        cfg.coverage = c;
    }
    cfg.validate()?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::usage("workers", e))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = configure(&cli.global).and_then(|cfg| commands::run(&cfg, &cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
