use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use g2a_cli::config::RunConfig;
use g2a_cli::{export, gradcheck, run};

#[derive(Parser)]
#[command(name = "g2a", version, about = "Train and inspect two-stage attention multi-agent learners")]
struct Cli {
    /// Output root; defaults to $G2A_RUN_ROOT or ./runs.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of a config.
    Train { config: PathBuf },
    /// Evaluate a checkpoint written by `train`.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Dump per-step attention graphs of greedy episodes.
    ExportAttention {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and learner loss.
    GradCheck,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let root = cli.root.unwrap_or_else(run::run_root);
    match cli.cmd {
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run::train(&cfg, &root)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let line = run::eval_checkpoint(&cfg, &checkpoint, &root)?;
            println!("{}", serde_json::to_string(&line)?);
        }
        Cmd::ExportAttention { config, checkpoint, out, episodes, seed } => {
            let cfg = RunConfig::load(&config)?;
            if let Some(s) = export::export_attention(&cfg, &checkpoint, &out, episodes, seed)? {
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Cmd::GradCheck => {
            let entries = gradcheck::report()?;
            let mut ok = true;
            for e in &entries {
                println!("{:<24} {:.3e} ({} coords) {}", e.name, e.max_rel_error, e.coords_checked, if e.pass { "ok" } else { "FAIL" });
                ok &= e.pass;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
