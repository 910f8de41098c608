use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use critcascade::experiment::{run, ExperimentConfig, ExperimentKind};

/// Critical branching random walks: simulation, cascade measures and envelope checks.
#[derive(Parser)]
#[command(name = "critcascade", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boundary diagnostics m0, m1, sigma^2 for the configured law.
    ModelDiagnose(Common),
    /// Grow trees and record per-generation statistics.
    Grow(Common),
    /// Additive, derivative and truncated martingales along each tree.
    Martingales(Common),
    /// Build and check the renewal function of the associated walk.
    Renewal(Common),
    /// Sample walks conditioned to stay above -alpha.
    Cwalk(Common),
    /// Sample spine decompositions and D-hat sequences.
    Spine(Common),
    /// Compare spine ball masses with LIL and psi envelopes.
    Envelope(Common),
    /// Normalized partition functions across beta.
    PhaseScan(Common),
    /// Run the acceptance criteria and emit a pass/fail report.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults to the lattice model with default parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicas: Option<usize>,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::ModelDiagnose(c) => (ExperimentKind::ModelDiagnose, c),
            Command::Grow(c) => (ExperimentKind::Grow, c),
            Command::Martingales(c) => (ExperimentKind::TreeMartingales, c),
            Command::Renewal(c) => (ExperimentKind::Renewal, c),
            Command::Cwalk(c) => (ExperimentKind::ConditionedWalk, c),
            Command::Spine(c) => (ExperimentKind::Spine, c),
            Command::Envelope(c) => (ExperimentKind::SpineEnvelope, c),
            Command::PhaseScan(c) => (ExperimentKind::PhaseScan, c),
            Command::Verify(c) => (ExperimentKind::Verify, c),
        }
    }
}

fn load(kind: ExperimentKind, c: &Common) -> critcascade::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.experiment.kind != kind {
                return Err(critcascade::Error::ConfigInvalid(format!(
                    "config is for '{}' but the subcommand is '{}'",
                    cfg.experiment.kind.name(),
                    kind.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(s) = c.seed {
        cfg.experiment.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.experiment.workers = Some(w);
    }
    if let Some(o) = &c.out {
        cfg.experiment.output = o.clone();
    }
    if let Some(r) = c.replicas {
        cfg.experiment.replicas = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let (kind, common) = Cli::parse().command.split();
    let cfg = match load(kind, &common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg) {
        Ok(manifest) => {
            let out = &cfg.experiment.output;
            if kind == ExperimentKind::Verify {
                let text = std::fs::read_to_string(out.join("verify.json")).unwrap_or_default();
                println!("{}", text.trim_end());
                if manifest.acceptance_passed == Some(false) {
                    return ExitCode::from(2);
                }
            } else {
                eprintln!("{} outputs written to {}", manifest.outputs.len(), out.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
