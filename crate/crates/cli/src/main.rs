use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use memlab::{report, ExperimentConfig, RunDir, Status};

#[derive(Parser)]
#[command(name = "memlab", version, about = "Controlled verbatim-memorization experiments on toy transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config merged over the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set training.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue in an existing run directory, reusing its config.json.
    #[arg(long, conflicts_with_all = ["config", "sets", "out"])]
    run: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain, then train the control and treatment arms.
    Train(Common),
    /// Build the injected set and schedule; check them against the corpus.
    Inject(Common),
    /// Measure memorization of the injected sequences.
    Measure(Common),
    /// Trigger-dependency profiles on the treatment model.
    Depend(Common),
    /// Cross-model interventions between control and treatment.
    Cross(Common),
    /// Unlearn memorized continuations and stress-test the results.
    Unlearn(Common),
    /// Stress-test the treatment model before unlearning.
    Stress(Common),
    /// Re-render plots and tables for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a named experiment preset end to end.
    Preset {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(preset: Option<&str>, c: &Common) -> Result<ExperimentConfig> {
    if let Some(dir) = &c.run {
        let (_, mut cfg) = RunDir::open(dir)?;
        cfg.output_dir = dir.clone();
        return Ok(cfg);
    }
    let mut sets = c.sets.clone();
    if let Some(o) = &c.out {
        sets.push(format!("output_dir={}", serde_json::to_string(o).context("output path is not UTF-8")?));
    }
    ExperimentConfig::resolve(preset, c.config.as_deref(), &sets)
}

fn execute(cli: Cli) -> Result<RunDir> {
    let (cfg, stage) = match &cli.cmd {
        Cmd::Report { run } => {
            let (mut dir, cfg) = RunDir::open(run)?;
            let index = report::render(&mut dir, &cfg)?;
            for m in &index.missing {
                eprintln!("missing: {m}");
            }
            println!("{} plots, {} tables", index.plots.len(), index.tables.len());
            return Ok(dir);
        }
        Cmd::Preset { name, common } => (resolve(Some(name), common)?, None),
        Cmd::Train(c) => (resolve(None, c)?, Some("train")),
        Cmd::Inject(c) => (resolve(None, c)?, Some("inject")),
        Cmd::Measure(c) => (resolve(None, c)?, Some("measure")),
        Cmd::Depend(c) => (resolve(None, c)?, Some("depend")),
        Cmd::Cross(c) => (resolve(None, c)?, Some("cross")),
        Cmd::Unlearn(c) => (resolve(None, c)?, Some("unlearn")),
        Cmd::Stress(c) => (resolve(None, c)?, Some("stress")),
    };
    match stage {
        None => memlab::run(cfg),
        Some(s) => memlab::run_with(cfg, |lab| lab.run_stage(s)),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(dir) => {
            let m = &dir.manifest;
            println!("{}: {:?}", dir.root.display(), m.status);
            if let Some(e) = &m.error {
                eprintln!("error: {e}");
            }
            if m.status == Status::Success {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
