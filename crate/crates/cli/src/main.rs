use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use faudit::{exec_for_jobs, run_stage, AuditConfig, ConfigError, Run, Stage};

#[derive(Parser)]
#[command(name = "faudit", version, about = "Explanation-faithfulness audit pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Audit configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for sample-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and the audited subset.
    Generate(Common),
    /// Train the built-in reference models for every seed.
    Train(Common),
    /// Compute heatmaps (and stability) for every model, seed and explainer.
    Explain(Common),
    /// Score every heatmap and write the audit records.
    Audit(Common),
    /// Summarise the audit records.
    Report(Common),
    /// All stages in order.
    Run(Common),
}

fn execute(stages: &[Stage], common: &Common) -> anyhow::Result<usize> {
    let mut cfg = AuditConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    let run = Run::open(cfg, exec_for_jobs(common.jobs))?;
    println!("run directory: {}", run.dir.display());
    let mut failures = 0;
    for &stage in stages {
        let summary = run_stage(&run, stage)?;
        for line in &summary.lines {
            println!("[{}] {line}", stage.name());
        }
        failures += summary.failures;
    }
    Ok(failures)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stages, common): (Vec<Stage>, &Common) = match &cli.command {
        Command::Generate(c) => (vec![Stage::Generate], c),
        Command::Train(c) => (vec![Stage::Train], c),
        Command::Explain(c) => (vec![Stage::Explain], c),
        Command::Audit(c) => (vec![Stage::Audit], c),
        Command::Report(c) => (vec![Stage::Report], c),
        Command::Run(c) => (Stage::ALL.to_vec(), c),
    };
    match execute(&stages, common) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("faudit: {n} sample(s) failed; see the error rows");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("faudit: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
