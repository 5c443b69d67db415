//! Audit pipeline driver: generate data, train the reference models,
//! explain, audit and report, all inside one content-addressed run
//! directory.

pub mod config;
pub mod report;
pub mod run;
mod svg;

use faudit_core::Exec;

pub use config::{AuditConfig, ConfigError};
pub use run::{Run, StageSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Explain,
    Audit,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Train, Stage::Explain, Stage::Audit, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Explain => "explain",
            Stage::Audit => "audit",
            Stage::Report => "report",
        }
    }
}

pub fn run_stage(run: &Run, stage: Stage) -> anyhow::Result<StageSummary> {
    match stage {
        Stage::Generate => run::generate(run),
        Stage::Train => run::train_stage(run),
        Stage::Explain => run::explain_stage(run),
        Stage::Audit => run::audit_stage(run),
        Stage::Report => report_stage(run),
    }
}

/// Rebuilds the report from the record files.
pub fn report_stage(run: &Run) -> anyhow::Result<StageSummary> {
    let records = run::load_records(run)?;
    let built = report::build(&records, &run.config.report);
    let curves = run.records_dir().join("curves.csv");
    report::write(&built, Some(&curves), &run.report_dir())?;
    Ok(StageSummary {
        failures: 0,
        lines: vec![format!(
            "report over {} records written to {}",
            records.len(),
            run.report_dir().display()
        )],
    })
}

/// Sizes the global worker pool; one job runs everything sequentially.
pub fn exec_for_jobs(jobs: usize) -> Exec {
    if jobs > 1 {
        // Fails only when the pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    Exec::from_jobs(jobs)
}
