use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use thiserror::Error;

use super::exec::{execute_isolation, execute_run, ExecError};
use super::plan::{expand_plan, PlanError, RunPlan};
use crate::archive::{save_archive, ArchiveError};
use crate::classify::{classify_matrix, Evidence, Label};
use crate::verdict::{build_matrix, MatrixError, RunRecord, TestId, Verdict, VerdictMatrix};

pub const ARCHIVE_FILE: &str = "archive.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const ISOLATION_FILE: &str = "isolation.csv";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct CampaignOutput {
    pub records: Vec<RunRecord>,
    pub matrix: VerdictMatrix,
    pub isolation: BTreeMap<TestId, Vec<Verdict>>,
    pub archive_path: PathBuf,
}

/// Runs every spec of the plan in order, writes the verdict archive and the
/// run manifest, then reruns each order-dependent test in isolation when the
/// command supports test selection.
pub fn run_campaign(plan: &RunPlan) -> Result<CampaignOutput, CampaignError> {
    let specs = expand_plan(plan)?;
    std::fs::create_dir_all(&plan.output_dir)?;
    let mut records = Vec::with_capacity(specs.len());
    for spec in &specs {
        records.push(execute_run(spec, plan)?);
    }
    let matrix = build_matrix(&records)?;
    let archive_path = plan.output_dir.join(ARCHIVE_FILE);
    save_archive(&matrix, &archive_path)?;
    write_run_manifest(&records, std::fs::File::create(plan.output_dir.join(RUNS_FILE))?)?;

    let mut isolation = BTreeMap::new();
    if plan.isolation_runs > 0 && plan.supports_selection() {
        let od: Vec<TestId> = classify_matrix(&matrix, &Evidence::default())
            .into_iter()
            .filter(|c| matches!(c.label, Label::OrderDependent(_)))
            .map(|c| c.test)
            .collect();
        for test in od {
            info!("isolating {test}");
            isolation.insert(test.clone(), execute_isolation(&test, plan.isolation_runs, plan)?);
        }
        write_isolation(&isolation, std::fs::File::create(plan.output_dir.join(ISOLATION_FILE))?)?;
    }
    Ok(CampaignOutput {
        records,
        matrix,
        isolation,
        archive_path,
    })
}

fn epoch_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Per-run metadata the archive does not carry: timestamps and exit status.
pub fn write_run_manifest<W: Write>(records: &[RunRecord], out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_index", "iteration_id", "started_at", "ended_at", "exit_status", "reported_tests"])?;
    for r in records {
        w.write_record([
            r.run_index.to_string(),
            r.iteration_id.to_string(),
            format!("{:.3}", epoch_seconds(r.started_at)),
            format!("{:.3}", epoch_seconds(r.ended_at)),
            r.exit_status.as_str().to_string(),
            r.verdicts.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Isolation CSV: `test_id, attempt, verdict`.
pub fn write_isolation<W: Write>(
    isolation: &BTreeMap<TestId, Vec<Verdict>>,
    out: W,
) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["test_id", "attempt", "verdict"])?;
    for (test, verdicts) in isolation {
        for (i, v) in verdicts.iter().enumerate() {
            w.write_record([test.to_string(), i.to_string(), v.as_str().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_isolation<R: Read>(input: R) -> Result<BTreeMap<TestId, Vec<Verdict>>, ArchiveError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows: BTreeMap<TestId, BTreeMap<u32, Verdict>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let invalid = |msg: String| ArchiveError::Invalid { line, msg };
        if rec.len() != 3 {
            return Err(invalid("expected test_id,attempt,verdict".into()));
        }
        let test: TestId = rec[0].parse().map_err(|e| invalid(format!("{e}")))?;
        let attempt: u32 = rec[1].parse().map_err(|_| invalid(format!("bad attempt {:?}", &rec[1])))?;
        let verdict: Verdict = rec[2].parse().map_err(|e| invalid(format!("{e}")))?;
        rows.entry(test).or_default().insert(attempt, verdict);
    }
    Ok(rows
        .into_iter()
        .map(|(t, attempts)| (t, attempts.into_values().collect()))
        .collect())
}

pub fn load_isolation(path: &Path) -> Result<BTreeMap<TestId, Vec<Verdict>>, ArchiveError> {
    read_isolation(std::fs::File::open(path)?)
}
