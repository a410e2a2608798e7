//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad arguments, config or input files, 3 a
//! campaign that could not be carried out or an oracle disagreement.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::archive::{load_archive, ArchiveError};
use crate::classify::{
    classify_matrix, read_trace_dir, stratified_sample, write_classifications, Classification, Evidence,
    KeywordError, KeywordTable, Label,
};
use crate::orchestrator::{load_isolation, run_campaign, CampaignError, PlanError, RunPlan, ISOLATION_FILE};
use crate::report::{
    category_rows, category_table, group_rates, group_table, parse_tags, write_category_csv,
    write_group_csv, ProjectMeta, TextTable,
};
use crate::stats::{
    aggregate_summary, confidence_label, monte_carlo_unveil, oracle_grid, unveil_probability, write_curve,
    write_estimates, RerunEstimate, StatsError,
};
use crate::verdict::{OrderKind, RunFilter, VerdictMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;

/// Allowed gap between the closed-form unveil probability and the
/// simulated one in `oracle` mode.
pub const ORACLE_TOLERANCE: f64 = 0.01;
pub const ORACLE_RUNS: [u64; 6] = [1, 2, 5, 10, 50, 170];

#[derive(Debug, Parser)]
#[command(name = "flakelab", version, about = "Detect, classify and budget flaky tests by reruns")]
pub struct Cli {
    /// Seed for every randomized operation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print aligned text tables instead of CSV on stdout.
    #[arg(long, global = true)]
    pub table: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    All,
    Same,
    Shuffled,
}

impl ModeArg {
    fn filter(self) -> RunFilter {
        match self {
            ModeArg::All => RunFilter::all(),
            ModeArg::Same => RunFilter::order(OrderKind::Same),
            ModeArg::Shuffled => RunFilter::order(OrderKind::Shuffled),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a rerun campaign and write its verdict archive.
    Run { config: PathBuf },
    /// Label every test of an archive with its root cause.
    Classify {
        archive: PathBuf,
        /// Isolation verdicts (defaults to isolation.csv next to the archive).
        #[arg(long)]
        isolation: Option<PathBuf>,
        /// Directory of trace files.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Directory that test suite paths are relative to.
        #[arg(long)]
        source_root: Option<PathBuf>,
        /// Keyword table replacing the built-in one.
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Per-test rates and rerun estimates, with discovery curves.
    Estimate {
        archive: PathBuf,
        #[arg(long = "confidence", default_values_t = [0.5, 0.95])]
        confidences: Vec<f64>,
        /// Which runs the rates are computed from.
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the curve CSV here.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Root-cause table, or flakiness rates grouped by a project tag.
    Report {
        #[arg(required = true)]
        archives: Vec<PathBuf>,
        /// Project tags (TOML, one table per project id).
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        group_by: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Pick one non-order-dependent test from each of k random projects.
    Sample {
        #[arg(required = true)]
        archives: Vec<PathBuf>,
        #[arg(short)]
        k: usize,
    },
    /// Compare the closed-form unveil probability with simulation.
    Oracle {
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Keywords(#[from] KeywordError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error("{0}")]
    Usage(String),
    #[error("oracle disagreement in {0} cases")]
    OracleMismatch(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Campaign(CampaignError::Plan(_)) => EXIT_USAGE,
            CliError::Campaign(CampaignError::Exec(crate::orchestrator::ExecError::WorkdirMissing(_))) => EXIT_USAGE,
            CliError::Campaign(_) | CliError::OracleMismatch(_) => EXIT_ABORTED,
            _ => EXIT_USAGE,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code. Output goes to `stdout`, diagnostics to `stderr`.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Writes a CSV document: to `output` if given, and to stdout unless it went
/// to a file; `--table` renders the stdout copy as aligned text.
fn emit(cli: &Cli, csv: Vec<u8>, output: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    if let Some(path) = output {
        std::fs::write(path, &csv)?;
        if !cli.table {
            return Ok(());
        }
    }
    if cli.table {
        let text = String::from_utf8(csv).map_err(|e| CliError::Usage(e.to_string()))?;
        stdout.write_all(TextTable::from_csv(&text)?.render().as_bytes())?;
    } else {
        stdout.write_all(&csv)?;
    }
    Ok(())
}

fn sibling_isolation(archive: &Path) -> Option<PathBuf> {
    let candidate = archive.with_file_name(ISOLATION_FILE);
    candidate.is_file().then_some(candidate)
}

fn load_evidence<'a>(
    matrix: &VerdictMatrix,
    archive: &Path,
    isolation: Option<&Path>,
    traces: Option<&Path>,
    source_root: Option<&Path>,
    keywords: Option<&'a KeywordTable>,
) -> Result<Evidence<'a>, CliError> {
    let mut evidence = Evidence {
        keywords,
        ..Default::default()
    };
    if let Some(path) = isolation.map(Path::to_path_buf).or_else(|| sibling_isolation(archive)) {
        evidence.isolation = load_isolation(&path)?;
    }
    if let Some(dir) = traces {
        evidence.traces = read_trace_dir(dir)?;
    }
    if let Some(root) = source_root {
        let suites: BTreeSet<&str> = matrix.tests().iter().map(|t| t.suite_path()).collect();
        for suite in suites {
            if let Ok(text) = std::fs::read_to_string(root.join(suite)) {
                evidence.sources.insert(suite.to_string(), text);
            }
        }
    }
    Ok(evidence)
}

fn classify_archive(archive: &Path) -> Result<(VerdictMatrix, Vec<Classification>), CliError> {
    let matrix = load_archive(archive)?;
    let evidence = load_evidence(&matrix, archive, None, None, None, None)?;
    let labels = classify_matrix(&matrix, &evidence);
    Ok((matrix, labels))
}

/// Project id of an archive: its file stem, or the directory name for the
/// `archive.csv` a campaign writes.
pub fn project_id(archive: &Path) -> String {
    let stem = archive.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "archive" {
        if let Some(dir) = archive.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

/// Rerun estimates over the runs selected by `filter`, skipping tests
/// labelled infrastructure (their failures come in bulks, not independently)
/// and tests never executed there.
pub fn estimates_for(
    matrix: &VerdictMatrix,
    labels: &[Classification],
    filter: RunFilter,
    confidences: &[f64],
) -> Result<Vec<RerunEstimate>, StatsError> {
    let mut out = Vec::new();
    for c in labels {
        if c.label == Label::Infrastructure {
            continue;
        }
        let seq = matrix.sequence(&c.test, filter).expect("label comes from the matrix");
        match RerunEstimate::from_sequence(c.test.clone(), &seq, confidences) {
            Ok(e) => out.push(e),
            Err(StatsError::ZeroExecutions) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { config } => {
            let plan = RunPlan::load(config)?;
            let out = run_campaign(&plan)?;
            let labels = classify_matrix(&out.matrix, &Evidence {
                isolation: out.isolation.clone(),
                ..Default::default()
            });
            let table = category_table(&labels);
            writeln!(
                stdout,
                "{} runs, {} tests, {} flaky; archive written to {}",
                out.records.len(),
                out.matrix.tests().len(),
                table.flaky(),
                out.archive_path.display()
            )?;
        }
        Command::Classify {
            archive,
            isolation,
            traces,
            source_root,
            keywords,
            output,
        } => {
            let table = keywords.as_deref().map(KeywordTable::load).transpose()?;
            let matrix = load_archive(archive)?;
            let evidence = load_evidence(
                &matrix,
                archive,
                isolation.as_deref(),
                traces.as_deref(),
                source_root.as_deref(),
                table.as_ref(),
            )?;
            let labels = classify_matrix(&matrix, &evidence);
            let mut buf = Vec::new();
            write_classifications(&labels, &mut buf)?;
            emit(cli, buf, output.as_deref(), stdout)?;
        }
        Command::Estimate {
            archive,
            confidences,
            mode,
            output,
            curve,
        } => {
            for &p in confidences {
                if !(p > 0.0 && p < 1.0) {
                    return Err(StatsError::InvalidConfidence(p).into());
                }
            }
            let (matrix, labels) = classify_archive(archive)?;
            let filter = mode.filter();
            let estimates = estimates_for(&matrix, &labels, filter, confidences)?;
            let mut buf = Vec::new();
            write_estimates(&estimates, &mut buf)?;
            emit(cli, buf, output.as_deref(), stdout)?;
            if estimates.is_empty() {
                writeln!(stderr, "no tests to estimate")?;
                return Ok(());
            }
            let summary = aggregate_summary(&estimates, confidences, matrix.run_count(filter) as u64)?;
            if let Some(path) = curve {
                let mut buf = Vec::new();
                write_curve(&summary, &mut buf)?;
                std::fs::write(path, buf)?;
            }
            let mut t = TextTable::new(["confidence", "median reruns", "reachable", "unreachable"]);
            for c in &summary.confidences {
                t.push([
                    confidence_label(c.confidence),
                    c.median.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                    c.reachable.to_string(),
                    c.unreachable.to_string(),
                ]);
            }
            write!(stderr, "{}", t.render())?;
        }
        Command::Report {
            archives,
            tags,
            group_by,
            output,
        } => {
            let tags = match tags {
                Some(path) => parse_tags(&std::fs::read_to_string(path)?)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
                None => BTreeMap::new(),
            };
            let mut projects = Vec::new();
            let mut all_labels = Vec::new();
            for archive in archives {
                let (_, labels) = classify_archive(archive)?;
                let id = project_id(archive);
                let project_tags = tags.get(&id).cloned().unwrap_or_default();
                projects.push(ProjectMeta::from_classifications(id, &labels, project_tags));
                all_labels.extend(labels);
            }
            let mut buf = Vec::new();
            match group_by {
                Some(key) => {
                    let rows = group_rates(&projects, key);
                    if cli.table && output.is_none() {
                        stdout.write_all(group_table(key, &rows).render().as_bytes())?;
                        return Ok(());
                    }
                    write_group_csv(key, &rows, &mut buf)?;
                }
                None => {
                    let table = category_table(&all_labels);
                    if cli.table && output.is_none() {
                        stdout.write_all(category_rows(&table).render().as_bytes())?;
                        return Ok(());
                    }
                    write_category_csv(&table, &mut buf)?;
                }
            }
            emit(cli, buf, output.as_deref(), stdout)?;
        }
        Command::Sample { archives, k } => {
            let mut by_project = BTreeMap::new();
            for archive in archives {
                let (_, labels) = classify_archive(archive)?;
                let nod: BTreeSet<_> = labels
                    .into_iter()
                    .filter(|c| matches!(c.label, Label::NonOrderDependent(_)))
                    .map(|c| c.test)
                    .collect();
                by_project.insert(project_id(archive), nod);
            }
            let picked = stratified_sample(&by_project, *k, cli.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            for t in picked {
                writeln!(stdout, "{t}")?;
            }
        }
        Command::Oracle { trials } => {
            if *trials == 0 {
                return Err(CliError::Usage("trials must be positive".into()));
            }
            let mut csv = csv::Writer::from_writer(Vec::new());
            csv.write_record(["p_pass", "p_fail_error", "p_skip", "n", "analytic", "simulated", "abs_diff", "status"])
                .map_err(ArchiveError::from)?;
            let mut failures = 0;
            for (i, rates) in oracle_grid().iter().enumerate() {
                for (j, &n) in ORACLE_RUNS.iter().enumerate() {
                    let analytic = unveil_probability(rates, n);
                    let seed = cli.seed.wrapping_add((i * ORACLE_RUNS.len() + j) as u64);
                    let simulated = monte_carlo_unveil(rates, n, *trials, seed);
                    let diff = (analytic - simulated).abs();
                    let ok = diff <= ORACLE_TOLERANCE;
                    failures += usize::from(!ok);
                    csv.write_record([
                        rates.p_pass.to_string(),
                        rates.p_fail_error.to_string(),
                        rates.p_skip.to_string(),
                        n.to_string(),
                        format!("{analytic:.6}"),
                        format!("{simulated:.6}"),
                        format!("{diff:.6}"),
                        (if ok { "PASS" } else { "FAIL" }).to_string(),
                    ])
                    .map_err(ArchiveError::from)?;
                }
            }
            let buf = csv.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
            emit(cli, buf, None, stdout)?;
            if failures > 0 {
                return Err(CliError::OracleMismatch(failures));
            }
        }
    }
    Ok(())
}
