//! Test identity, verdicts and the per-campaign verdict matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::SystemTime;

use thiserror::Error;

const SEP: &str = "::";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TestIdError {
    #[error("test name must not be empty")]
    EmptyName,
    #[error("segment {0:?} must not contain '::' or '['")]
    ReservedChars(String),
    #[error("parametrization {0:?} must be a bracketed suffix")]
    BadParametrization(String),
    #[error("cannot parse test id {0:?}")]
    Unparseable(String),
}

/// Identity of one test case. Each parametrization is its own case.
///
/// The canonical form is `suite_path::class_name::test_name[param]`. An empty
/// class name is elided (`suite_path::test_name`); the suite path is always
/// rendered, even when empty, so the number of separators tells the two
/// shapes apart and the rendering stays injective.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TestId {
    suite_path: String,
    class_name: String,
    test_name: String,
    parametrization: String,
}

impl TestId {
    pub fn new(
        suite_path: impl Into<String>,
        class_name: impl Into<String>,
        test_name: impl Into<String>,
        parametrization: impl Into<String>,
    ) -> Result<Self, TestIdError> {
        let id = TestId {
            suite_path: suite_path.into(),
            class_name: class_name.into(),
            test_name: test_name.into(),
            parametrization: parametrization.into(),
        };
        if id.test_name.is_empty() {
            return Err(TestIdError::EmptyName);
        }
        for seg in [&id.suite_path, &id.class_name, &id.test_name] {
            if seg.contains(SEP) || seg.contains('[') {
                return Err(TestIdError::ReservedChars(seg.clone()));
            }
        }
        let p = &id.parametrization;
        if !p.is_empty() && !(p.starts_with('[') && p.ends_with(']') && p.len() >= 2) {
            return Err(TestIdError::BadParametrization(p.clone()));
        }
        Ok(id)
    }

    /// Splits a raw report name such as `test_sort[3]` into name and
    /// bracketed suffix.
    pub fn from_parts(
        suite_path: impl Into<String>,
        class_name: impl Into<String>,
        raw_name: &str,
    ) -> Result<Self, TestIdError> {
        let (name, param) = split_param(raw_name);
        TestId::new(suite_path, class_name, name, param)
    }

    pub fn suite_path(&self) -> &str {
        &self.suite_path
    }

    pub fn class_name(&self) -> &str {
        &self.class_name
    }

    pub fn test_name(&self) -> &str {
        &self.test_name
    }

    pub fn parametrization(&self) -> &str {
        &self.parametrization
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

fn split_param(raw: &str) -> (&str, &str) {
    match raw.find('[') {
        Some(i) if raw.ends_with(']') => (&raw[..i], &raw[i..]),
        _ => (raw, ""),
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.suite_path)?;
        f.write_str(SEP)?;
        if !self.class_name.is_empty() {
            f.write_str(&self.class_name)?;
            f.write_str(SEP)?;
        }
        f.write_str(&self.test_name)?;
        f.write_str(&self.parametrization)
    }
}

impl FromStr for TestId {
    type Err = TestIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, param) = match s.find('[') {
            Some(i) => (&s[..i], &s[i..]),
            None => (s, ""),
        };
        let parts: Vec<&str> = head.split(SEP).collect();
        match parts.as_slice() {
            [suite, name] => TestId::new(*suite, "", *name, param),
            [suite, class, name] if !class.is_empty() => TestId::new(*suite, *class, *name, param),
            _ => Err(TestIdError::Unparseable(s.to_string())),
        }
    }
}

/// Outcome of one test in one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Pass,
    Fail,
    Error,
    Skip,
    /// Synthesized for a test the campaign knows but a run did not report.
    Absent,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::Pass,
        Verdict::Fail,
        Verdict::Error,
        Verdict::Skip,
        Verdict::Absent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Error => "ERROR",
            Verdict::Skip => "SKIP",
            Verdict::Absent => "ABSENT",
        }
    }

    /// FAIL or ERROR.
    pub fn is_non_pass(self) -> bool {
        matches!(self, Verdict::Fail | Verdict::Error)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown verdict {0:?}")]
pub struct UnknownVerdict(pub String);

impl FromStr for Verdict {
    type Err = UnknownVerdict;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| UnknownVerdict(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrderMode {
    SameOrder,
    Shuffled(u64),
}

impl OrderMode {
    pub fn kind(self) -> OrderKind {
        match self {
            OrderMode::SameOrder => OrderKind::Same,
            OrderMode::Shuffled(_) => OrderKind::Shuffled,
        }
    }

    pub fn seed(self) -> Option<u64> {
        match self {
            OrderMode::SameOrder => None,
            OrderMode::Shuffled(seed) => Some(seed),
        }
    }
}

/// Order mode without its seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrderKind {
    Same,
    Shuffled,
}

impl OrderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OrderKind::Same => "same",
            OrderKind::Shuffled => "shuffled",
        }
    }
}

impl FromStr for OrderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(OrderKind::Same),
            "shuffled" => Ok(OrderKind::Shuffled),
            other => Err(format!("unknown order mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Completed,
    Timeout,
    Crashed,
}

impl ExitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitStatus::Completed => "Completed",
            ExitStatus::Timeout => "Timeout",
            ExitStatus::Crashed => "Crashed",
        }
    }
}

/// Verdict and duration (seconds) of one reported test case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub verdict: Verdict,
    pub duration_s: f64,
}

/// Everything recorded about one execution of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_index: u32,
    pub iteration_id: u32,
    pub order_mode: OrderMode,
    pub machine_fingerprint: String,
    pub started_at: SystemTime,
    pub ended_at: SystemTime,
    pub verdicts: BTreeMap<TestId, Outcome>,
    pub exit_status: ExitStatus,
}

/// The per-run columns a verdict matrix keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunInfo {
    pub run_index: u32,
    pub iteration_id: u32,
    pub order_mode: OrderMode,
    pub machine_fingerprint: String,
}

impl From<&RunRecord> for RunInfo {
    fn from(r: &RunRecord) -> Self {
        RunInfo {
            run_index: r.run_index,
            iteration_id: r.iteration_id,
            order_mode: r.order_mode,
            machine_fingerprint: r.machine_fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub verdict: Verdict,
    /// `None` exactly when the verdict is ABSENT.
    pub duration_s: Option<f64>,
}

impl Cell {
    pub const ABSENT: Cell = Cell {
        verdict: Verdict::Absent,
        duration_s: None,
    };
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixError {
    #[error("no run records")]
    NoRecords,
    #[error("duplicate run index {0}")]
    DuplicateRunIndex(u32),
    #[error("iteration {0} spans more than one machine")]
    MixedMachines(u32),
    #[error("unknown test {0}")]
    UnknownTest(TestId),
}

/// Selects a subset of runs by order kind and/or iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunFilter {
    pub order: Option<OrderKind>,
    pub iteration: Option<u32>,
}

impl RunFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn order(kind: OrderKind) -> Self {
        RunFilter {
            order: Some(kind),
            iteration: None,
        }
    }

    pub fn iteration(id: u32) -> Self {
        RunFilter {
            order: None,
            iteration: Some(id),
        }
    }

    pub fn matches(&self, run: &RunInfo) -> bool {
        self.order.is_none_or(|k| run.order_mode.kind() == k)
            && self.iteration.is_none_or(|i| run.iteration_id == i)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerdictCounts {
    pub pass: u32,
    pub fail: u32,
    pub error: u32,
    pub skip: u32,
    pub absent: u32,
}

impl VerdictCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Pass => self.pass += 1,
            Verdict::Fail => self.fail += 1,
            Verdict::Error => self.error += 1,
            Verdict::Skip => self.skip += 1,
            Verdict::Absent => self.absent += 1,
        }
    }

    pub fn from_verdicts<I: IntoIterator<Item = Verdict>>(verdicts: I) -> Self {
        let mut c = Self::default();
        verdicts.into_iter().for_each(|v| c.add(v));
        c
    }

    pub fn get(&self, v: Verdict) -> u32 {
        match v {
            Verdict::Pass => self.pass,
            Verdict::Fail => self.fail,
            Verdict::Error => self.error,
            Verdict::Skip => self.skip,
            Verdict::Absent => self.absent,
        }
    }

    pub fn total(&self) -> u32 {
        self.pass + self.fail + self.error + self.skip + self.absent
    }

    pub fn non_pass(&self) -> u32 {
        self.fail + self.error
    }

    /// Runs in which the test was reported at all (everything but ABSENT).
    pub fn executed(&self) -> u32 {
        self.total() - self.absent
    }

    /// Runs that produced a pass/non-pass decision.
    pub fn decisive(&self) -> u32 {
        self.pass + self.non_pass()
    }
}

impl std::ops::Add for VerdictCounts {
    type Output = VerdictCounts;

    fn add(self, o: VerdictCounts) -> VerdictCounts {
        VerdictCounts {
            pass: self.pass + o.pass,
            fail: self.fail + o.fail,
            error: self.error + o.error,
            skip: self.skip + o.skip,
            absent: self.absent + o.absent,
        }
    }
}

/// Total `tests × runs` grid of verdicts. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictMatrix {
    tests: Vec<TestId>,
    index: HashMap<TestId, usize>,
    runs: Vec<RunInfo>,
    // row-major: one row of `runs.len()` cells per test
    cells: Vec<Cell>,
}

impl VerdictMatrix {
    /// Assembles a matrix from per-run cell maps. Runs are sorted by index,
    /// the test set is the union over all runs, and holes become ABSENT.
    pub fn from_runs(
        runs: Vec<(RunInfo, BTreeMap<TestId, Cell>)>,
    ) -> Result<Self, MatrixError> {
        if runs.is_empty() {
            return Err(MatrixError::NoRecords);
        }
        let mut runs = runs;
        runs.sort_by_key(|(info, _)| info.run_index);
        let mut machines: HashMap<u32, &str> = HashMap::new();
        for w in runs.windows(2) {
            if w[0].0.run_index == w[1].0.run_index {
                return Err(MatrixError::DuplicateRunIndex(w[0].0.run_index));
            }
        }
        for (info, _) in &runs {
            let m = machines
                .entry(info.iteration_id)
                .or_insert(info.machine_fingerprint.as_str());
            if *m != info.machine_fingerprint {
                return Err(MatrixError::MixedMachines(info.iteration_id));
            }
        }
        let tests: Vec<TestId> = runs
            .iter()
            .flat_map(|(_, cells)| cells.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<TestId, usize> =
            tests.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let width = runs.len();
        let mut cells = vec![Cell::ABSENT; tests.len() * width];
        for (col, (_, row)) in runs.iter().enumerate() {
            for (test, cell) in row {
                cells[index[test] * width + col] = *cell;
            }
        }
        Ok(VerdictMatrix {
            tests,
            index,
            runs: runs.into_iter().map(|(info, _)| info).collect(),
            cells,
        })
    }

    pub fn tests(&self) -> &[TestId] {
        &self.tests
    }

    pub fn runs(&self) -> &[RunInfo] {
        &self.runs
    }

    pub fn contains(&self, test: &TestId) -> bool {
        self.index.contains_key(test)
    }

    fn row(&self, test: &TestId) -> Result<&[Cell], MatrixError> {
        let i = *self
            .index
            .get(test)
            .ok_or_else(|| MatrixError::UnknownTest(test.clone()))?;
        let w = self.runs.len();
        Ok(&self.cells[i * w..(i + 1) * w])
    }

    /// Cell at (test, position of the run in `runs()`).
    pub fn cell(&self, test: &TestId, run_pos: usize) -> Result<Cell, MatrixError> {
        Ok(self.row(test)?[run_pos])
    }

    pub fn verdict(&self, test: &TestId, run_pos: usize) -> Result<Verdict, MatrixError> {
        self.cell(test, run_pos).map(|c| c.verdict)
    }

    /// Verdicts of `test` over the runs selected by `filter`, in run order.
    pub fn sequence(&self, test: &TestId, filter: RunFilter) -> Result<Vec<Verdict>, MatrixError> {
        let row = self.row(test)?;
        Ok(self
            .runs
            .iter()
            .zip(row)
            .filter(|(run, _)| filter.matches(run))
            .map(|(_, c)| c.verdict)
            .collect())
    }

    pub fn verdict_counts(
        &self,
        test: &TestId,
        filter: RunFilter,
    ) -> Result<VerdictCounts, MatrixError> {
        Ok(VerdictCounts::from_verdicts(self.sequence(test, filter)?))
    }

    /// Distinct iteration ids of the runs selected by `filter`, ascending.
    pub fn iterations(&self, filter: RunFilter) -> Vec<u32> {
        self.runs
            .iter()
            .filter(|r| filter.matches(r))
            .map(|r| r.iteration_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn run_count(&self, filter: RunFilter) -> usize {
        self.runs.iter().filter(|r| filter.matches(r)).count()
    }

    /// Keeps only the runs matching `filter`; the test set is unchanged.
    pub fn select(&self, filter: RunFilter) -> VerdictMatrix {
        let keep: Vec<usize> = (0..self.runs.len())
            .filter(|&i| filter.matches(&self.runs[i]))
            .collect();
        let w = self.runs.len();
        let mut cells = Vec::with_capacity(self.tests.len() * keep.len());
        for t in 0..self.tests.len() {
            cells.extend(keep.iter().map(|&c| self.cells[t * w + c]));
        }
        VerdictMatrix {
            tests: self.tests.clone(),
            index: self.index.clone(),
            runs: keep.iter().map(|&i| self.runs[i].clone()).collect(),
            cells,
        }
    }

    /// Splits into the same-order and shuffled sub-matrices.
    pub fn partition_by_order(&self) -> (VerdictMatrix, VerdictMatrix) {
        (
            self.select(RunFilter::order(OrderKind::Same)),
            self.select(RunFilter::order(OrderKind::Shuffled)),
        )
    }
}

/// Builds the verdict matrix of a campaign from its run records.
pub fn build_matrix(records: &[RunRecord]) -> Result<VerdictMatrix, MatrixError> {
    VerdictMatrix::from_runs(
        records
            .iter()
            .map(|r| {
                let cells = r
                    .verdicts
                    .iter()
                    .map(|(t, o)| {
                        let cell = if o.verdict == Verdict::Absent {
                            Cell::ABSENT
                        } else {
                            Cell {
                                verdict: o.verdict,
                                duration_s: Some(o.duration_s),
                            }
                        };
                        (t.clone(), cell)
                    })
                    .collect();
                (RunInfo::from(r), cells)
            })
            .collect(),
    )
}
