//! Root-cause classification of flaky tests.
//!
//! Decision order for one test, over its same-order and shuffled runs:
//!
//! 1. no PASS together with a FAIL/ERROR anywhere → not flaky;
//! 2. flaky, but no single iteration (in either order mode) mixes a PASS
//!    with a FAIL/ERROR → infrastructure;
//! 3. flaky among the same-order runs → non-order-dependent;
//! 4. otherwise (flaky only once the order is shuffled) → order-dependent.
//!
//! Infrastructure is checked first: its condition rules out the mixing that
//! non-order-dependent flakiness needs. Order-dependent tests are refined by
//! rerunning them in isolation (victim vs. brittle).

mod keywords;
mod sample;

pub use keywords::{
    keyword_hints, read_trace_dir, Category, CategoryHint, HintSource, KeywordError, KeywordTable,
    DEFAULT_KEYWORDS,
};
pub use sample::{stratified_sample, SampleError};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::archive::ArchiveError;
use crate::verdict::{OrderKind, RunFilter, TestId, Verdict, VerdictCounts, VerdictMatrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("test {0} is in neither matrix")]
    UnknownTest(TestId),
    #[error("iteration {0} has no runs")]
    UnknownIteration(u32),
    #[error("test {0} has fewer than 2 passing/failing executions")]
    InsufficientData(TestId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OdKind {
    Victim,
    Brittle,
    Undetermined,
}

impl OdKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OdKind::Victim => "Victim",
            OdKind::Brittle => "Brittle",
            OdKind::Undetermined => "Undetermined",
        }
    }
}

/// Root cause before order-dependent tests are refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RootCause {
    NotFlaky,
    Infrastructure,
    OrderDependent,
    NonOrderDependent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    NotFlaky,
    InsufficientData,
    Infrastructure,
    OrderDependent(OdKind),
    NonOrderDependent(BTreeSet<CategoryHint>),
}

impl Label {
    pub fn name(&self) -> &'static str {
        match self {
            Label::NotFlaky => "NotFlaky",
            Label::InsufficientData => "InsufficientData",
            Label::Infrastructure => "Infrastructure",
            Label::OrderDependent(_) => "OrderDependent",
            Label::NonOrderDependent(_) => "NonOrderDependent",
        }
    }

    pub fn is_flaky(&self) -> bool {
        matches!(
            self,
            Label::Infrastructure | Label::OrderDependent(_) | Label::NonOrderDependent(_)
        )
    }

    pub fn od_kind(&self) -> Option<OdKind> {
        match self {
            Label::OrderDependent(k) => Some(*k),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub test: TestId,
    pub label: Label,
}

/// A test is flaky if it passed at least once and failed or errored at
/// least once.
pub fn is_flaky(counts: &VerdictCounts) -> bool {
    counts.pass >= 1 && counts.non_pass() >= 1
}

pub fn flaky_within_iteration(
    matrix: &VerdictMatrix,
    test: &TestId,
    iteration_id: u32,
) -> Result<bool, ClassifyError> {
    let filter = RunFilter::iteration(iteration_id);
    if matrix.run_count(filter) == 0 {
        return Err(ClassifyError::UnknownIteration(iteration_id));
    }
    let counts = matrix
        .verdict_counts(test, filter)
        .map_err(|_| ClassifyError::UnknownTest(test.clone()))?;
    Ok(is_flaky(&counts))
}

fn counts_or_empty(matrix: &VerdictMatrix, test: &TestId) -> Option<VerdictCounts> {
    matrix.verdict_counts(test, RunFilter::all()).ok()
}

fn mixes_within_some_iteration(matrix: &VerdictMatrix, test: &TestId) -> bool {
    matrix.contains(test)
        && matrix
            .iterations(RunFilter::all())
            .into_iter()
            .any(|i| flaky_within_iteration(matrix, test, i).unwrap_or(false))
}

/// Applies the decision order from the module docs. `same` and `shuffled`
/// hold the same-order and shuffled runs; either may lack the test.
pub fn classify_root_cause(
    same: &VerdictMatrix,
    shuffled: &VerdictMatrix,
    test: &TestId,
) -> Result<RootCause, ClassifyError> {
    let same_counts = counts_or_empty(same, test);
    let shuffled_counts = counts_or_empty(shuffled, test);
    if same_counts.is_none() && shuffled_counts.is_none() {
        return Err(ClassifyError::UnknownTest(test.clone()));
    }
    let same_counts = same_counts.unwrap_or_default();
    let union = same_counts + shuffled_counts.unwrap_or_default();
    if union.decisive() < 2 {
        return Err(ClassifyError::InsufficientData(test.clone()));
    }
    if !is_flaky(&union) {
        return Ok(RootCause::NotFlaky);
    }
    if !mixes_within_some_iteration(same, test) && !mixes_within_some_iteration(shuffled, test) {
        return Ok(RootCause::Infrastructure);
    }
    if is_flaky(&same_counts) {
        Ok(RootCause::NonOrderDependent)
    } else {
        Ok(RootCause::OrderDependent)
    }
}

/// Victim if every isolated run passed, brittle if every one failed or
/// errored, undetermined otherwise (mixtures, skips, missing runs).
pub fn classify_od_kind(isolation: &[Verdict]) -> OdKind {
    if isolation.is_empty() {
        OdKind::Undetermined
    } else if isolation.iter().all(|v| *v == Verdict::Pass) {
        OdKind::Victim
    } else if isolation.iter().all(|v| v.is_non_pass()) {
        OdKind::Brittle
    } else {
        OdKind::Undetermined
    }
}

/// Side inputs for refining labels. Missing entries are fine: an
/// order-dependent test without isolation runs is undetermined, a test
/// without trace or source gets no hints.
#[derive(Debug, Default)]
pub struct Evidence<'a> {
    pub isolation: BTreeMap<TestId, Vec<Verdict>>,
    pub traces: BTreeMap<TestId, Vec<String>>,
    /// Test source text keyed by suite path.
    pub sources: BTreeMap<String, String>,
    /// Defaults to the built-in table.
    pub keywords: Option<&'a KeywordTable>,
}

/// Labels one test, folding the error cases into labels.
pub fn classify_test(
    same: &VerdictMatrix,
    shuffled: &VerdictMatrix,
    test: &TestId,
    evidence: &Evidence<'_>,
) -> Result<Classification, ClassifyError> {
    let label = match classify_root_cause(same, shuffled, test) {
        Err(ClassifyError::InsufficientData(_)) => Label::InsufficientData,
        Err(e) => return Err(e),
        Ok(RootCause::NotFlaky) => Label::NotFlaky,
        Ok(RootCause::Infrastructure) => Label::Infrastructure,
        Ok(RootCause::OrderDependent) => Label::OrderDependent(classify_od_kind(
            evidence.isolation.get(test).map(Vec::as_slice).unwrap_or(&[]),
        )),
        Ok(RootCause::NonOrderDependent) => {
            let table = evidence.keywords.unwrap_or_else(|| KeywordTable::default_table());
            let trace = evidence.traces.get(test).map(Vec::as_slice).unwrap_or(&[]);
            let source = evidence.sources.get(test.suite_path()).map(String::as_str).unwrap_or("");
            Label::NonOrderDependent(table.hints(trace, source))
        }
    };
    Ok(Classification {
        test: test.clone(),
        label,
    })
}

/// Classifies every test of a campaign matrix, in test order.
pub fn classify_matrix(matrix: &VerdictMatrix, evidence: &Evidence<'_>) -> Vec<Classification> {
    let same = matrix.select(RunFilter::order(OrderKind::Same));
    let shuffled = matrix.select(RunFilter::order(OrderKind::Shuffled));
    matrix
        .tests()
        .par_iter()
        .map(|t| classify_test(&same, &shuffled, t, evidence).expect("test comes from the matrix"))
        .collect()
}

/// Classification CSV: `test_id, label, od_kind, hint_categories, matched_keywords`.
pub fn write_classifications<W: Write>(rows: &[Classification], out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["test_id", "label", "od_kind", "hint_categories", "matched_keywords"])?;
    for c in rows {
        let (categories, keywords) = match &c.label {
            Label::NonOrderDependent(hints) => {
                let cats: BTreeSet<&str> = hints.iter().map(|h| h.category.as_str()).collect();
                let kws: BTreeSet<&str> = hints
                    .iter()
                    .flat_map(|h| h.matched_keywords.iter().map(String::as_str))
                    .collect();
                (join(cats), join(kws))
            }
            _ => (String::new(), String::new()),
        };
        w.write_record([
            c.test.to_string(),
            c.label.name().to_string(),
            c.label.od_kind().map(|k| k.as_str().to_string()).unwrap_or_default(),
            categories,
            keywords,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn join(items: BTreeSet<&str>) -> String {
    items.into_iter().collect::<Vec<_>>().join(";")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verdict::{Cell, OrderMode, RunInfo};
    use Verdict::*;

    fn t() -> TestId {
        "t.py::test_x".parse().unwrap()
    }

    /// One matrix for a single test; `iterations[i]` lists the verdicts of
    /// iteration `i`. Shuffled iterations follow the same-order ones.
    fn matrix(same: &[&[Verdict]], shuffled: &[&[Verdict]]) -> VerdictMatrix {
        let mut runs = Vec::new();
        let mut index = 0;
        let all = same
            .iter()
            .map(|it| (false, it))
            .chain(shuffled.iter().map(|it| (true, it)));
        for (iteration, (is_shuffled, verdicts)) in all.enumerate() {
            for v in verdicts.iter() {
                let info = RunInfo {
                    run_index: index,
                    iteration_id: iteration as u32,
                    order_mode: if is_shuffled {
                        OrderMode::Shuffled(index as u64)
                    } else {
                        OrderMode::SameOrder
                    },
                    machine_fingerprint: format!("m{iteration}"),
                };
                let cell = match v {
                    Absent => Cell::ABSENT,
                    v => Cell {
                        verdict: *v,
                        duration_s: Some(0.0),
                    },
                };
                runs.push((info, BTreeMap::from([(t(), cell)])));
                index += 1;
            }
        }
        VerdictMatrix::from_runs(runs).unwrap()
    }

    fn root(m: &VerdictMatrix) -> Result<RootCause, ClassifyError> {
        let (same, shuffled) = m.partition_by_order();
        classify_root_cause(&same, &shuffled, &t())
    }

    #[test]
    fn is_flaky_examples() {
        let c = |pass, fail, skip| VerdictCounts {
            pass,
            fail,
            skip,
            ..Default::default()
        };
        assert!(!is_flaky(&c(200, 0, 0)));
        assert!(is_flaky(&c(199, 1, 0)));
        assert!(!is_flaky(&c(0, 0, 200)));
        assert!(is_flaky(&VerdictCounts {
            pass: 1,
            error: 1,
            ..Default::default()
        }));
    }

    #[test]
    fn within_iteration_examples() {
        let m = matrix(&[&[Pass; 20], &[Pass, Fail, Pass], &[Fail; 20]], &[]);
        assert!(!flaky_within_iteration(&m, &t(), 0).unwrap());
        assert!(flaky_within_iteration(&m, &t(), 1).unwrap());
        assert!(!flaky_within_iteration(&m, &t(), 2).unwrap());
        assert_eq!(
            flaky_within_iteration(&m, &t(), 7),
            Err(ClassifyError::UnknownIteration(7))
        );
    }

    #[test]
    fn infrastructure_bulks() {
        let m = matrix(&[&[Pass; 20], &[Fail; 20], &[Pass; 20]], &[&[Pass; 20]]);
        assert_eq!(root(&m), Ok(RootCause::Infrastructure));
    }

    #[test]
    fn same_order_mix_is_nod() {
        let m = matrix(&[&[Pass, Fail, Pass], &[Pass; 3]], &[&[Pass; 3]]);
        assert_eq!(root(&m), Ok(RootCause::NonOrderDependent));
    }

    #[test]
    fn shuffled_only_mix_is_od() {
        let m = matrix(&[&[Pass; 5], &[Pass; 5]], &[&[Pass, Fail, Fail, Pass]]);
        assert_eq!(root(&m), Ok(RootCause::OrderDependent));
    }

    #[test]
    fn not_flaky_and_insufficient() {
        assert_eq!(root(&matrix(&[&[Pass; 5]], &[&[Pass; 5]])), Ok(RootCause::NotFlaky));
        assert_eq!(root(&matrix(&[&[Skip; 5]], &[])), Err(ClassifyError::InsufficientData(t())));
        assert_eq!(
            root(&matrix(&[&[Pass, Absent, Skip]], &[&[Absent]])),
            Err(ClassifyError::InsufficientData(t()))
        );
        assert_eq!(root(&matrix(&[&[Pass, Absent, Pass]], &[])), Ok(RootCause::NotFlaky));
    }

    #[test]
    fn bulks_across_modes_without_mixing_are_infrastructure() {
        // same order all pass, one shuffled iteration all fails
        let m = matrix(&[&[Pass; 4]], &[&[Fail; 4]]);
        assert_eq!(root(&m), Ok(RootCause::Infrastructure));
    }

    #[test]
    fn unknown_test() {
        let m = matrix(&[&[Pass]], &[]);
        let (same, shuffled) = m.partition_by_order();
        let other: TestId = "t.py::nope".parse().unwrap();
        assert_eq!(
            classify_root_cause(&same, &shuffled, &other),
            Err(ClassifyError::UnknownTest(other))
        );
    }

    #[test]
    fn od_kind_examples() {
        assert_eq!(classify_od_kind(&[Pass; 10]), OdKind::Victim);
        assert_eq!(classify_od_kind(&[Fail; 10]), OdKind::Brittle);
        assert_eq!(classify_od_kind(&[Fail, Error, Fail]), OdKind::Brittle);
        assert_eq!(classify_od_kind(&[Absent; 10]), OdKind::Undetermined);
        assert_eq!(classify_od_kind(&[Pass, Fail]), OdKind::Undetermined);
        assert_eq!(classify_od_kind(&[Pass, Skip]), OdKind::Undetermined);
        assert_eq!(classify_od_kind(&[]), OdKind::Undetermined);
    }

    #[test]
    fn matrix_classification_with_evidence() {
        let od = matrix(&[&[Pass; 5]], &[&[Pass, Fail]]);
        let mut evidence = Evidence::default();
        let labels = classify_matrix(&od, &evidence);
        assert_eq!(labels[0].label, Label::OrderDependent(OdKind::Undetermined));
        evidence.isolation.insert(t(), vec![Pass; 10]);
        assert_eq!(classify_matrix(&od, &evidence)[0].label, Label::OrderDependent(OdKind::Victim));

        let nod = matrix(&[&[Pass, Fail]], &[]);
        evidence.traces.insert(t(), vec!["random.random".into()]);
        evidence.sources.insert("t.py".into(), "import time\n".into());
        let label = &classify_matrix(&nod, &evidence)[0].label;
        let Label::NonOrderDependent(hints) = label else {
            panic!("{label:?}")
        };
        let cats: BTreeSet<Category> = hints.iter().map(|h| h.category).collect();
        assert_eq!(cats, BTreeSet::from([Category::Random, Category::Time]));

        let mut buf = Vec::new();
        write_classifications(&classify_matrix(&nod, &evidence), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "test_id,label,od_kind,hint_categories,matched_keywords\n\
             t.py::test_x,NonOrderDependent,,Random;Time,random;time\n"
        );
    }
}
