//! JUnit-XML ingestion.

use std::collections::BTreeMap;

use log::warn;
use thiserror::Error;

use crate::verdict::{Outcome, TestId, TestIdError, Verdict};

#[derive(Debug, Error)]
pub enum JunitError {
    #[error("malformed report: {0}")]
    MalformedXml(String),
    #[error("report contains no testcase elements")]
    EmptyReport,
    #[error("invalid test id in report: {0}")]
    InvalidTestId(#[from] TestIdError),
}

impl From<roxmltree::Error> for JunitError {
    fn from(e: roxmltree::Error) -> Self {
        JunitError::MalformedXml(e.to_string())
    }
}

/// One `<testcase>` as read from a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub test: TestId,
    pub verdict: Verdict,
    pub duration_s: f64,
}

/// Parses a JUnit-XML report into one entry per `<testcase>`, in document
/// order.
///
/// A `failure` child maps to FAIL, `error` to ERROR, `skipped` to SKIP and no
/// such child to PASS. When a case carries several of them, the first in that
/// order wins. The test id comes from the `file`, `classname` and `name`
/// attributes; a bracketed parameter suffix on the name is kept.
pub fn parse_junit_report(xml: &[u8]) -> Result<Vec<ReportEntry>, JunitError> {
    let text = std::str::from_utf8(xml).map_err(|e| JunitError::MalformedXml(e.to_string()))?;
    let doc = roxmltree::Document::parse(text)?;
    let root = doc.root_element();
    if !matches!(root.tag_name().name(), "testsuites" | "testsuite") {
        return Err(JunitError::MalformedXml(format!(
            "unexpected root element <{}>",
            root.tag_name().name()
        )));
    }
    let mut entries = Vec::new();
    for case in root
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "testcase")
    {
        let name = case
            .attribute("name")
            .ok_or_else(|| JunitError::MalformedXml("testcase without name".into()))?;
        let test = TestId::from_parts(
            case.attribute("file").unwrap_or(""),
            case.attribute("classname").unwrap_or(""),
            name,
        )?;
        let has = |tag: &str| case.children().any(|c| c.is_element() && c.tag_name().name() == tag);
        let verdict = if has("failure") {
            Verdict::Fail
        } else if has("error") {
            Verdict::Error
        } else if has("skipped") {
            Verdict::Skip
        } else {
            Verdict::Pass
        };
        let duration_s = case
            .attribute("time")
            .and_then(|t| t.trim().parse::<f64>().ok())
            .filter(|t| t.is_finite())
            .unwrap_or(0.0);
        entries.push(ReportEntry {
            test,
            verdict,
            duration_s,
        });
    }
    if entries.is_empty() {
        return Err(JunitError::EmptyReport);
    }
    Ok(entries)
}

/// Collapses report entries into a per-test map. A test reported more than
/// once keeps its last occurrence.
pub fn entries_to_verdicts(entries: Vec<ReportEntry>) -> BTreeMap<TestId, Outcome> {
    let mut out = BTreeMap::new();
    for e in entries {
        let outcome = Outcome {
            verdict: e.verdict,
            duration_s: e.duration_s,
        };
        if out.insert(e.test.clone(), outcome).is_some() {
            warn!("test {} reported more than once; keeping the last entry", e.test);
        }
    }
    out
}
