//! Aggregation tables over projects and classifications.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Deserialize;

use crate::archive::ArchiveError;
use crate::classify::{Classification, Label, OdKind};

pub const UNSPECIFIED: &str = "UNSPECIFIED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectMeta {
    pub project_id: String,
    pub tests_total: u64,
    /// e.g. `"topic"` or `"dev_status"` → values; a project may carry several.
    pub tags: BTreeMap<String, Vec<String>>,
    pub flaky_tests: u64,
}

impl ProjectMeta {
    pub fn from_classifications(
        project_id: impl Into<String>,
        classifications: &[Classification],
        tags: BTreeMap<String, Vec<String>>,
    ) -> Self {
        ProjectMeta {
            project_id: project_id.into(),
            tests_total: classifications.len() as u64,
            tags,
            flaky_tests: classifications.iter().filter(|c| c.label.is_flaky()).count() as u64,
        }
    }

    pub fn is_flaky(&self) -> bool {
        self.flaky_tests > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub value: String,
    pub flaky_projects: u64,
    pub projects: u64,
    /// flaky_projects / projects
    pub flakiness_rate: f64,
    pub avg_tests: f64,
}

/// Flaky-project rate per value of `tag_key`. A project with several values
/// counts once under each; projects without the key land in UNSPECIFIED,
/// which is always listed last. Other rows are sorted by rate, highest first.
pub fn group_rates(projects: &[ProjectMeta], tag_key: &str) -> Vec<GroupRow> {
    #[derive(Default)]
    struct Acc {
        flaky: u64,
        projects: u64,
        tests: u64,
    }
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for p in projects {
        let values: BTreeSet<&str> = p
            .tags
            .get(tag_key)
            .map(|vs| vs.iter().map(String::as_str).collect())
            .unwrap_or_default();
        let values = if values.is_empty() {
            BTreeSet::from([UNSPECIFIED])
        } else {
            values
        };
        for v in values {
            let acc = groups.entry(v.to_string()).or_default();
            acc.projects += 1;
            acc.tests += p.tests_total;
            acc.flaky += u64::from(p.is_flaky());
        }
    }
    let mut rows: Vec<GroupRow> = groups
        .into_iter()
        .map(|(value, a)| GroupRow {
            value,
            flaky_projects: a.flaky,
            projects: a.projects,
            flakiness_rate: a.flaky as f64 / a.projects as f64,
            avg_tests: a.tests as f64 / a.projects as f64,
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.value == UNSPECIFIED)
            .cmp(&(b.value == UNSPECIFIED))
            .then(b.flakiness_rate.total_cmp(&a.flakiness_rate))
            .then_with(|| a.value.cmp(&b.value))
    });
    rows
}

/// Counts per root cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CategoryTable {
    pub analyzed: u64,
    pub not_flaky: u64,
    pub insufficient_data: u64,
    pub infrastructure: u64,
    pub order_dependent: u64,
    pub victims: u64,
    pub brittles: u64,
    pub od_undetermined: u64,
    pub non_order_dependent: u64,
}

impl CategoryTable {
    pub fn flaky(&self) -> u64 {
        self.infrastructure + self.order_dependent + self.non_order_dependent
    }

    /// Share of `count` among flaky tests; 0 when nothing is flaky.
    pub fn share(&self, count: u64) -> f64 {
        match self.flaky() {
            0 => 0.0,
            f => count as f64 / f as f64,
        }
    }
}

pub fn category_table(classifications: &[Classification]) -> CategoryTable {
    let mut t = CategoryTable::default();
    for c in classifications {
        t.analyzed += 1;
        match &c.label {
            Label::NotFlaky => t.not_flaky += 1,
            Label::InsufficientData => t.insufficient_data += 1,
            Label::Infrastructure => t.infrastructure += 1,
            Label::NonOrderDependent(_) => t.non_order_dependent += 1,
            Label::OrderDependent(kind) => {
                t.order_dependent += 1;
                match kind {
                    OdKind::Victim => t.victims += 1,
                    OdKind::Brittle => t.brittles += 1,
                    OdKind::Undetermined => t.od_undetermined += 1,
                }
            }
        }
    }
    t
}

/// One decimal, e.g. `5.3%`.
pub fn percent(ratio: f64) -> String {
    format!("{:.1}%", ratio * 100.0)
}

/// Left-aligned first column, right-aligned rest.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        TextTable {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    /// Parses CSV text into a table (first record is the header).
    pub fn from_csv(text: &str) -> Result<Self, ArchiveError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let mut t = TextTable::new(r.headers()?.iter());
        for rec in r.records() {
            t.push(rec?.iter());
        }
        Ok(t)
    }

    pub fn render(&self) -> String {
        let cols = self.rows.iter().map(Vec::len).chain([self.header.len()]).max().unwrap_or(0);
        let mut widths = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |row: &Vec<String>| {
            let cells: Vec<String> = (0..cols)
                .map(|i| {
                    let cell = row.get(i).map(String::as_str).unwrap_or("");
                    if i == 0 {
                        format!("{cell:<w$}", w = widths[i])
                    } else {
                        format!("{cell:>w$}", w = widths[i])
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

pub fn group_table(tag_key: &str, rows: &[GroupRow]) -> TextTable {
    let mut t = TextTable::new([tag_key, "flaky projects", "projects", "flakiness rate", "avg tests / project"]);
    for r in rows {
        t.push([
            r.value.clone(),
            r.flaky_projects.to_string(),
            r.projects.to_string(),
            percent(r.flakiness_rate),
            format!("{:.1}", r.avg_tests),
        ]);
    }
    t
}

pub fn write_group_csv<W: Write>(tag_key: &str, rows: &[GroupRow], out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([tag_key, "flaky_projects", "projects", "flakiness_rate", "avg_tests"])?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            r.flaky_projects.to_string(),
            r.projects.to_string(),
            r.flakiness_rate.to_string(),
            r.avg_tests.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn category_rows(t: &CategoryTable) -> TextTable {
    let mut table = TextTable::new(["root cause", "tests", "share of flaky"]);
    let mut row = |name: &str, n: u64, share: Option<f64>| {
        table.push([name.to_string(), n.to_string(), share.map(percent).unwrap_or_default()]);
    };
    row("Order-dependent", t.order_dependent, Some(t.share(t.order_dependent)));
    row("  victims", t.victims, None);
    row("  brittles", t.brittles, None);
    row("  undetermined", t.od_undetermined, None);
    row("Infrastructure", t.infrastructure, Some(t.share(t.infrastructure)));
    row("Non-order-dependent", t.non_order_dependent, Some(t.share(t.non_order_dependent)));
    row("Flaky total", t.flaky(), Some(if t.flaky() > 0 { 1.0 } else { 0.0 }));
    row("Not flaky", t.not_flaky, None);
    row("Insufficient data", t.insufficient_data, None);
    table
}

pub fn write_category_csv<W: Write>(t: &CategoryTable, out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "od_kind", "count", "share_of_flaky"])?;
    let rows: [(&str, &str, u64); 8] = [
        ("OrderDependent", "", t.order_dependent),
        ("OrderDependent", "Victim", t.victims),
        ("OrderDependent", "Brittle", t.brittles),
        ("OrderDependent", "Undetermined", t.od_undetermined),
        ("Infrastructure", "", t.infrastructure),
        ("NonOrderDependent", "", t.non_order_dependent),
        ("NotFlaky", "", t.not_flaky),
        ("InsufficientData", "", t.insufficient_data),
    ];
    for (label, kind, n) in rows {
        let share = if matches!(label, "NotFlaky" | "InsufficientData") {
            String::new()
        } else {
            t.share(n).to_string()
        };
        w.write_record([label.to_string(), kind.to_string(), n.to_string(), share])?;
    }
    w.flush()?;
    Ok(())
}

/// Project tags file: one table per project id, each key a tag holding a
/// string or a list of strings.
///
/// ```toml
/// [my-project]
/// dev_status = "4 - Beta"
/// topic = ["Software Development", "Internet"]
/// ```
pub fn parse_tags(text: &str) -> Result<BTreeMap<String, BTreeMap<String, Vec<String>>>, toml::de::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    let raw: BTreeMap<String, BTreeMap<String, OneOrMany>> = toml::from_str(text)?;
    Ok(raw
        .into_iter()
        .map(|(project, tags)| {
            let tags = tags
                .into_iter()
                .map(|(k, v)| {
                    let vs = match v {
                        OneOrMany::One(s) => vec![s],
                        OneOrMany::Many(vs) => vs,
                    };
                    (k, vs)
                })
                .collect();
            (project, tags)
        })
        .collect())
}
