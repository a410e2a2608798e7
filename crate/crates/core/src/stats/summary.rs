use std::io::{Read, Write};

use super::{RateTriple, RerunCount, RerunEstimate, StatsError};
use crate::archive::ArchiveError;
use crate::verdict::TestId;

/// Which per-test rerun count a discovery curve is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Once,
    Confidence(f64),
}

impl Metric {
    fn reruns(&self, e: &RerunEstimate) -> RerunCount {
        match self {
            Metric::Once => e.n_once.map_or(RerunCount::Unreachable, RerunCount::Reruns),
            Metric::Confidence(p) => e.reruns_at(*p),
        }
    }
}

/// Number of tests whose rerun count under `metric` is defined and at most `n`.
pub fn cumulative_found(estimates: &[RerunEstimate], n: u64, metric: Metric) -> usize {
    estimates.iter().filter(|e| metric.reruns(e).within(n)).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSummary {
    pub confidence: f64,
    /// Lower-middle element of the reachable counts.
    pub median: Option<u64>,
    pub reachable: usize,
    pub unreachable: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurvePoint {
    pub n: u64,
    pub once: usize,
    /// One entry per requested confidence, same order.
    pub at: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub tests: usize,
    pub confidences: Vec<ConfidenceSummary>,
    pub curve: Vec<CurvePoint>,
}

fn lower_median(mut values: Vec<u64>) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    Some(values[(values.len() - 1) / 2])
}

/// Medians and unreachable counts per confidence, plus discovery curves for
/// every `n` in `1..=campaign_length`.
pub fn aggregate_summary(
    estimates: &[RerunEstimate],
    confidences: &[f64],
    campaign_length: u64,
) -> Result<Summary, StatsError> {
    if estimates.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let per_conf: Vec<Vec<RerunCount>> = confidences
        .iter()
        .map(|&p| estimates.iter().map(|e| e.reruns_at(p)).collect())
        .collect();
    let summaries = confidences
        .iter()
        .zip(&per_conf)
        .map(|(&p, counts)| {
            let reachable: Vec<u64> = counts.iter().filter_map(|c| c.get()).collect();
            ConfidenceSummary {
                confidence: p,
                reachable: reachable.len(),
                unreachable: counts.len() - reachable.len(),
                median: lower_median(reachable),
            }
        })
        .collect();
    let once: Vec<RerunCount> = estimates.iter().map(|e| Metric::Once.reruns(e)).collect();
    let found = |counts: &[RerunCount], n| counts.iter().filter(|c| c.within(n)).count();
    let curve = (1..=campaign_length)
        .map(|n| CurvePoint {
            n,
            once: found(&once, n),
            at: per_conf.iter().map(|c| found(c, n)).collect(),
        })
        .collect();
    Ok(Summary {
        tests: estimates.len(),
        confidences: summaries,
        curve,
    })
}

/// Column suffix for a confidence: at least two decimals (`0.5` -> `0.50`).
pub fn confidence_label(p: f64) -> String {
    let s = format!("{p}");
    match s.find('.') {
        None => format!("{s}.00"),
        Some(dot) if s.len() - dot - 1 < 2 => format!("{s}{}", "0".repeat(2 - (s.len() - dot - 1))),
        Some(_) => s,
    }
}

/// Estimates CSV: `test_id, p_pass, p_fail_error, p_skip, n_once, n_at_<p>...`.
/// Every estimate must carry the same confidences as the first.
pub fn write_estimates<W: Write>(estimates: &[RerunEstimate], out: W) -> Result<(), ArchiveError> {
    let confidences: Vec<f64> = estimates
        .first()
        .map(|e| e.n_at.iter().map(|(p, _)| *p).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["test_id", "p_pass", "p_fail_error", "p_skip", "n_once"]
        .map(String::from)
        .to_vec();
    header.extend(confidences.iter().map(|p| format!("n_at_{}", confidence_label(*p))));
    w.write_record(&header)?;
    for e in estimates {
        let mut row = vec![
            e.test.to_string(),
            e.rates.p_pass.to_string(),
            e.rates.p_fail_error.to_string(),
            e.rates.p_skip.to_string(),
            e.n_once.map(|n| n.to_string()).unwrap_or_default(),
        ];
        row.extend(confidences.iter().map(|&p| e.reruns_at(p).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_estimates<R: Read>(input: R) -> Result<Vec<RerunEstimate>, ArchiveError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let invalid = |line: u64, msg: String| ArchiveError::Invalid { line, msg };
    let fixed = ["test_id", "p_pass", "p_fail_error", "p_skip", "n_once"];
    if header.len() < fixed.len() || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b) {
        return Err(invalid(1, "unexpected estimates header".into()));
    }
    let confidences: Vec<f64> = header
        .iter()
        .skip(fixed.len())
        .map(|h| {
            h.strip_prefix("n_at_")
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| invalid(1, format!("bad column {h:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, ArchiveError> {
            rec[i].parse().map_err(|_| invalid(line, format!("bad number {:?}", &rec[i])))
        };
        let count = |s: &str| -> Result<u64, ArchiveError> {
            s.parse().map_err(|_| invalid(line, format!("bad count {s:?}")))
        };
        let test: TestId = rec[0].parse().map_err(|e| invalid(line, format!("{e}")))?;
        let rates = RateTriple::new(num(1)?, num(2)?, num(3)?).map_err(|e| invalid(line, e.to_string()))?;
        let n_once = match &rec[4] {
            "" => None,
            s => Some(count(s)?),
        };
        let n_at = confidences
            .iter()
            .enumerate()
            .map(|(i, &p)| match &rec[fixed.len() + i] {
                "UNREACHABLE" => Ok((p, RerunCount::Unreachable)),
                s => count(s).map(|n| (p, RerunCount::Reruns(n))),
            })
            .collect::<Result<_, _>>()?;
        out.push(RerunEstimate {
            test,
            rates,
            n_once,
            n_at,
        });
    }
    Ok(out)
}

/// Curve CSV: `n, S_once, S_<p>...`.
pub fn write_curve<W: Write>(summary: &Summary, out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["n".to_string(), "S_once".to_string()];
    header.extend(summary.confidences.iter().map(|c| format!("S_{}", confidence_label(c.confidence))));
    w.write_record(&header)?;
    for point in &summary.curve {
        let mut row = vec![point.n.to_string(), point.once.to_string()];
        row.extend(point.at.iter().map(|s| s.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
