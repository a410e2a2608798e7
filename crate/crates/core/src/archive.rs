//! On-disk verdict archive: one CSV row per (run, test) cell.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verdict::{Cell, MatrixError, OrderKind, OrderMode, RunInfo, TestId, Verdict, VerdictMatrix};

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Invalid { line: u64, msg: String },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    run_index: u32,
    iteration_id: u32,
    order_mode: String,
    order_seed: Option<u64>,
    machine_fingerprint: String,
    test_id: String,
    verdict: String,
    duration_s: Option<f64>,
}

/// Writes every cell of `matrix`, run by run, tests in canonical order.
pub fn write_archive<W: Write>(matrix: &VerdictMatrix, out: W) -> Result<(), ArchiveError> {
    let mut w = csv::Writer::from_writer(out);
    for (pos, run) in matrix.runs().iter().enumerate() {
        for test in matrix.tests() {
            let cell = matrix.cell(test, pos)?;
            w.serialize(Row {
                run_index: run.run_index,
                iteration_id: run.iteration_id,
                order_mode: run.order_mode.kind().as_str().to_string(),
                order_seed: run.order_mode.seed(),
                machine_fingerprint: run.machine_fingerprint.clone(),
                test_id: test.to_string(),
                verdict: cell.verdict.as_str().to_string(),
                duration_s: cell.duration_s,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive<R: Read>(input: R) -> Result<VerdictMatrix, ArchiveError> {
    let mut r = csv::Reader::from_reader(input);
    let mut runs: BTreeMap<u32, (RunInfo, BTreeMap<TestId, Cell>)> = BTreeMap::new();
    let headers = r.headers()?.clone();
    let mut record = csv::StringRecord::new();
    while r.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record.deserialize(Some(&headers))?;
        let invalid = |msg: String| ArchiveError::Invalid { line, msg };
        let order_mode = match (row.order_mode.parse::<OrderKind>().map_err(invalid)?, row.order_seed) {
            (OrderKind::Same, None) => OrderMode::SameOrder,
            (OrderKind::Shuffled, Some(seed)) => OrderMode::Shuffled(seed),
            (kind, seed) => {
                return Err(invalid(format!("order mode {} with seed {seed:?}", kind.as_str())))
            }
        };
        let test: TestId = row.test_id.parse().map_err(|e| invalid(format!("{e}")))?;
        let verdict: Verdict = row.verdict.parse().map_err(|e| invalid(format!("{e}")))?;
        let cell = match (verdict, row.duration_s) {
            (Verdict::Absent, None) => Cell::ABSENT,
            (Verdict::Absent, Some(_)) => return Err(invalid("ABSENT cell with a duration".into())),
            (v, Some(d)) => Cell {
                verdict: v,
                duration_s: Some(d),
            },
            (_, None) => return Err(invalid("missing duration".into())),
        };
        let info = RunInfo {
            run_index: row.run_index,
            iteration_id: row.iteration_id,
            order_mode,
            machine_fingerprint: row.machine_fingerprint,
        };
        let entry = runs
            .entry(info.run_index)
            .or_insert_with(|| (info.clone(), BTreeMap::new()));
        if entry.0 != info {
            return Err(invalid(format!("run {} has inconsistent metadata", info.run_index)));
        }
        if entry.1.insert(test.clone(), cell).is_some() {
            return Err(invalid(format!("duplicate cell for {test} in run {}", info.run_index)));
        }
    }
    Ok(VerdictMatrix::from_runs(runs.into_values().collect())?)
}

pub fn save_archive(matrix: &VerdictMatrix, path: &Path) -> Result<(), ArchiveError> {
    write_archive(matrix, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_archive(path: &Path) -> Result<VerdictMatrix, ArchiveError> {
    read_archive(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VerdictMatrix {
        let t1 = TestId::from_parts("a.py", "", "test_x[1]").unwrap();
        let t2 = TestId::from_parts("a.py", "K", "test_y").unwrap();
        let run = |i: u32, mode| RunInfo {
            run_index: i,
            iteration_id: i / 2,
            order_mode: mode,
            machine_fingerprint: format!("fp{}", i / 2),
        };
        let cell = |v, d| Cell {
            verdict: v,
            duration_s: Some(d),
        };
        VerdictMatrix::from_runs(vec![
            (
                run(0, OrderMode::SameOrder),
                BTreeMap::from([(t1.clone(), cell(Verdict::Pass, 0.1)), (t2.clone(), cell(Verdict::Skip, 0.0))]),
            ),
            (run(1, OrderMode::SameOrder), BTreeMap::from([(t1.clone(), cell(Verdict::Fail, 1e-9))])),
            (run(2, OrderMode::Shuffled(42)), BTreeMap::from([(t2.clone(), cell(Verdict::Error, 3.25))])),
        ])
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let mut buf = Vec::new();
        write_archive(&m, &mut buf).unwrap();
        let back = read_archive(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_archive(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_and_spelling() {
        let mut buf = Vec::new();
        write_archive(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_index,iteration_id,order_mode,order_seed,machine_fingerprint,test_id,verdict,duration_s"
        );
        assert!(text.contains(",ABSENT,\n"));
        assert!(text.contains("2,1,shuffled,42,fp1,a.py::K::test_y,ERROR,3.25"));
    }

    #[test]
    fn rejects_bad_rows() {
        let header = "run_index,iteration_id,order_mode,order_seed,machine_fingerprint,test_id,verdict,duration_s\n";
        for body in [
            "0,0,same,,fp,a::t,MAYBE,1\n",
            "0,0,same,3,fp,a::t,PASS,1\n",
            "0,0,sideways,,fp,a::t,PASS,1\n",
            "0,0,same,,fp,a::t,ABSENT,1\n",
            "0,0,same,,fp,a::t,PASS,\n",
            "0,0,same,,fp,a::t,PASS,1\n0,0,same,,fp,a::t,PASS,1\n",
            "0,0,same,,fp,a::t,PASS,1\n0,1,same,,fp,a::u,PASS,1\n",
        ] {
            let input = format!("{header}{body}");
            assert!(read_archive(input.as_bytes()).is_err(), "{body}");
        }
    }
}
