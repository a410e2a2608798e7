//! Flaky-test detection by orchestrated reruns.
//!
//! A campaign reruns a test suite many times, in its natural order and in
//! shuffled orders, grouped into iterations of consecutive runs on one
//! machine ([`orchestrator`]). The JUnit-XML reports become a verdict matrix
//! ([`verdict`], [`junit`], [`archive`]). [`classify`] labels each test as
//! not flaky, infrastructure-flaky, order-dependent (victim or brittle) or
//! non-order-dependent, and [`stats`] turns per-test pass/fail rates into
//! rerun budgets. [`report`] and [`cli`] aggregate and expose all of it.

pub mod archive;
pub mod classify;
pub mod cli;
pub mod junit;
pub mod orchestrator;
pub mod report;
pub mod stats;
pub mod verdict;

pub use verdict::{
    build_matrix, Cell, ExitStatus, MatrixError, OrderKind, OrderMode, Outcome, RunFilter, RunInfo, RunRecord,
    TestId, Verdict, VerdictCounts, VerdictMatrix,
};
