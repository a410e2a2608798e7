//! Rerun calculus: per-test rates, the probability of unveiling flakiness
//! after `n` runs, and the rerun counts derived from it.
//!
//! All functions assume runs are independent draws from the per-test rates.
//! Thresholds are strict: a count `n` qualifies only if its probability is
//! *greater than* the requested confidence.

mod monte_carlo;
mod summary;

pub use monte_carlo::monte_carlo_unveil;
pub use summary::{
    aggregate_summary, confidence_label, cumulative_found, read_estimates, write_curve,
    write_estimates, ConfidenceSummary, CurvePoint, Metric, Summary,
};

use std::fmt;

use thiserror::Error;

use crate::verdict::{TestId, Verdict, VerdictCounts};

/// Tolerance on `p_pass + p_fail_error + p_skip <= 1`.
pub const RATE_EPSILON: f64 = 1e-12;

/// Largest rerun count the searches consider before giving up.
pub const SEARCH_LIMIT: u64 = 10_000_000;

// Above this many runs the power terms are evaluated in log space.
const LOG_SPACE_FROM: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no executions to compute rates from")]
    ZeroExecutions,
    #[error("confidence must lie strictly between 0 and 1, got {0}")]
    InvalidConfidence(f64),
    #[error("invalid rates ({0}, {1}, {2})")]
    InvalidRates(f64, f64, f64),
    #[error("no estimates")]
    EmptyInput,
}

/// Per-test probabilities of PASS, FAIL/ERROR and SKIP in one execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTriple {
    pub p_pass: f64,
    pub p_fail_error: f64,
    pub p_skip: f64,
}

impl RateTriple {
    pub fn new(p_pass: f64, p_fail_error: f64, p_skip: f64) -> Result<Self, StatsError> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !(unit(p_pass) && unit(p_fail_error) && unit(p_skip))
            || p_pass + p_fail_error + p_skip > 1.0 + RATE_EPSILON
        {
            return Err(StatsError::InvalidRates(p_pass, p_fail_error, p_skip));
        }
        Ok(RateTriple {
            p_pass,
            p_fail_error,
            p_skip,
        })
    }

    /// Whether flakiness can show at all, i.e. both a pass and a non-pass
    /// have nonzero probability.
    pub fn can_unveil(&self) -> bool {
        self.p_pass > 0.0 && self.p_fail_error > 0.0
    }
}

/// Ratios of PASS, FAIL+ERROR and SKIP over all non-ABSENT executions.
pub fn rates(counts: &VerdictCounts) -> Result<RateTriple, StatsError> {
    let denom = counts.executed();
    if denom == 0 {
        return Err(StatsError::ZeroExecutions);
    }
    let d = f64::from(denom);
    Ok(RateTriple {
        p_pass: f64::from(counts.pass) / d,
        p_fail_error: f64::from(counts.non_pass()) / d,
        p_skip: f64::from(counts.skip) / d,
    })
}

/// 1-based index of the run at which both a PASS and a FAIL/ERROR have
/// been seen, or `None` if one of them never occurs.
pub fn n_once(sequence: &[Verdict]) -> Option<u64> {
    let first_pass = sequence.iter().position(|v| *v == Verdict::Pass)?;
    let first_non_pass = sequence.iter().position(|v| v.is_non_pass())?;
    Some(first_pass.max(first_non_pass) as u64 + 1)
}

/// `(1 - x)^n`, switching to log space for large `n`.
fn miss_power(x: f64, n: u64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if n < LOG_SPACE_FROM {
        (1.0 - x).powi(n as i32)
    } else if x >= 1.0 {
        0.0
    } else {
        (n as f64 * (-x).ln_1p()).exp()
    }
}

/// Probability that `n` runs show at least one PASS and at least one
/// FAIL/ERROR.
pub fn unveil_probability(rates: &RateTriple, n: u64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let u = 1.0 - miss_power(rates.p_fail_error, n) - miss_power(rates.p_pass, n)
        + miss_power(rates.p_pass + rates.p_fail_error, n);
    u.clamp(0.0, 1.0)
}

/// A rerun count, or the statement that no count reaches the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RerunCount {
    Reruns(u64),
    Unreachable,
}

impl RerunCount {
    pub fn get(self) -> Option<u64> {
        match self {
            RerunCount::Reruns(n) => Some(n),
            RerunCount::Unreachable => None,
        }
    }

    pub fn within(self, n: u64) -> bool {
        self.get().is_some_and(|k| k <= n)
    }
}

impl fmt::Display for RerunCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RerunCount::Reruns(n) => write!(f, "{n}"),
            RerunCount::Unreachable => f.write_str("UNREACHABLE"),
        }
    }
}

fn check_confidence(p: f64) -> Result<(), StatsError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidConfidence(p))
    }
}

/// Largest `n` for which `(1 - x)^n >= 1 - p` holds analytically. Any `n` up
/// to this bound leaves a miss probability of at least `1 - p`.
fn miss_bound(x: f64, p: f64) -> u64 {
    if x <= 0.0 {
        return u64::MAX;
    }
    if x >= 1.0 {
        return 0;
    }
    let bound = (1.0 - p).ln() / (-x).ln_1p();
    if bound >= SEARCH_LIMIT as f64 {
        u64::MAX
    } else {
        bound.floor() as u64
    }
}

/// Smallest `n` with `unveil_probability(rates, n) > p`.
pub fn statistical_reruns(rates: &RateTriple, p: f64) -> Result<RerunCount, StatsError> {
    check_confidence(p)?;
    if !rates.can_unveil() {
        return Ok(RerunCount::Unreachable);
    }
    // U(n) <= 1 - (1 - x)^n for x in {p_pass, p_fail_error}, so nothing at or
    // below either miss bound can qualify; start scanning from there.
    let lower = miss_bound(rates.p_fail_error, p).max(miss_bound(rates.p_pass, p));
    if lower >= SEARCH_LIMIT {
        return Ok(RerunCount::Unreachable);
    }
    let mut n = lower.max(2);
    while unveil_probability(rates, n) <= p {
        n += 1;
        if n > SEARCH_LIMIT {
            return Ok(RerunCount::Unreachable);
        }
    }
    while n > 1 && unveil_probability(rates, n - 1) > p {
        n -= 1;
    }
    Ok(RerunCount::Reruns(n))
}

/// Smallest `n` such that a failing flaky test with pass rate `p_pass`
/// passes at least once within `n` reruns with probability greater than `p`.
pub fn failure_confirmation_reruns(p_pass: f64, p: f64) -> Result<RerunCount, StatsError> {
    check_confidence(p)?;
    if !(0.0..=1.0).contains(&p_pass) {
        return Err(StatsError::InvalidRates(p_pass, 0.0, 0.0));
    }
    if p_pass == 0.0 {
        return Ok(RerunCount::Unreachable);
    }
    let confirm = |n: u64| 1.0 - miss_power(p_pass, n) > p;
    let estimate = if p_pass >= 1.0 {
        1.0
    } else {
        ((1.0 - p).ln() / (-p_pass).ln_1p()).ceil().max(1.0)
    };
    if estimate > SEARCH_LIMIT as f64 {
        return Ok(RerunCount::Unreachable);
    }
    // The closed form can land one off either way at the strict boundary.
    let mut n = estimate as u64;
    while !confirm(n) {
        n += 1;
        if n > SEARCH_LIMIT {
            return Ok(RerunCount::Unreachable);
        }
    }
    while n > 1 && confirm(n - 1) {
        n -= 1;
    }
    Ok(RerunCount::Reruns(n))
}

/// Rate triples spanning rare and frequent failures, with and without
/// skips and missing runs, used by the `oracle` command.
pub fn oracle_grid() -> Vec<RateTriple> {
    let mut grid = Vec::new();
    for p_pass in [0.02, 0.1, 0.3, 0.5, 0.7, 0.9, 0.98] {
        let rest = 1.0 - p_pass;
        // all remaining mass failing; or half failing, a quarter skipped
        for (p_fail_error, p_skip) in [(rest, 0.0), (rest * 0.5, rest * 0.25)] {
            grid.push(RateTriple::new(p_pass, p_fail_error, p_skip).expect("grid rates are valid"));
        }
    }
    grid.extend(
        [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (0.4, 0.4, 0.0), (0.25, 0.25, 0.25), (0.6, 0.05, 0.3)]
            .into_iter()
            .map(|(p, f, s)| RateTriple::new(p, f, s).expect("grid rates are valid")),
    );
    grid
}

/// Everything the rerun calculus derives for one test.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunEstimate {
    pub test: TestId,
    pub rates: RateTriple,
    pub n_once: Option<u64>,
    /// `(confidence, n_{t,p})` pairs in the order they were requested.
    pub n_at: Vec<(f64, RerunCount)>,
}

impl RerunEstimate {
    /// Estimates from an ordered verdict sequence of one test.
    pub fn from_sequence(
        test: TestId,
        sequence: &[Verdict],
        confidences: &[f64],
    ) -> Result<Self, StatsError> {
        let rates = rates(&VerdictCounts::from_verdicts(sequence.iter().copied()))?;
        let n_at = confidences
            .iter()
            .map(|&p| statistical_reruns(&rates, p).map(|n| (p, n)))
            .collect::<Result<_, _>>()?;
        Ok(RerunEstimate {
            test,
            rates,
            n_once: n_once(sequence),
            n_at,
        })
    }

    /// `n_{t,p}`, from the stored values when `p` was requested up front.
    pub fn reruns_at(&self, p: f64) -> RerunCount {
        self.n_at
            .iter()
            .find(|(q, _)| (q - p).abs() < 1e-12)
            .map(|(_, n)| *n)
            .unwrap_or_else(|| statistical_reruns(&self.rates, p).unwrap_or(RerunCount::Unreachable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Verdict::*;

    fn r(p: f64, f: f64, s: f64) -> RateTriple {
        RateTriple::new(p, f, s).unwrap()
    }

    /// Enumerates every verdict sequence of length `n` over {PASS, FAIL, SKIP,
    /// ABSENT} and sums the probability of those showing both PASS and FAIL.
    fn enumerate_unveil(rates: &RateTriple, n: u32) -> f64 {
        let absent = (1.0 - rates.p_pass - rates.p_fail_error - rates.p_skip).max(0.0);
        let probs = [rates.p_pass, rates.p_fail_error, rates.p_skip, absent];
        let mut total = 0.0;
        for code in 0..4u64.pow(n) {
            let (mut c, mut prob, mut pass, mut fail) = (code, 1.0, false, false);
            for _ in 0..n {
                let k = (c % 4) as usize;
                c /= 4;
                prob *= probs[k];
                pass |= k == 0;
                fail |= k == 1;
            }
            if pass && fail {
                total += prob;
            }
        }
        total
    }

    #[test]
    fn rates_examples() {
        let c = |p, f, s| VerdictCounts {
            pass: p,
            fail: f,
            skip: s,
            ..Default::default()
        };
        assert_eq!(rates(&c(100, 100, 0)).unwrap(), r(0.5, 0.5, 0.0));
        assert_eq!(rates(&c(100, 50, 50)).unwrap(), r(0.5, 0.25, 0.25));
        assert_eq!(rates(&c(200, 0, 0)).unwrap(), r(1.0, 0.0, 0.0));
        let with_absent = VerdictCounts {
            pass: 1,
            error: 1,
            absent: 8,
            ..Default::default()
        };
        assert_eq!(rates(&with_absent).unwrap(), r(0.5, 0.5, 0.0));
        assert_eq!(rates(&VerdictCounts::default()), Err(StatsError::ZeroExecutions));
        assert_eq!(
            rates(&VerdictCounts {
                absent: 3,
                ..Default::default()
            }),
            Err(StatsError::ZeroExecutions)
        );
    }

    #[test]
    fn rate_validation() {
        assert!(RateTriple::new(0.6, 0.5, 0.0).is_err());
        assert!(RateTriple::new(-0.1, 0.5, 0.0).is_err());
        assert!(RateTriple::new(0.1, 0.2, 0.7 + 1e-13).is_ok());
    }

    #[test]
    fn n_once_examples() {
        assert_eq!(n_once(&[Pass, Pass, Fail]), Some(3));
        assert_eq!(n_once(&[Fail, Skip, Pass]), Some(3));
        assert_eq!(n_once(&[Pass, Pass, Pass]), None);
        assert_eq!(n_once(&[Error, Pass]), Some(2));
        assert_eq!(n_once(&[Skip, Absent, Skip]), None);
        assert_eq!(n_once(&[]), None);
    }

    #[test]
    fn unveil_examples() {
        assert_eq!(unveil_probability(&r(0.5, 0.5, 0.0), 2), 0.5);
        assert_eq!(unveil_probability(&r(0.5, 0.25, 0.25), 2), 0.25);
        for n in [0, 1, 2, 10, 100_000] {
            assert_eq!(unveil_probability(&r(1.0, 0.0, 0.0), n), 0.0);
        }
        assert_eq!(unveil_probability(&r(0.3, 0.3, 0.4), 0), 0.0);
        assert_eq!(unveil_probability(&r(0.3, 0.3, 0.4), 1), 0.0);
    }

    #[test]
    fn unveil_matches_enumeration() {
        for rates in [
            r(0.5, 0.5, 0.0),
            r(0.5, 0.25, 0.25),
            r(0.9, 0.1, 0.0),
            r(0.2, 0.3, 0.1),
            r(0.05, 0.9, 0.05),
        ] {
            for n in 0..=6 {
                let exact = enumerate_unveil(&rates, n);
                let formula = unveil_probability(&rates, n as u64);
                assert!((exact - formula).abs() < 1e-12, "{rates:?} n={n}: {exact} vs {formula}");
            }
        }
    }

    #[test]
    fn log_space_is_continuous() {
        let rates = r(0.9999, 0.0001, 0.0);
        let below = unveil_probability(&rates, LOG_SPACE_FROM - 1);
        let at = unveil_probability(&rates, LOG_SPACE_FROM);
        assert!(at >= below && at - below < 1e-3);
    }

    #[test]
    fn statistical_reruns_examples() {
        assert_eq!(statistical_reruns(&r(0.9, 0.1, 0.0), 0.95), Ok(RerunCount::Reruns(29)));
        assert_eq!(statistical_reruns(&r(0.5, 0.5, 0.0), 0.95), Ok(RerunCount::Reruns(6)));
        assert_eq!(statistical_reruns(&r(1.0, 0.0, 0.0), 0.95), Ok(RerunCount::Unreachable));
        assert_eq!(statistical_reruns(&r(0.0, 0.0, 1.0), 0.5), Ok(RerunCount::Unreachable));
        assert_eq!(statistical_reruns(&r(0.5, 0.5, 0.0), 1.0), Err(StatsError::InvalidConfidence(1.0)));
        assert_eq!(statistical_reruns(&r(0.5, 0.5, 0.0), 0.0), Err(StatsError::InvalidConfidence(0.0)));
    }

    #[test]
    fn statistical_reruns_matches_linear_scan() {
        for rates in [r(0.9, 0.1, 0.0), r(0.3, 0.2, 0.5), r(0.01, 0.99, 0.0), r(0.5, 0.001, 0.4)] {
            for p in [0.1, 0.5, 0.8, 0.95, 0.99] {
                let scan = (1..).find(|&n| unveil_probability(&rates, n) > p).unwrap();
                assert_eq!(statistical_reruns(&rates, p), Ok(RerunCount::Reruns(scan)));
            }
        }
    }

    #[test]
    fn statistical_reruns_beyond_limit() {
        let tiny = r(0.5, 1e-9, 0.0);
        assert_eq!(statistical_reruns(&tiny, 0.95), Ok(RerunCount::Unreachable));
    }

    #[test]
    fn failure_confirmation_examples() {
        assert_eq!(failure_confirmation_reruns(0.96, 0.95), Ok(RerunCount::Reruns(1)));
        assert_eq!(failure_confirmation_reruns(0.5, 0.95), Ok(RerunCount::Reruns(5)));
        assert_eq!(failure_confirmation_reruns(0.0, 0.95), Ok(RerunCount::Unreachable));
        assert_eq!(failure_confirmation_reruns(1.0, 0.95), Ok(RerunCount::Reruns(1)));
        assert!(failure_confirmation_reruns(0.5, 1.5).is_err());
    }

    #[test]
    fn estimate_from_sequence() {
        let t: TestId = "a.py::t".parse().unwrap();
        let e = RerunEstimate::from_sequence(t, &[Pass, Absent, Fail, Skip], &[0.5, 0.95]).unwrap();
        assert_eq!(e.n_once, Some(3));
        assert_eq!(e.rates, r(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
        assert_eq!(e.reruns_at(0.95), statistical_reruns(&e.rates, 0.95).unwrap());
        assert_eq!(e.reruns_at(0.8), statistical_reruns(&e.rates, 0.8).unwrap());
    }

    fn rate_strategy() -> impl Strategy<Value = RateTriple> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b, c)| {
            let pass = a;
            let fail = (1.0 - pass) * b;
            let skip = (1.0 - pass - fail).max(0.0) * c;
            RateTriple::new(pass, fail, skip).unwrap()
        })
    }

    proptest! {
        #[test]
        fn unveil_is_monotone_and_bounded(rates in rate_strategy(), n in 0u64..400) {
            let a = unveil_probability(&rates, n);
            let b = unveil_probability(&rates, n + 1);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b + 1e-12 >= a);
        }

        #[test]
        fn statistical_reruns_is_minimal(rates in rate_strategy(), p in 0.01..0.99f64) {
            match statistical_reruns(&rates, p).unwrap() {
                RerunCount::Reruns(n) => {
                    prop_assert!(unveil_probability(&rates, n) > p);
                    prop_assert!(n == 1 || unveil_probability(&rates, n - 1) <= p);
                }
                RerunCount::Unreachable => {
                    prop_assert!(!rates.can_unveil() || unveil_probability(&rates, SEARCH_LIMIT) <= p);
                }
            }
        }

        #[test]
        fn confirmation_matches_scan(p_pass in 0.001..=1.0f64, p in 0.01..0.999f64) {
            let scan = (1..).find(|&n| 1.0 - (1.0 - p_pass).powi(n as i32) > p).unwrap();
            prop_assert_eq!(failure_confirmation_reruns(p_pass, p).unwrap(), RerunCount::Reruns(scan));
        }

        #[test]
        fn n_once_within_length(seq in prop::collection::vec(prop::sample::select(Verdict::ALL.to_vec()), 0..50)) {
            let both = seq.contains(&Pass) && seq.iter().any(|v| v.is_non_pass());
            match n_once(&seq) {
                Some(n) => {
                    prop_assert!(both);
                    prop_assert!(n as usize <= seq.len());
                    let prefix = &seq[..n as usize];
                    prop_assert!(prefix.contains(&Pass) && prefix.iter().any(|v| v.is_non_pass()));
                    let shorter = &seq[..n as usize - 1];
                    prop_assert!(!(shorter.contains(&Pass) && shorter.iter().any(|v| v.is_non_pass())));
                }
                None => prop_assert!(!both),
            }
        }
    }
}
