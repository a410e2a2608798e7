use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::verdict::TestId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("asked for {wanted} projects but only {available} have tests to sample")]
pub struct SampleError {
    pub wanted: usize,
    pub available: usize,
}

/// Picks `k` distinct projects uniformly at random, then one test uniformly
/// from each. Projects without tests are ignored. Deterministic for a seed;
/// the result follows the order in which projects were drawn.
pub fn stratified_sample(
    tests_by_project: &BTreeMap<String, BTreeSet<TestId>>,
    k: usize,
    seed: u64,
) -> Result<Vec<TestId>, SampleError> {
    let candidates: Vec<&BTreeSet<TestId>> =
        tests_by_project.values().filter(|s| !s.is_empty()).collect();
    if k > candidates.len() {
        return Err(SampleError {
            wanted: k,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
    Ok(picked
        .iter()
        .map(|p| {
            let tests = candidates[p];
            let i = rng.random_range(0..tests.len());
            tests.iter().nth(i).expect("index within set").clone()
        })
        .collect())
}
