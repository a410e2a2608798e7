use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::RateTriple;

// Fixed shard count so results do not depend on the thread pool size.
const SHARDS: u64 = 64;

/// Empirical unveil probability: the fraction of `trials` simulated
/// `n`-run sequences that contain a PASS and a FAIL/ERROR.
///
/// Each run draws PASS, FAIL/ERROR or SKIP with the given rates; leftover
/// probability mass is drawn as ABSENT. Trials are split over a fixed
/// number of independently seeded streams, so the result depends on
/// `seed` only.
pub fn monte_carlo_unveil(rates: &RateTriple, n: u64, trials: u64, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let pass_below = rates.p_pass;
    let fail_below = rates.p_pass + rates.p_fail_error;
    let hits: u64 = (0..SHARDS)
        .into_par_iter()
        .map(|shard| {
            let share = trials / SHARDS + u64::from(shard < trials % SHARDS);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let mut hits = 0;
            for _ in 0..share {
                let (mut pass, mut fail) = (false, false);
                for _ in 0..n {
                    let u: f64 = rng.random();
                    if u < pass_below {
                        pass = true;
                    } else if u < fail_below {
                        fail = true;
                    }
                    if pass && fail {
                        hits += 1;
                        break;
                    }
                }
            }
            hits
        })
        .sum();
    hits as f64 / trials as f64
}
