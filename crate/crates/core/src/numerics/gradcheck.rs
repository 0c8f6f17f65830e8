use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamVector;

const FD_STEP: f64 = 1e-4;
const TINY: f64 = 1e-8;

/// Error of an analytic derivative relative to the finite-difference
/// reference. Falls back to the absolute error when both are below `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < TINY && numeric.abs() < TINY {
        diff
    } else if numeric.abs() >= TINY {
        diff / numeric.abs()
    } else {
        diff / analytic.abs()
    }
}

/// Compares the analytic head gradient returned by `loss_fn` against central
/// finite differences on `probe_count` randomly chosen head coordinates and
/// returns the worst relative error.
///
/// `loss_fn` returns `(loss, head_gradient)`.
pub fn gradient_check<F>(loss_fn: F, params: &ParamVector, probe_count: usize, seed: u64) -> f64
where
    F: Fn(&ParamVector) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    let n = params.head().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = sample(&mut rng, n, probe_count.min(n));

    let mut worst = 0.0f64;
    for i in probes.iter() {
        let shifted = |delta: f64| {
            let mut head = params.head().to_vec();
            head[i] += delta;
            let p = params.with_head(head).expect("perturbed head stays finite");
            loss_fn(&p).0
        };
        let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
