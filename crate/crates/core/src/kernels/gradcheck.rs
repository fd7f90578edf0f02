use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::scalar::Scalar;

/// Above this many coordinates only a random 5% subsample is perturbed.
const FULL_CHECK_LIMIT: usize = 10_000;
/// Denominator floor for the relative error of near-zero gradient entries.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub total: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central differences of `loss`.
///
/// `inputs` are perturbed in place one coordinate at a time and restored
/// afterwards; `analytic[i]` must have the shape of `inputs[i]`.
pub fn grad_check<S, F>(inputs: &mut [Tensor<S>], analytic: &[Tensor<S>], mut loss: F, h: f64, tol: f64) -> GradCheckReport
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> S,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    for (x, g) in inputs.iter().zip(analytic) {
        assert_eq!(x.shape(), g.shape(), "gradient shape must match input");
    }
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = {
        let all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)));
        if total > FULL_CHECK_LIMIT {
            let all: Vec<_> = all.collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
            let mut picked: Vec<usize> = sample(&mut rng, total, total / 20).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|k| all[k]).collect()
        } else {
            all.collect()
        }
    };

    let step = S::of(h);
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for &(i, j) in &coords {
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + step;
        let plus = loss(inputs).as_f64();
        inputs[i].data_mut()[j] = orig - step;
        let minus = loss(inputs).as_f64();
        inputs[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic[i].data()[j].as_f64();
        let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > max_rel_error || !err.is_finite() {
            max_rel_error = err;
            worst = Some((i, j));
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        checked: coords.len(),
        total,
        tol,
        passed: max_rel_error.is_finite() && max_rel_error < tol,
    }
}
