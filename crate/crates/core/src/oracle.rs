//! Independent reference computations for the rating math.
//!
//! The 1v1 oracle never touches the message-passing code: it integrates the
//! generative model directly. With performance noise `beta` and player B's
//! skill integrated out, `P(A wins | s_a) = Phi((s_a - mu_b) / sqrt(sigma_b^2 +
//! 2 beta^2))`, so A's exact posterior is the prior density times that
//! likelihood. Its first two moments come from composite Simpson quadrature
//! over `mu +- 12 sigma`; B's follow by symmetry.

use crate::rating::{std_normal_cdf, std_normal_pdf, Rating, RatingConfig};

/// Simpson panels per side of the integration window.
const PANELS: usize = 4000;

/// Exact 1v1 posterior (mean, std) of player `a` after `a` beats `b`.
fn winner_posterior(a: Rating<f64>, b: Rating<f64>, beta: f64) -> Rating<f64> {
    moments(a, |s| std_normal_cdf((s - b.mu) / (b.sigma * b.sigma + 2.0 * beta * beta).sqrt()))
}

/// Exact 1v1 posterior of player `b` after losing to `a`.
fn loser_posterior(a: Rating<f64>, b: Rating<f64>, beta: f64) -> Rating<f64> {
    moments(b, |s| std_normal_cdf((a.mu - s) / (a.sigma * a.sigma + 2.0 * beta * beta).sqrt()))
}

fn moments(prior: Rating<f64>, likelihood: impl Fn(f64) -> f64) -> Rating<f64> {
    let (lo, hi) = (prior.mu - 12.0 * prior.sigma, prior.mu + 12.0 * prior.sigma);
    let n = 2 * PANELS;
    let h = (hi - lo) / n as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let s = lo + h * i as f64;
        let weight = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let dens = weight * std_normal_pdf((s - prior.mu) / prior.sigma) * likelihood(s);
        z += dens;
        m1 += dens * s;
        m2 += dens * s * s;
    }
    let mean = m1 / z;
    Rating { mu: mean, sigma: (m2 / z - mean * mean).sqrt() }
}

/// Posteriors of a 1v1 game won by `winner` under the rating config's
/// performance noise and dynamics inflation.
pub fn one_on_one_posterior(winner: Rating<f64>, loser: Rating<f64>, cfg: &RatingConfig<f64>) -> (Rating<f64>, Rating<f64>) {
    let inflate = |r: Rating<f64>| Rating { mu: r.mu, sigma: (r.sigma * r.sigma + cfg.tau_dyn * cfg.tau_dyn).sqrt() };
    let (w, l) = (inflate(winner), inflate(loser));
    (winner_posterior(w, l, cfg.beta_perf), loser_posterior(w, l, cfg.beta_perf))
}

/// The 1v1 oracle grid: every `(mu, sigma)` with mu in {15, 25, 35} and sigma
/// in {3, 25/3}.
pub fn oracle_grid() -> Vec<Rating<f64>> {
    [15.0, 25.0, 35.0]
        .iter()
        .flat_map(|&mu| [3.0, 25.0 / 3.0].map(|sigma| Rating { mu, sigma }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::{update_two_team, Team, TeamOutcome};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn prior_vs_prior_frozen_values() {
        let c = RatingConfig::default();
        let p = Rating::prior(&c);
        let (w, l) = one_on_one_posterior(p, p, &c);
        // frozen from this quadrature; agrees with the closed-form 29.2054 / 7.1944
        assert_abs_diff_eq!(w.mu, 29.2054, epsilon = 1e-3);
        assert_abs_diff_eq!(l.mu, 20.7946, epsilon = 1e-3);
        assert_abs_diff_eq!(w.sigma, 7.1944, epsilon = 1e-3);
        assert_abs_diff_eq!(l.sigma, w.sigma, epsilon = 1e-9);
    }

    #[test]
    fn quadrature_agrees_with_rejection_sampling() {
        let c = RatingConfig::default();
        let a = Rating { mu: 20.0, sigma: 5.0 };
        let b = Rating { mu: 28.0, sigma: 3.0 };
        let (w, _) = one_on_one_posterior(a, b, &c);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sa = Normal::new(a.mu, (a.sigma.powi(2) + c.tau_dyn.powi(2)).sqrt()).unwrap();
        let sb = Normal::new(b.mu, (b.sigma.powi(2) + c.tau_dyn.powi(2)).sqrt()).unwrap();
        let noise = Normal::new(0.0, c.beta_perf).unwrap();
        let kept: Vec<f64> = (0..400_000)
            .filter_map(|_| {
                let (x, y) = (sa.sample(&mut rng), sb.sample(&mut rng));
                (x + noise.sample(&mut rng) > y + noise.sample(&mut rng)).then_some(x)
            })
            .collect();
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let sd = (kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert_abs_diff_eq!(w.mu, mean, epsilon = 0.05);
        assert_abs_diff_eq!(w.sigma, sd, epsilon = 0.05);
    }

    #[test]
    fn update_matches_oracle_on_grid() {
        let c = RatingConfig::default();
        let opp = Rating::prior(&c);
        for r in oracle_grid() {
            let (w, l) = one_on_one_posterior(r, opp, &c);
            let (a, b) = update_two_team(&[r], &[opp], TeamOutcome::win(Team::Alpha), &c).unwrap();
            assert_abs_diff_eq!(a[0].mu, w.mu, epsilon = 1e-2);
            assert_abs_diff_eq!(a[0].sigma, w.sigma, epsilon = 1e-2);
            assert_abs_diff_eq!(b[0].mu, l.mu, epsilon = 1e-2);
            assert_abs_diff_eq!(b[0].sigma, l.sigma, epsilon = 1e-2);
        }
        assert_eq!(oracle_grid().len(), 6);
    }
}
