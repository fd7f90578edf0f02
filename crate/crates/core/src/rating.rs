//! Gaussian skill ratings for two-team games.
//!
//! Every player carries a belief `N(mu, sigma^2)` over their skill. A game is
//! modelled as each player producing a performance `skill + N(0, beta^2)`; the
//! team performance is the sum over its roster and the team with the larger
//! performance wins. With a single team-difference factor the factor graph is a
//! tree, so one round of expectation propagation is exact moment matching and
//! the update collapses to the closed forms below.
//!
//! [`update_trueskill2_lite`] adds an individual-performance coupling on top of
//! the outcome-only update. A player's standardized performance relative to
//! their team, `o = z - mean_team(z)`, is read as a noisy linear observation
//! `o = PERF_SLOPE * (skill - mean_team(skill)) + N(0, PERF_NOISE_VAR)`, and
//! each posterior from the team update absorbs it with a scalar Kalman step on
//! the innovation `o - PERF_SLOPE * (mu - mean_team(mu))`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use thiserror::Error;

use crate::scalar::Scalar;

/// Expected shift of a team-relative performance z-score per rating unit of
/// team-relative skill.
pub const PERF_SLOPE: f64 = 0.12;

/// Variance of a team-relative performance z-score around its expectation.
pub const PERF_NOISE_VAR: f64 = 0.37;

/// Below this standardized argument the hazard `pdf/cdf` is evaluated through
/// the Mills-ratio continued fraction instead of the direct ratio.
const ASYMPTOTIC_CUTOFF: f64 = -8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatingError {
    #[error("empty team roster")]
    EmptyTeam,
    #[error("performance list has {found} entries, roster has {expected} players")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("invalid rating config: {0}")]
    InvalidConfig(String),
}

/// Gaussian belief over one player's skill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating<S> {
    pub mu: S,
    pub sigma: S,
}

impl<S: Scalar> Rating<S> {
    pub fn new(mu: S, sigma: S) -> Result<Self, RatingError> {
        if !mu.is_finite() || !(sigma > S::zero()) || !sigma.is_finite() {
            return Err(RatingError::InvalidRating(format!("mu={mu}, sigma={sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    /// The prior rating every new player starts from.
    pub fn prior(cfg: &RatingConfig<S>) -> Self {
        Self { mu: cfg.mu0, sigma: cfg.sigma0 }
    }

    fn check(&self) -> Result<(), RatingError> {
        Self::new(self.mu, self.sigma).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct RatingConfig<S> {
    /// Prior mean.
    pub mu0: S,
    /// Prior standard deviation.
    pub sigma0: S,
    /// Per-player performance noise.
    pub beta_perf: S,
    /// Additive dynamics noise applied to sigma before every game.
    pub tau_dyn: S,
    pub draw_prob: S,
    /// `k` in the conservative estimate `mu - k * sigma`.
    pub conservative_k: S,
}

impl<S: Scalar> Default for RatingConfig<S> {
    fn default() -> Self {
        Self {
            mu0: S::of(25.0),
            sigma0: S::of(25.0 / 3.0),
            beta_perf: S::of(25.0 / 6.0),
            tau_dyn: S::of(25.0 / 300.0),
            draw_prob: S::zero(),
            conservative_k: S::zero(),
        }
    }
}

impl<S: Scalar> RatingConfig<S> {
    pub fn validate(&self) -> Result<(), RatingError> {
        let bad = |what: &str| Err(RatingError::InvalidConfig(what.to_string()));
        if !(self.sigma0 > S::zero()) {
            return bad("sigma0 must be > 0");
        }
        if !(self.beta_perf > S::zero()) {
            return bad("beta_perf must be > 0");
        }
        if !(self.tau_dyn >= S::zero()) {
            return bad("tau_dyn must be >= 0");
        }
        if !(self.draw_prob >= S::zero() && self.draw_prob < S::one()) {
            return bad("draw_prob must lie in [0, 1)");
        }
        if !(self.conservative_k >= S::zero()) {
            return bad("conservative_k must be >= 0");
        }
        if !self.mu0.is_finite() {
            return bad("mu0 must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Team {
    Alpha,
    Beta,
}

impl Team {
    pub fn other(self) -> Team {
        match self {
            Team::Alpha => Team::Beta,
            Team::Beta => Team::Alpha,
        }
    }
}

/// Result of a game. `winner` is ignored when `is_draw` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamOutcome {
    pub winner: Team,
    pub is_draw: bool,
}

impl TeamOutcome {
    pub fn win(winner: Team) -> Self {
        Self { winner, is_draw: false }
    }

    pub fn draw() -> Self {
        Self { winner: Team::Alpha, is_draw: true }
    }

    /// The same result seen with the team labels exchanged.
    pub fn swapped(self) -> Self {
        Self { winner: self.winner.other(), is_draw: self.is_draw }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `cdf(-z) / pdf(z)` for `z > 0` by the Laplace continued fraction
/// `1 / (z + 1/(z + 2/(z + 3/(z + ...))))`. Converges in a few dozen terms for
/// the `z > 8` range it is used on.
fn mills_ratio(z: f64) -> f64 {
    let mut tail = z;
    for k in (1..=64).rev() {
        tail = z + k as f64 / tail;
    }
    1.0 / tail
}

/// Hazard `pdf(x) / cdf(x)` of the standard normal.
fn normal_hazard(x: f64) -> f64 {
    if x < ASYMPTOTIC_CUTOFF {
        1.0 / mills_ratio(-x)
    } else {
        std_normal_pdf(x) / std_normal_cdf(x)
    }
}

/// Additive mean correction of a Gaussian truncated to `d > eps`, for a win.
pub fn moment_v<S: Scalar>(t: S, eps: S) -> S {
    S::of(normal_hazard((t - eps).as_f64()))
}

/// Multiplicative variance correction companion of [`moment_v`].
pub fn moment_w<S: Scalar>(t: S, eps: S) -> S {
    let x = (t - eps).as_f64();
    let v = normal_hazard(x);
    S::of(v * (v + x))
}

fn draw_moments(t: f64, eps: f64) -> (f64, f64) {
    if eps <= 0.0 {
        // Zero-width draw band: conditioning on the difference being exactly 0.
        return (-t, 1.0);
    }
    // v is odd and w even in t; evaluating at |t| keeps swapped teams exact.
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    let t = t.abs();
    let (a, b) = (eps - t, -eps - t);
    let denom = std_normal_cdf(a) - std_normal_cdf(b);
    if denom < 1e-300 {
        // all the mass sits at the near edge of the band
        return (sign * (eps - t), 1.0);
    }
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let v = (pb - pa) / denom;
    let w = v * v + (a * pa - b * pb) / denom;
    (sign * v, w)
}

/// Mean correction for a draw with standardized margin `eps`.
pub fn moment_v_draw<S: Scalar>(t: S, eps: S) -> S {
    S::of(draw_moments(t.as_f64(), eps.as_f64()).0)
}

/// Variance correction for a draw with standardized margin `eps`.
pub fn moment_w_draw<S: Scalar>(t: S, eps: S) -> S {
    S::of(draw_moments(t.as_f64(), eps.as_f64()).1)
}

/// Performance-difference margin inside which a game counts as a draw.
pub fn draw_margin<S: Scalar>(cfg: &RatingConfig<S>, n_players: usize) -> S {
    if cfg.draw_prob <= S::zero() {
        return S::zero();
    }
    let q = std_normal_quantile((cfg.draw_prob.as_f64() + 1.0) / 2.0);
    S::of(q * (n_players as f64).sqrt()) * cfg.beta_perf
}

fn check_team<S: Scalar>(team: &[Rating<S>]) -> Result<(), RatingError> {
    if team.is_empty() {
        return Err(RatingError::EmptyTeam);
    }
    team.iter().try_for_each(Rating::check)
}

/// Two-team update from the game outcome alone.
pub fn update_two_team<S: Scalar>(
    team_a: &[Rating<S>],
    team_b: &[Rating<S>],
    outcome: TeamOutcome,
    cfg: &RatingConfig<S>,
) -> Result<(Vec<Rating<S>>, Vec<Rating<S>>), RatingError> {
    cfg.validate()?;
    check_team(team_a)?;
    check_team(team_b)?;

    let tau2 = cfg.tau_dyn * cfg.tau_dyn;
    let beta2 = cfg.beta_perf * cfg.beta_perf;
    let var_a: Vec<S> = team_a.iter().map(|r| r.sigma * r.sigma + tau2).collect();
    let var_b: Vec<S> = team_b.iter().map(|r| r.sigma * r.sigma + tau2).collect();

    // Variance of the team-performance difference; per-team partial sums keep
    // the result independent of which team is listed first.
    let spread_a: S = var_a.iter().map(|&v| v + beta2).sum();
    let spread_b: S = var_b.iter().map(|&v| v + beta2).sum();
    let c2 = spread_a + spread_b;
    let c = c2.sqrt();
    let eps = draw_margin(cfg, team_a.len() + team_b.len()) / c;

    let sum_a: S = team_a.iter().map(|r| r.mu).sum();
    let sum_b: S = team_b.iter().map(|r| r.mu).sum();

    // (v, w) from the point of view of team a: a's means move by +var/c * v_a.
    let (v_a, w) = if outcome.is_draw {
        let t = (sum_a - sum_b) / c;
        (moment_v_draw(t, eps), moment_w_draw(t, eps))
    } else {
        let (t, sign) = match outcome.winner {
            Team::Alpha => ((sum_a - sum_b) / c, S::one()),
            Team::Beta => ((sum_b - sum_a) / c, -S::one()),
        };
        (sign * moment_v(t, eps), moment_w(t, eps))
    };

    let post = |ratings: &[Rating<S>], vars: &[S], v: S| -> Vec<Rating<S>> {
        ratings
            .iter()
            .zip(vars)
            .map(|(r, &var)| Rating {
                mu: r.mu + var / c * v,
                sigma: (var * (S::one() - var / c2 * w)).sqrt(),
            })
            .collect()
    };
    Ok((post(team_a, &var_a, v_a), post(team_b, &var_b, -v_a)))
}

/// Outcome update plus an individual-performance coupling.
///
/// `per_player_perf` holds one standardized performance scalar per player,
/// team a first. A constant perf vector carries no relative information and
/// leaves the outcome update untouched. The coupling never reverses the
/// direction of the outcome update: winners keep `mu >= prior mu` and losers
/// `mu <= prior mu`.
pub fn update_trueskill2_lite<S: Scalar>(
    team_a: &[Rating<S>],
    team_b: &[Rating<S>],
    outcome: TeamOutcome,
    per_player_perf: &[S],
    cfg: &RatingConfig<S>,
) -> Result<(Vec<Rating<S>>, Vec<Rating<S>>), RatingError> {
    let expected = team_a.len() + team_b.len();
    if per_player_perf.len() != expected {
        return Err(RatingError::LengthMismatch { expected, found: per_player_perf.len() });
    }
    let (mut post_a, mut post_b) = update_two_team(team_a, team_b, outcome, cfg)?;
    let first = per_player_perf[0];
    if per_player_perf.iter().all(|&z| z == first) {
        return Ok((post_a, post_b));
    }
    let (perf_a, perf_b) = per_player_perf.split_at(team_a.len());
    let (slope, noise) = (S::of(PERF_SLOPE), S::of(PERF_NOISE_VAR));

    let couple = |prior: &[Rating<S>], post: &mut [Rating<S>], perf: &[S], team: Team| {
        let n = S::of_usize(perf.len());
        let z_mean = perf.iter().copied().sum::<S>() / n;
        let mu_mean = post.iter().map(|r| r.mu).sum::<S>() / n;
        let var_sum = post.iter().map(|r| r.sigma * r.sigma).sum::<S>();
        for ((p, r), &z) in prior.iter().zip(post.iter_mut()).zip(perf) {
            let var = r.sigma * r.sigma;
            // o - mean(o) loads (1 - 1/n) on the player's own skill
            let h = slope * (S::one() - S::one() / n);
            // teammates' uncertainty enters through the team mean
            let r_eff = noise + slope * slope * (var_sum - var) / (n * n);
            let innovation = (z - z_mean) - slope * (r.mu - mu_mean);
            let gain = var * h / (h * h * var + r_eff);
            let mut mu = r.mu + gain * innovation;
            if !outcome.is_draw {
                if outcome.winner == team {
                    mu = mu.max(p.mu);
                } else {
                    mu = mu.min(p.mu);
                }
            }
            r.mu = mu;
            r.sigma = (var * (S::one() - gain * h)).sqrt();
        }
    };
    couple(team_a, &mut post_a, perf_a, Team::Alpha);
    couple(team_b, &mut post_b, perf_b, Team::Beta);
    Ok((post_a, post_b))
}

/// Conservative skill estimate `mu - k * sigma` used as the MMR.
pub fn mmr_scalar<S: Scalar>(r: &Rating<S>, cfg: &RatingConfig<S>) -> S {
    r.mu - cfg.conservative_k * r.sigma
}
