//! Deterministic synthetic MOBA world.
//!
//! Players carry a hidden latent skill that only the match engine and the
//! evaluation oracles read. Matchmaking and rating updates see nothing but the
//! rating tracks (and, for the cold-start source, model predictions).

mod cohort;
mod engine;
mod matchmaking;

pub use cohort::{run_cold_start_cohort, run_cohort_with, update_ratings, MmrPredictor};
pub use engine::{matchup_matrix, play_match, Matchup, FEATURE_NAMES, PERSONAL_FEATURES};
pub use matchmaking::{matchmake, rules_hold, score_of};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rating::{Rating, RatingConfig, RatingError, Team, TeamOutcome};

/// RNG stream ids. Match `m` draws from stream `MATCH_STREAM_BASE + m`.
pub(crate) const POPULATION_STREAM: u64 = 0;
pub(crate) const QUEUE_STREAM: u64 = 1;
pub(crate) const MATCHUP_STREAM: u64 = 2;
pub(crate) const MATCH_STREAM_BASE: u64 = 16;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("the quickskill mmr source needs a trained checkpoint")]
    CheckpointMissing,
    #[error("no feasible match after {attempts} queue draws")]
    MatchmakingStalled { attempts: usize },
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error("prediction failed: {0}")]
    Prediction(String),
}

/// Which score a player exposes to matchmaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmrSource {
    Ts,
    Ts2,
    /// Model prediction while in the cold-start window, base track afterwards.
    QuickSkill,
}

/// One of the two rating tracks every player carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Ts,
    Ts2,
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Track::Ts => "ts",
            Track::Ts2 => "ts2",
        })
    }
}

impl std::fmt::Display for MmrSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MmrSource::Ts => "ts",
            MmrSource::Ts2 => "ts2",
            MmrSource::QuickSkill => "quickskill",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillPrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub population_size: usize,
    pub team_size: usize,
    /// Largest allowed score gap between two players of the same team.
    pub tau_player: f64,
    /// Largest allowed gap between the two team score sums.
    pub phi_team: f64,
    /// Games in the cold-start window.
    pub cold_start_c: usize,
    /// Future game whose rating is the training label.
    pub label_k: usize,
    pub seed: u64,
    pub skill_prior: SkillPrior,
    /// Per-slice noise on the standardized performance signals.
    pub snapshot_noise: f64,
    /// Number of playable characters.
    pub lineup_roster: usize,
    /// Scale of the character matchup effect, in rating units per player.
    pub synergy_strength: f64,
    /// Features per snapshot slice.
    pub feature_count: usize,
    /// Signal weight of the first (laning) slice.
    pub early_phase_weight: f64,
    /// Signal weight of the last (team-fight) slice.
    pub late_phase_weight: f64,
    /// Players drawn into the matchmaking queue per attempt.
    pub queue_size: usize,
    /// Queue draws before the cohort gives up on forming a match.
    pub max_queue_draws: usize,
    /// Snapshots are kept for players with fewer games than this.
    pub snapshot_window: usize,
    pub rating: RatingConfig<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population_size: 2000,
            team_size: 5,
            tau_player: 8.0,
            phi_team: 40.0,
            cold_start_c: 18,
            label_k: 18,
            seed: 42,
            skill_prior: SkillPrior { mean: 25.0, std: 25.0 / 3.0 },
            snapshot_noise: 0.5,
            lineup_roster: 50,
            synergy_strength: 4.0,
            feature_count: 32,
            early_phase_weight: 0.35,
            late_phase_weight: 1.0,
            queue_size: 40,
            max_queue_draws: 1000,
            snapshot_window: 18,
            rating: RatingConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::Config(msg.to_string()));
        if self.team_size == 0 {
            return bad("team_size must be >= 1");
        }
        if self.population_size < 2 * self.team_size {
            return Err(SimError::Config(format!(
                "population of {} cannot form one {}v{} match",
                self.population_size, self.team_size, self.team_size
            )));
        }
        if self.label_k < 1 || self.cold_start_c < 1 {
            return bad("label_k and cold_start_c must be >= 1");
        }
        if !(self.tau_player > 0.0) || !(self.phi_team > 0.0) {
            return bad("tau_player and phi_team must be > 0");
        }
        if !(self.skill_prior.std >= 0.0) || !self.skill_prior.mean.is_finite() {
            return bad("skill prior must be finite with std >= 0");
        }
        if self.lineup_roster < 2 * self.team_size {
            return bad("lineup_roster must cover both teams with distinct characters");
        }
        if self.feature_count == 0 {
            return bad("feature_count must be >= 1");
        }
        if self.queue_size < 2 * self.team_size || self.queue_size > self.population_size {
            return bad("queue_size must lie in [2 * team_size, population_size]");
        }
        if !(self.snapshot_noise >= 0.0) {
            return bad("snapshot_noise must be >= 0");
        }
        self.rating.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlayer {
    pub id: u32,
    /// Hidden ground truth; never read by matchmaking or rating.
    pub latent_skill: f64,
    pub rating_ts: Rating<f64>,
    pub rating_ts2: Rating<f64>,
    pub games_played: u32,
    /// Latest model prediction and the match it was computed from.
    pub predicted_mmr: Option<f64>,
    pub predicted_from_match: Option<u64>,
}

impl SimPlayer {
    pub fn rating(&self, track: Track) -> &Rating<f64> {
        match track {
            Track::Ts => &self.rating_ts,
            Track::Ts2 => &self.rating_ts2,
        }
    }
}

/// Players with latent skills drawn i.i.d. from the skill prior, all at the
/// rating prior.
pub fn spawn_population(cfg: &SimConfig) -> Result<Vec<SimPlayer>, SimError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, POPULATION_STREAM);
    let skill = Normal::new(cfg.skill_prior.mean, cfg.skill_prior.std)
        .map_err(|e| SimError::Config(format!("skill prior: {e}")))?;
    let prior = Rating::prior(&cfg.rating);
    Ok((0..cfg.population_size as u32)
        .map(|id| SimPlayer {
            id,
            latent_skill: skill.sample(&mut rng),
            rating_ts: prior,
            rating_ts2: prior,
            games_played: 0,
            predicted_mmr: None,
            predicted_from_match: None,
        })
        .collect())
}

/// Per-slice performance features of one player in one game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSequence {
    /// Number of slices, in `[1, 12]`.
    pub length: usize,
    /// `length` rows of `F` features.
    pub features: Vec<Vec<f64>>,
    /// Row 0: own team characters (own character first); row 1: opponents.
    pub lineup_ids: Vec<Vec<u32>>,
}

/// Upper bound on slices kept per game.
pub const T_MAX: usize = 12;

impl SnapshotSequence {
    pub fn feature_count(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.length == 0 || self.length > T_MAX {
            return Err(format!("snapshot length {} outside [1, {T_MAX}]", self.length));
        }
        if self.features.len() != self.length {
            return Err(format!("{} feature rows for length {}", self.features.len(), self.length));
        }
        let f = self.feature_count();
        if f == 0 || self.features.iter().any(|r| r.len() != f) {
            return Err("ragged or empty feature rows".into());
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        if self.lineup_ids.len() != 2 || self.lineup_ids[0].len() != self.lineup_ids[1].len() {
            return Err("lineup must have two rows of equal size".into());
        }
        Ok(())
    }

    /// Sequence reduced to its final slice.
    pub fn last_slice(&self) -> SnapshotSequence {
        SnapshotSequence {
            length: 1,
            features: vec![self.features[self.length - 1].clone()],
            lineup_ids: self.lineup_ids.clone(),
        }
    }
}

/// One player's view of a match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerGame {
    pub player_id: u32,
    pub team: Team,
    pub character: u32,
    /// Games completed before this one.
    pub games_before: u32,
    /// Ground truth, for evaluation oracles only.
    pub latent_skill: f64,
    /// Score the player exposed to matchmaking.
    pub matchmaking_score: f64,
    pub kills: u32,
    pub deaths: u32,
    pub assists: u32,
    /// Within-match z-score of the end-game performance composite.
    pub perf_z: f64,
    pub ts_before: Rating<f64>,
    pub ts_after: Rating<f64>,
    pub ts2_before: Rating<f64>,
    pub ts2_after: Rating<f64>,
    /// Latest model prediction available before the match, if any.
    pub predicted_before: Option<f64>,
    /// Match whose snapshots produced `predicted_before`.
    pub predicted_from_match: Option<u64>,
    pub snapshots: Option<SnapshotSequence>,
}

impl PlayerGame {
    pub fn before(&self, track: Track) -> &Rating<f64> {
        match track {
            Track::Ts => &self.ts_before,
            Track::Ts2 => &self.ts2_before,
        }
    }

    pub fn after(&self, track: Track) -> &Rating<f64> {
        match track {
            Track::Ts => &self.ts_after,
            Track::Ts2 => &self.ts2_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub match_id: u64,
    pub mmr_source: MmrSource,
    pub team_alpha: Vec<u32>,
    pub team_beta: Vec<u32>,
    pub outcome: TeamOutcome,
    /// Mean of the participants' `games_played` at matchmaking time.
    pub avg_games_at_match: f64,
    /// Slices in this game.
    pub game_length: usize,
    /// Alpha players first, in roster order, then beta.
    pub players: Vec<PlayerGame>,
}

impl MatchRecord {
    pub fn team(&self, team: Team) -> impl Iterator<Item = &PlayerGame> {
        self.players.iter().filter(move |p| p.team == team)
    }

    pub fn winner(&self) -> Option<Team> {
        (!self.outcome.is_draw).then_some(self.outcome.winner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spawn_is_deterministic() {
        let cfg = SimConfig { population_size: 10, seed: 42, queue_size: 10, ..SimConfig::default() };
        let a = serde_json::to_string(&spawn_population(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&spawn_population(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spawn_matches_prior_mean() {
        let cfg = SimConfig { population_size: 10_000, ..SimConfig::default() };
        let players = spawn_population(&cfg).unwrap();
        let mean = players.iter().map(|p| p.latent_skill).sum::<f64>() / 10_000.0;
        assert!((mean - 25.0).abs() < 0.25, "mean {mean}");
        assert!(players.iter().all(|p| p.rating_ts == Rating::prior(&cfg.rating) && p.games_played == 0));
    }

    #[test]
    fn spawn_rejects_tiny_population() {
        let cfg = SimConfig { population_size: 9, queue_size: 9, ..SimConfig::default() };
        assert!(matches!(spawn_population(&cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        assert!(SimConfig { tau_player: 0.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { label_k: 0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { lineup_roster: 9, ..SimConfig::default() }.validate().is_err());
    }
}
