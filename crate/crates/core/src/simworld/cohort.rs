use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::engine::{matchup_matrix, play_match};
use super::{
    matchmake, spawn_population, stream_rng, MatchRecord, MmrSource, SimConfig, SimError, SimPlayer, SnapshotSequence,
    Track, QUEUE_STREAM,
};
use crate::mmrnet::{Checkpoint, Predictor};
use crate::rating::{update_trueskill2_lite, update_two_team, Rating, Team};

/// Cold-start score provider consulted after every match.
pub trait MmrPredictor {
    /// Track the predictions are calibrated against; used as the fallback.
    fn base_track(&self) -> Track;
    fn predict(&self, seq: &SnapshotSequence) -> Result<f64, String>;
}

impl MmrPredictor for Predictor {
    fn base_track(&self) -> Track {
        self.checkpoint().meta.label_track
    }

    fn predict(&self, seq: &SnapshotSequence) -> Result<f64, String> {
        Predictor::predict(self, seq).map_err(|e| e.to_string())
    }
}

/// Runs `n_matches` matches on a fresh population.
///
/// Each step serves the persistent queue under `source`, plays the match, updates both rating tracks and,
/// for the cold-start source, refreshes the predictions of participants that
/// are still inside the cold-start window.
pub fn run_cold_start_cohort(
    cfg: &SimConfig,
    n_matches: usize,
    source: MmrSource,
    checkpoint: Option<&Checkpoint>,
) -> Result<(Vec<MatchRecord>, Vec<SimPlayer>), SimError> {
    let predictor = match (source, checkpoint) {
        (MmrSource::QuickSkill, None) => return Err(SimError::CheckpointMissing),
        (MmrSource::QuickSkill, Some(c)) => {
            Some(Predictor::new(c.clone()).map_err(|e| SimError::Prediction(e.to_string()))?)
        }
        _ => None,
    };
    run_cohort_with(cfg, n_matches, source, predictor.as_ref().map(|p| p as &dyn MmrPredictor))
}

/// [`run_cold_start_cohort`] with an arbitrary predictor.
pub fn run_cohort_with(
    cfg: &SimConfig,
    n_matches: usize,
    source: MmrSource,
    predictor: Option<&dyn MmrPredictor>,
) -> Result<(Vec<MatchRecord>, Vec<SimPlayer>), SimError> {
    if source == MmrSource::QuickSkill {
        if predictor.is_none() {
            return Err(SimError::CheckpointMissing);
        }
        if cfg.snapshot_window < cfg.cold_start_c {
            return Err(SimError::Config("snapshot_window must cover the cold-start window".into()));
        }
    }
    let base = predictor.map_or(Track::Ts2, |p| p.base_track());
    let mut players = spawn_population(cfg)?;
    let matchup = matchup_matrix(cfg);
    let mut queue_rng = stream_rng(cfg.seed, QUEUE_STREAM);
    let mut queue = MatchQueue::new(players.len());
    let mut records = Vec::with_capacity(n_matches);
    for m in 0..n_matches as u64 {
        let (alpha, beta) = queue.form_match(&players, cfg, source, base, &mut queue_rng)?;
        let mut record = play_match(&alpha, &beta, &players, &matchup, cfg, m, source, base);
        update_ratings(&mut record, &mut players, cfg)?;
        if let Some(pred) = predictor {
            for pg in &record.players {
                let player = &mut players[pg.player_id as usize];
                if (player.games_played as usize) < cfg.cold_start_c {
                    if let Some(seq) = &pg.snapshots {
                        player.predicted_mmr = Some(pred.predict(seq).map_err(SimError::Prediction)?);
                        player.predicted_from_match = Some(m);
                    }
                }
            }
        }
        records.push(record);
    }
    Ok((records, players))
}

/// Persistent matchmaking queue.
///
/// Players arrive uniformly at random from the idle population and wait in
/// arrival order. Each step the longest-waiting player that can head a
/// feasible match is served; when nobody can, the longest-waiting player
/// abandons and a fresh arrival takes the slot.
#[derive(Debug, Clone)]
pub(crate) struct MatchQueue {
    waiting: Vec<usize>,
    queued: Vec<bool>,
}

impl MatchQueue {
    pub(crate) fn new(population: usize) -> Self {
        Self { waiting: Vec::new(), queued: vec![false; population] }
    }

    fn refill(&mut self, target: usize, rng: &mut ChaCha8Rng) {
        let idle = self.queued.len() - self.waiting.len();
        let want = target.min(self.queued.len()).saturating_sub(self.waiting.len());
        let mut picks: Vec<usize> = sample(rng, idle, want).into_vec();
        picks.sort_unstable();
        // map ranks among idle players back to player indices
        let (mut rank, mut k) = (0, 0);
        let mut arrivals = Vec::with_capacity(want);
        for (i, &q) in self.queued.iter().enumerate() {
            if k == picks.len() {
                break;
            }
            if !q {
                if rank == picks[k] {
                    arrivals.push(i);
                    k += 1;
                }
                rank += 1;
            }
        }
        // arrival order is random, not index order
        for j in (1..arrivals.len()).rev() {
            arrivals.swap(j, rng.random_range(0..=j));
        }
        for i in arrivals {
            self.queued[i] = true;
            self.waiting.push(i);
        }
    }

    /// Forms the next match, retrying up to `max_queue_draws` abandonments.
    pub(crate) fn form_match(
        &mut self,
        players: &[SimPlayer],
        cfg: &SimConfig,
        source: MmrSource,
        base: Track,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<u32>, Vec<u32>), SimError> {
        for _ in 0..cfg.max_queue_draws {
            self.refill(cfg.queue_size, rng);
            for h in 0..self.waiting.len() {
                let mut pool: Vec<SimPlayer> = vec![players[self.waiting[h]].clone()];
                pool.extend(
                    self.waiting.iter().enumerate().filter(|&(j, _)| j != h).map(|(_, &i)| players[i].clone()),
                );
                if let Some(teams) = matchmake(&pool, cfg, source, base) {
                    for &id in teams.0.iter().chain(&teams.1) {
                        self.queued[id as usize] = false;
                    }
                    let queued = &self.queued;
                    self.waiting.retain(|&i| queued[i]);
                    return Ok(teams);
                }
            }
            if let Some(&oldest) = self.waiting.first() {
                self.queued[oldest] = false;
                self.waiting.remove(0);
            }
        }
        Err(SimError::MatchmakingStalled { attempts: cfg.max_queue_draws })
    }
}

/// Applies both rating tracks to a played match.
///
/// Reads only the pre-match ratings, the outcome and the performance scalars in
/// `record`; writes the posteriors into the record and the players, and
/// increments every participant's game count.
pub fn update_ratings(record: &mut MatchRecord, players: &mut [SimPlayer], cfg: &SimConfig) -> Result<(), SimError> {
    let split = |track: fn(&super::PlayerGame) -> Rating<f64>, team: Team| -> Vec<Rating<f64>> {
        record.team(team).map(track).collect()
    };
    let (a_ts, b_ts) = (split(|p| p.ts_before, Team::Alpha), split(|p| p.ts_before, Team::Beta));
    let (a_ts2, b_ts2) = (split(|p| p.ts2_before, Team::Alpha), split(|p| p.ts2_before, Team::Beta));
    let perf: Vec<f64> = record
        .team(Team::Alpha)
        .chain(record.team(Team::Beta))
        .map(|p| p.perf_z)
        .collect();
    let (na, nb) = update_two_team(&a_ts, &b_ts, record.outcome, &cfg.rating)?;
    let (na2, nb2) = update_trueskill2_lite(&a_ts2, &b_ts2, record.outcome, &perf, &cfg.rating)?;
    let mut ts_post = na.into_iter().chain(nb);
    let mut ts2_post = na2.into_iter().chain(nb2);
    // record.players lists alpha before beta, matching the chained posteriors
    for pg in &mut record.players {
        pg.ts_after = ts_post.next().expect("one posterior per player");
        pg.ts2_after = ts2_post.next().expect("one posterior per player");
        let p = &mut players[pg.player_id as usize];
        p.rating_ts = pg.ts_after;
        p.rating_ts2 = pg.ts2_after;
        p.games_played += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::rules_hold;

    fn small() -> SimConfig {
        SimConfig { population_size: 200, ..SimConfig::default() }
    }

    #[test]
    fn zero_matches_is_identity() {
        let cfg = small();
        let (records, pool) = run_cold_start_cohort(&cfg, 0, MmrSource::Ts, None).unwrap();
        assert!(records.is_empty());
        assert_eq!(pool, spawn_population(&cfg).unwrap());
    }

    #[test]
    fn quickskill_requires_checkpoint() {
        assert!(matches!(
            run_cold_start_cohort(&small(), 10, MmrSource::QuickSkill, None),
            Err(SimError::CheckpointMissing)
        ));
    }

    #[test]
    fn cohort_is_deterministic() {
        let cfg = small();
        let a = run_cold_start_cohort(&cfg, 300, MmrSource::Ts2, None).unwrap();
        let b = run_cold_start_cohort(&cfg, 300, MmrSource::Ts2, None).unwrap();
        assert_eq!(serde_json::to_string(&a.0).unwrap(), serde_json::to_string(&b.0).unwrap());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn cohort_bookkeeping_and_rules() {
        let cfg = small();
        let (records, pool) = run_cold_start_cohort(&cfg, 400, MmrSource::Ts, None).unwrap();
        let total: u32 = pool.iter().map(|p| p.games_played).sum();
        assert_eq!(total as usize, 400 * 10);
        for r in &records {
            let s = |t: Team| r.team(t).map(|p| p.matchmaking_score).collect::<Vec<_>>();
            assert!(rules_hold(&s(Team::Alpha), &s(Team::Beta), cfg.tau_player, cfg.phi_team));
            for p in &r.players {
                assert!(p.ts_after.sigma < p.ts_before.sigma + cfg.rating.tau_dyn);
            }
        }
    }

    /// Replays matchmaking and rating with every latent skill zeroed and checks
    /// that both streams are unchanged.
    #[test]
    fn hidden_truth_firewall() {
        let cfg = small();
        let (records, _) = run_cold_start_cohort(&cfg, 300, MmrSource::Ts2, None).unwrap();
        let mut blind = spawn_population(&cfg).unwrap();
        blind.iter_mut().for_each(|p| p.latent_skill = 0.0);
        let mut rng = stream_rng(cfg.seed, QUEUE_STREAM);
        let mut queue = MatchQueue::new(blind.len());
        for r in &records {
            let teams = queue.form_match(&blind, &cfg, MmrSource::Ts2, Track::Ts2, &mut rng).unwrap();
            assert_eq!(teams, (r.team_alpha.clone(), r.team_beta.clone()));
            let mut replay = r.clone();
            for pg in &mut replay.players {
                let p = &blind[pg.player_id as usize];
                assert_eq!((pg.ts_before, pg.ts2_before), (p.rating_ts, p.rating_ts2));
                pg.latent_skill = 0.0;
                pg.ts_after = pg.ts_before;
                pg.ts2_after = pg.ts2_before;
            }
            update_ratings(&mut replay, &mut blind, &cfg).unwrap();
            for (x, y) in replay.players.iter().zip(&r.players) {
                assert_eq!((x.ts_after, x.ts2_after), (y.ts_after, y.ts2_after));
            }
        }
    }

    #[test]
    fn ratings_track_latent_skill() {
        let cfg = SimConfig { population_size: 2000, ..SimConfig::default() };
        let (_, pool) = run_cold_start_cohort(&cfg, 5000, MmrSource::Ts, None).unwrap();
        let vet: Vec<&SimPlayer> = pool.iter().filter(|p| p.games_played >= 30).collect();
        assert!(vet.len() > 100, "only {} veterans", vet.len());
        let n = vet.len() as f64;
        let (mx, my) = (vet.iter().map(|p| p.latent_skill).sum::<f64>() / n, vet.iter().map(|p| p.rating_ts.mu).sum::<f64>() / n);
        let cov: f64 = vet.iter().map(|p| (p.latent_skill - mx) * (p.rating_ts.mu - my)).sum();
        let vx: f64 = vet.iter().map(|p| (p.latent_skill - mx).powi(2)).sum();
        let vy: f64 = vet.iter().map(|p| (p.rating_ts.mu - my).powi(2)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r > 0.8, "pearson {r}");
    }
}
