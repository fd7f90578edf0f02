use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use super::{
    stream_rng, MatchRecord, MmrSource, PlayerGame, SimConfig, SimPlayer, SnapshotSequence, Track, MATCHUP_STREAM,
    MATCH_STREAM_BASE,
};
use crate::kernels::sigmoid;
use crate::rating::{Team, TeamOutcome};

/// Personal statistics per slice, in feature order.
pub const PERSONAL_FEATURES: [&str; 10] = [
    "kills",
    "deaths",
    "assists",
    "gold",
    "last_hits",
    "experience",
    "damage_dealt",
    "damage_taken",
    "objective_share",
    "wards",
];

/// The 32 built-in feature columns: personal, teammate mean, opponent mean,
/// then game context.
pub const FEATURE_NAMES: [&str; 32] = [
    "kills",
    "deaths",
    "assists",
    "gold",
    "last_hits",
    "experience",
    "damage_dealt",
    "damage_taken",
    "objective_share",
    "wards",
    "team_kills",
    "team_deaths",
    "team_assists",
    "team_gold",
    "team_last_hits",
    "team_experience",
    "team_damage_dealt",
    "team_damage_taken",
    "team_objective_share",
    "team_wards",
    "opp_kills",
    "opp_deaths",
    "opp_assists",
    "opp_gold",
    "opp_last_hits",
    "opp_experience",
    "opp_damage_dealt",
    "opp_damage_taken",
    "opp_objective_share",
    "opp_wards",
    "minute",
    "team_gold_lead",
];

const NP: usize = PERSONAL_FEATURES.len();
const MIN_SLICES: usize = 8;
const MAX_SLICES: usize = 12;
const MINUTES_PER_SLICE: f64 = 3.0;
/// Rating units per unit of standardized performance signal.
const SIGNAL_SCALE: f64 = 10.0;

/// Antisymmetric character matchup matrix: `m[i][j]` is the edge character
/// `i` has over character `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matchup {
    n: usize,
    m: Vec<f64>,
}

impl Matchup {
    pub fn edge(&self, i: u32, j: u32) -> f64 {
        self.m[i as usize * self.n + j as usize]
    }

    /// Per-player synergy offset of `own` against `opp`.
    pub fn synergy(&self, own: &[u32], opp: &[u32], strength: f64) -> f64 {
        let total: f64 = own.iter().flat_map(|&i| opp.iter().map(move |&j| self.edge(i, j))).sum();
        strength * total / (own.len() * opp.len()) as f64
    }
}

pub fn matchup_matrix(cfg: &SimConfig) -> Matchup {
    let n = cfg.lineup_roster;
    let mut rng = stream_rng(cfg.seed, MATCHUP_STREAM);
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.sample(StandardNormal);
            m[i * n + j] = v;
            m[j * n + i] = -v;
        }
    }
    Matchup { n, m }
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn mean_rows(rows: &[&[f64; NP]]) -> [f64; NP] {
    let mut out = [0.0; NP];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r.iter()) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

/// Plays one match between two rosters.
///
/// `players` is indexed by player id. The RNG stream is derived from
/// `(cfg.seed, match_id)`. Rating fields of the record hold the pre-match
/// ratings on both sides; [`super::update_ratings`] fills in the posteriors.
///
/// Fights (kills, damage, objectives) follow the game's sampled performance
/// relative to the opponents. Farming and vision (gold, last hits, experience,
/// wards) follow the player's standing skill, so they vary less from game to
/// game. Both signals are scaled by the phase weight.
#[allow(clippy::too_many_arguments)]
pub fn play_match(
    alpha: &[u32],
    beta: &[u32],
    players: &[SimPlayer],
    matchup: &Matchup,
    cfg: &SimConfig,
    match_id: u64,
    source: MmrSource,
    base: Track,
) -> MatchRecord {
    let mut rng = stream_rng(cfg.seed, MATCH_STREAM_BASE + match_id);
    let ts = alpha.len();
    let ids: Vec<u32> = alpha.iter().chain(beta).copied().collect();
    let n = ids.len();
    let team_of = |k: usize| if k < ts { Team::Alpha } else { Team::Beta };
    let mates = |k: usize| if k < ts { 0..ts } else { ts..n };
    let opps = |k: usize| if k < ts { ts..n } else { 0..ts };

    let chars: Vec<u32> = sample(&mut rng, cfg.lineup_roster, n).into_iter().map(|c| c as u32).collect();
    let syn_alpha = matchup.synergy(&chars[..ts], &chars[ts..], cfg.synergy_strength);
    let noise = Normal::new(0.0, cfg.rating.beta_perf).expect("beta_perf validated");
    let perf: Vec<f64> = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let syn = if k < ts { syn_alpha } else { -syn_alpha };
            players[id as usize].latent_skill + syn + noise.sample(&mut rng)
        })
        .collect();
    let team_perf = |r: std::ops::Range<usize>| perf[r].iter().sum::<f64>();
    let (sum_a, sum_b) = (team_perf(0..ts), team_perf(ts..n));
    let outcome = TeamOutcome::win(if sum_a >= sum_b { Team::Alpha } else { Team::Beta });
    let mean_perf = [sum_a / ts as f64, sum_b / ts as f64];

    let slices = rng.random_range(MIN_SLICES..=MAX_SLICES);
    let sn = cfg.snapshot_noise;
    let mut cum = vec![[0.0f64; 6]; n];
    let mut personal = vec![vec![[0.0f64; NP]; slices]; n];
    for t in 0..slices {
        let phase = t as f64 / (slices - 1) as f64;
        let w = cfg.early_phase_weight + (cfg.late_phase_weight - cfg.early_phase_weight) * phase;
        let mut edge = vec![0.0; n];
        let mut abs = vec![0.0; n];
        for k in 0..n {
            let opp_mean = mean_perf[usize::from(k < ts)];
            let e: f64 = rng.sample(StandardNormal);
            let a: f64 = rng.sample(StandardNormal);
            edge[k] = w * (perf[k] - opp_mean) / SIGNAL_SCALE + sn * e;
            abs[k] = w * (players[ids[k] as usize].latent_skill - cfg.skill_prior.mean) / SIGNAL_SCALE + sn * a;
        }

        let mut kills = vec![0.0; n];
        let mut deaths = vec![0.0; n];
        let mut assists = vec![0.0; n];
        let fight_rate = 0.3 + 1.5 * phase;
        for side in [0..ts, ts..n] {
            let other = if side.start == 0 { ts..n } else { 0..ts };
            let team_edge = w * (team_perf(side.clone()) - team_perf(other.clone())) / (ts as f64 * SIGNAL_SCALE);
            let lambda = (fight_rate * (0.7 * team_edge).exp()).min(12.0);
            let events = Poisson::new(lambda).map_or(0.0, |p| p.sample(&mut rng)) as usize;
            let kw: Vec<f64> = side.clone().map(|k| (1.2 * edge[k]).exp()).collect();
            let vw: Vec<f64> = other.clone().map(|k| (-1.2 * edge[k]).exp()).collect();
            for _ in 0..events {
                let killer = side.start + pick(&kw, &mut rng);
                let victim = other.start + pick(&vw, &mut rng);
                kills[killer] += 1.0;
                deaths[victim] += 1.0;
                for mate in side.clone().filter(|&m| m != killer) {
                    if rng.random::<f64>() < 0.35 {
                        assists[mate] += 1.0;
                    }
                }
            }
        }

        for k in 0..n {
            let mut z = || -> f64 { rng.sample(StandardNormal) };
            let gold = (900.0 * (1.0 + 0.25 * abs[k]) + 120.0 * z()).max(0.0) + 300.0 * kills[k] + 100.0 * assists[k];
            let last_hits = (14.0 * (1.0 + 0.3 * abs[k] * (1.0 - 0.5 * phase)) + 2.0 * z()).max(0.0);
            let xp = (800.0 * (1.0 + 0.2 * abs[k]) + 80.0 * z()).max(0.0) + 150.0 * kills[k];
            let dealt = (1200.0 * (0.4 + phase) * (1.0 + 0.4 * edge[k]) + 150.0 * z()).max(0.0);
            let taken = (1200.0 * (0.4 + phase) * (1.0 - 0.3 * edge[k]) + 150.0 * z()).max(0.0);
            let objective = sigmoid(1.5 * edge[k] + 0.5 * z()) * phase;
            let wards = (2.0 + 0.6 * abs[k] + 0.5 * z()).max(0.0);
            let c = &mut cum[k];
            for (acc, inc) in c.iter_mut().zip([kills[k], deaths[k], assists[k], gold, last_hits, xp]) {
                *acc += inc;
            }
            personal[k][t] = [c[0], c[1], c[2], c[3], c[4], c[5], dealt, taken, objective, wards];
        }
    }

    let f = cfg.feature_count;
    let mut rows = vec![Vec::with_capacity(slices); n];
    for t in 0..slices {
        let slice: Vec<&[f64; NP]> = (0..n).map(|k| &personal[k][t]).collect();
        let team_mean = [mean_rows(&slice[..ts]), mean_rows(&slice[ts..])];
        let gold: Vec<f64> = slice.iter().map(|r| r[3]).collect();
        let gold_a: f64 = gold[..ts].iter().sum();
        let gold_b: f64 = gold[ts..].iter().sum();
        for k in 0..n {
            let (own, opp) = if k < ts { (0, 1) } else { (1, 0) };
            let lead = if k < ts { gold_a - gold_b } else { gold_b - gold_a };
            let mut row = Vec::with_capacity(f.max(FEATURE_NAMES.len()));
            row.extend_from_slice(slice[k]);
            row.extend_from_slice(&team_mean[own]);
            row.extend_from_slice(&team_mean[opp]);
            row.push(MINUTES_PER_SLICE * (t + 1) as f64);
            row.push(lead / 1000.0);
            row.truncate(f);
            rows[k].push(row);
        }
    }
    if f > FEATURE_NAMES.len() {
        for row in rows.iter_mut().flatten() {
            while row.len() < f {
                row.push(rng.sample(StandardNormal));
            }
        }
    }

    let composite: Vec<f64> = (0..n)
        .map(|k| {
            let c = &cum[k];
            c[0] - c[1] + 0.5 * c[2] + c[3] / 1000.0 + c[4] / 40.0
        })
        .collect();
    let mean_c = composite.iter().sum::<f64>() / n as f64;
    let sd_c = (composite.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64).sqrt();

    let avg_games = ids.iter().map(|&id| f64::from(players[id as usize].games_played)).sum::<f64>() / n as f64;
    let mut rows = rows.into_iter();
    let games = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let p = &players[id as usize];
            let snapshot_rows = rows.next().expect("one row set per player");
            let snapshots = ((p.games_played as usize) < cfg.snapshot_window).then(|| {
                let own: Vec<u32> = std::iter::once(chars[k]).chain(mates(k).filter(|&m| m != k).map(|m| chars[m])).collect();
                let opp: Vec<u32> = opps(k).map(|m| chars[m]).collect();
                SnapshotSequence { length: slices, features: snapshot_rows, lineup_ids: vec![own, opp] }
            });
            PlayerGame {
                player_id: id,
                team: team_of(k),
                character: chars[k],
                games_before: p.games_played,
                latent_skill: p.latent_skill,
                matchmaking_score: super::score_of(p, source, base, cfg),
                kills: cum[k][0] as u32,
                deaths: cum[k][1] as u32,
                assists: cum[k][2] as u32,
                perf_z: if sd_c > 0.0 { (composite[k] - mean_c) / sd_c } else { 0.0 },
                ts_before: p.rating_ts,
                ts_after: p.rating_ts,
                ts2_before: p.rating_ts2,
                ts2_after: p.rating_ts2,
                predicted_before: p.predicted_mmr,
                predicted_from_match: p.predicted_from_match,
                snapshots,
            }
        })
        .collect();

    MatchRecord {
        match_id,
        mmr_source: source,
        team_alpha: alpha.to_vec(),
        team_beta: beta.to_vec(),
        outcome,
        avg_games_at_match: avg_games,
        game_length: slices,
        players: games,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::spawn_population;
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    fn world(latents: &[f64]) -> (SimConfig, Vec<SimPlayer>, Matchup) {
        let cfg = SimConfig { population_size: latents.len(), queue_size: latents.len(), ..SimConfig::default() };
        let mut players = spawn_population(&cfg).unwrap();
        for (p, &s) in players.iter_mut().zip(latents) {
            p.latent_skill = s;
        }
        let m = matchup_matrix(&cfg);
        (cfg, players, m)
    }

    fn alpha_win_rate(latents: &[f64], replays: u64) -> f64 {
        let (cfg, players, m) = world(latents);
        let wins = (0..replays)
            .filter(|&id| {
                let r = play_match(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], &players, &m, &cfg, id, MmrSource::Ts, Track::Ts);
                r.outcome.winner == Team::Alpha
            })
            .count();
        wins as f64 / replays as f64
    }

    #[test]
    fn matchup_is_antisymmetric() {
        let m = matchup_matrix(&SimConfig::default());
        for i in 0..50 {
            assert_eq!(m.edge(i, i), 0.0);
            for j in 0..50 {
                assert_eq!(m.edge(i, j), -m.edge(j, i));
            }
        }
    }

    #[test]
    fn stronger_team_wins_almost_always() {
        let mut latents = vec![35.0; 5];
        latents.extend([25.0; 5]);
        let rate = alpha_win_rate(&latents, 10_000);
        // closed form without synergy: Phi(50 / (beta * sqrt(10)))
        let closed = StatNormal::standard().cdf(50.0 / (25.0 / 6.0 * 10f64.sqrt()));
        assert!(closed > 0.99);
        assert!(rate > 0.95, "rate {rate}");
    }

    #[test]
    fn equal_teams_are_a_coin_flip() {
        let rate = alpha_win_rate(&[25.0; 10], 10_000);
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn record_bookkeeping() {
        let latents: Vec<f64> = (0..10).map(|i| 15.0 + 2.0 * f64::from(i)).collect();
        let (cfg, players, m) = world(&latents);
        for id in 0..50 {
            let r = play_match(&[0, 2, 4, 6, 8], &[1, 3, 5, 7, 9], &players, &m, &cfg, id, MmrSource::Ts, Track::Ts);
            assert!((MIN_SLICES..=MAX_SLICES).contains(&r.game_length));
            let kills = |t: Team| r.team(t).map(|p| p.kills).sum::<u32>();
            let deaths = |t: Team| r.team(t).map(|p| p.deaths).sum::<u32>();
            assert_eq!(kills(Team::Alpha), deaths(Team::Beta));
            assert_eq!(kills(Team::Beta), deaths(Team::Alpha));
            for (k, p) in r.players.iter().enumerate() {
                let s = p.snapshots.as_ref().unwrap();
                s.validate().unwrap();
                assert_eq!(s.feature_count(), 32);
                assert_eq!(s.lineup_ids[0][0], p.character);
                for t in 1..s.length {
                    for c in [0, 1, 2, 3, 4, 5, 10, 13] {
                        assert!(s.features[t][c] >= s.features[t - 1][c]);
                    }
                }
                assert_eq!(s.features[s.length - 1][0], f64::from(p.kills));
                // team mirror is the exact mean of the teammates' personal values
                let range = if k < 5 { 0..5 } else { 5..10 };
                for t in 0..s.length {
                    for c in 0..NP {
                        let mean = range
                            .clone()
                            .map(|m| r.players[m].snapshots.as_ref().unwrap().features[t][c])
                            .sum::<f64>()
                            / 5.0;
                        assert!((s.features[t][NP + c] - mean).abs() <= 1e-9 * mean.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn expected_kills_grow_with_relative_skill() {
        let latents = [10.0, 20.0, 25.0, 30.0, 40.0, 25.0, 25.0, 25.0, 25.0, 25.0];
        let (cfg, players, m) = world(&latents);
        let mut kills = [0.0; 5];
        for id in 0..4000 {
            let r = play_match(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], &players, &m, &cfg, id, MmrSource::Ts, Track::Ts);
            for (k, p) in r.players[..5].iter().enumerate() {
                kills[k] += f64::from(p.kills);
            }
        }
        assert!(kills.windows(2).all(|w| w[0] < w[1]), "{kills:?}");
    }

    #[test]
    fn feature_count_is_configurable() {
        let (mut cfg, players, m) = world(&[25.0; 10]);
        for f in [4, 40] {
            cfg.feature_count = f;
            let r = play_match(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], &players, &m, &cfg, 3, MmrSource::Ts, Track::Ts);
            assert!(r.players.iter().all(|p| p.snapshots.as_ref().unwrap().feature_count() == f));
        }
    }

    #[test]
    fn novices_only_carry_snapshots() {
        let (cfg, mut players, m) = world(&[25.0; 10]);
        players[3].games_played = cfg.snapshot_window as u32;
        let r = play_match(&[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9], &players, &m, &cfg, 0, MmrSource::Ts, Track::Ts);
        assert!(r.players[3].snapshots.is_none());
        assert!(r.players[2].snapshots.is_some());
        assert!((r.avg_games_at_match - 1.8).abs() < 1e-12);
    }
}
