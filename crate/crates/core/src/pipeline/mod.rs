//! End-to-end acceptance pipeline on a pinned synthetic world.
//!
//! [`run_repro`] simulates a training cohort and a hold-out cohort, labels
//! both, trains every network variant under one budget and checks the ten
//! acceptance criteria, writing each criterion's data as CSV into one
//! directory. Everything is seeded; two runs with the same [`ReproConfig`]
//! write byte-identical CSVs.

mod checks;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checks::{
    converged_at, convergence_curve, end_to_end_check, gradient_suite, nesting_mismatches, rating_oracle_rows,
    tiny_config, tiny_nesting_mismatches, ConvergenceConfig, ConvergenceRow, GradRow, OracleRow, END_TO_END_TOL,
    KERNEL_TOL,
};

use crate::datasets::{
    decode_checkpoint, encode_checkpoint, extract_training_samples, read_matches, read_samples, write_csv,
    write_json, write_matches, write_samples, DatasetError,
};
use crate::kernels::KernelError;
use crate::metrics::{
    bucket_by_diff, default_edges, extreme_kd_ratio, k_sweep, regression_errors, stratify_by_avg_games,
    unfair_fraction, unfair_win_rate, win_rate_h, EvalBucket, FutureMmrScores, KSweepRow, MetricsError,
    QuickSkillScores, ScoreSource, Scorer, DEFAULT_KD_THRESHOLD, DEFAULT_STRATA,
};
use crate::mmrnet::{train, CurvePoint, Hyper, MmrNetError, ModelConfig, Predictor, TrainOutput, TrainingSample, Variant};
use crate::rating::{RatingConfig, RatingError};
use crate::simworld::{run_cold_start_cohort, MatchRecord, MmrSource, SimConfig, SimError, Track};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] MmrNetError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Check(String),
}

/// Matches with a lower average prior game count are "cold".
pub const COLD_AVG_GAMES: f64 = 10.0;
/// Required win-rate lead of cold-start predictions over raw TS2 on cold matches.
pub const COLD_WIN_RATE_LEAD: f64 = 0.02;
/// Relative gap under which two validation errors count as tied.
pub const ABLATION_TIE: f64 = 0.01;
pub const PLATEAU_TOL: f64 = 0.01;
/// Latent buckets with fewer games are left out of the calibration check.
pub const MIN_CALIBRATION_GAMES: usize = 50;
pub const HEATMAP_SHARE: f64 = 0.7;
/// Leading slices averaged as the early phase.
pub const EARLY_SLICES: usize = 4;
/// Trailing slices averaged as the late phase.
pub const LATE_SLICES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproConfig {
    /// World of the training cohort.
    pub sim: SimConfig,
    pub train_matches: usize,
    /// Seed of the hold-out cohort; everything else is shared with `sim`.
    pub eval_seed: u64,
    pub eval_matches: usize,
    pub label_track: Track,
    /// Architecture shared by all variants; only `variant` changes.
    pub model: ModelConfig,
    pub hyper: Hyper,
    pub ks: Vec<usize>,
    pub convergence: ConvergenceConfig,
    /// Hold-out samples pushed through the nesting check.
    pub nesting_samples: usize,
    /// Matches and samples written for the persistence round trip.
    pub roundtrip_records: usize,
    /// Whether to rerun the smoke configuration twice and compare outputs.
    pub determinism_check: bool,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self::pinned()
    }
}

impl ReproConfig {
    /// The acceptance configuration.
    pub fn pinned() -> Self {
        let sim = SimConfig::default();
        let model = ModelConfig {
            layers: 3,
            d_model: 16,
            heads: 2,
            t_max: crate::simworld::T_MAX,
            features: sim.feature_count,
            lineup_vocab: sim.lineup_roster,
            lineup_dim: 8,
            ffn_dim: 32,
            head_hidden: 16,
            variant: Variant::Mmrnet,
        };
        Self {
            sim,
            train_matches: 50_000,
            eval_seed: 4242,
            eval_matches: 50_000,
            label_track: Track::Ts2,
            model,
            hyper: Hyper { epochs: 8, ..Hyper::default() },
            ks: vec![12, 15, 18, 21],
            convergence: ConvergenceConfig::default(),
            nesting_samples: 200,
            roundtrip_records: 300,
            determinism_check: true,
        }
    }

    /// A seconds-long run that exercises every stage.
    pub fn smoke() -> Self {
        let pinned = Self::pinned();
        Self {
            sim: SimConfig { population_size: 200, ..pinned.sim },
            train_matches: 1500,
            eval_matches: 1500,
            model: ModelConfig { layers: 2, d_model: 8, lineup_dim: 4, ffn_dim: 8, head_hidden: 4, ..pinned.model },
            hyper: Hyper { epochs: 1, ..pinned.hyper },
            convergence: ConvergenceConfig { seeds: 2, population_size: 60, matches: 400, max_games: 60, ..pinned.convergence },
            nesting_samples: 20,
            roundtrip_records: 50,
            determinism_check: false,
            ..pinned
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.sim.validate()?;
        self.model.validate()?;
        if self.model.features != self.sim.feature_count || self.model.lineup_vocab < self.sim.lineup_roster {
            return Err(PipelineError::Check("model features and vocabulary must cover the simulated world".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(PipelineError::Check("ks must be a non-empty list of positive game counts".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

impl CriterionResult {
    fn new(id: u8, name: &str, passed: bool, detail: String, seconds: f64) -> Self {
        Self { id, name: name.into(), passed, detail, seconds }
    }

    /// `PASS  3 gradient suite: ... (1.2 s)`
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct ReproReport {
    pub criteria: Vec<CriterionResult>,
}

impl ReproReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        self.criteria.iter().map(|c| c.line() + "\n").collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColdStartRow {
    pub game_index: u32,
    pub samples: usize,
    pub mae_model: f64,
    pub mae_raw: f64,
}

/// Model and raw-rating MAE against the labels, per game index.
pub fn cold_start_rows(predictor: &Predictor, samples: &[TrainingSample], max_game: u32) -> Result<Vec<ColdStartRow>, PipelineError> {
    let mut by_game: BTreeMap<u32, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.game_index <= max_game) {
        let e = by_game.entry(s.game_index).or_default();
        e.0.push(predictor.predict(&s.snapshots)?);
        e.1.push(s.raw_mmr);
        e.2.push(s.label);
    }
    by_game
        .into_iter()
        .map(|(game_index, (pred, raw, label))| {
            Ok(ColdStartRow {
                game_index,
                samples: label.len(),
                mae_model: regression_errors(&pred, &label)?.mae.mean,
                mae_raw: regression_errors(&raw, &label)?.mae.mean,
            })
        })
        .collect()
}

fn pooled(rows: &[ColdStartRow]) -> (f64, f64) {
    let n: usize = rows.iter().map(|r| r.samples).sum();
    let w = |f: fn(&ColdStartRow) -> f64| rows.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / n.max(1) as f64;
    (w(|r| r.mae_model), w(|r| r.mae_raw))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRateRow {
    pub subset: String,
    pub score: String,
    pub matches: usize,
    pub decided: usize,
    pub ties: usize,
    pub win_rate_h: Option<f64>,
}

/// `win_rate_h` of every named scorer over the default avg-games strata,
/// the cold subset and all matches.
pub fn strata_rows(matches: &[MatchRecord], scorers: &[(&str, &dyn Scorer)]) -> Result<Vec<WinRateRow>, PipelineError> {
    let mut subsets: Vec<(String, Vec<&MatchRecord>)> = stratify_by_avg_games(matches, &DEFAULT_STRATA)
        .into_iter()
        .map(|s| {
            let name = match s.hi {
                Some(hi) => format!("avg_games[{},{})", s.lo, hi),
                None => format!("avg_games[{},inf)", s.lo),
            };
            (name, s.matches.iter().map(|&i| &matches[i]).collect())
        })
        .collect();
    subsets.push((format!("avg_games<{COLD_AVG_GAMES}"), cold_matches(matches)));
    subsets.push(("all".into(), matches.iter().collect()));
    let mut rows = Vec::new();
    for (subset, ms) in &subsets {
        for (score, scorer) in scorers {
            let w = win_rate_h(ms.iter().copied(), *scorer)?;
            rows.push(WinRateRow {
                subset: subset.clone(),
                score: (*score).into(),
                matches: ms.len(),
                decided: w.decided,
                ties: w.ties,
                win_rate_h: w.rate,
            });
        }
    }
    Ok(rows)
}

pub fn cold_matches(matches: &[MatchRecord]) -> Vec<&MatchRecord> {
    matches.iter().filter(|m| m.avg_games_at_match < COLD_AVG_GAMES).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    pub score: String,
    pub diff_lo: Option<f64>,
    pub diff_hi: Option<f64>,
    pub n_games: usize,
    pub n_wins_alpha: usize,
    pub n_wins_favorite: usize,
    pub alpha_win_rate: Option<f64>,
    pub favorite_win_rate: Option<f64>,
    pub n_players: usize,
    pub n_extreme_kd: usize,
    pub extreme_kd_ratio: Option<f64>,
}

impl BucketRow {
    pub fn of(score: &str, b: &EvalBucket) -> Self {
        Self {
            score: score.into(),
            diff_lo: b.diff_lo,
            diff_hi: b.diff_hi,
            n_games: b.n_games,
            n_wins_alpha: b.n_wins_alpha,
            n_wins_favorite: b.n_wins_favorite,
            alpha_win_rate: b.alpha_win_rate(),
            favorite_win_rate: b.favorite_win_rate(),
            n_players: b.n_players,
            n_extreme_kd: b.n_extreme_kd,
            extreme_kd_ratio: b.extreme_kd_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub score: String,
    pub matches: usize,
    pub win_rate_h: Option<f64>,
    pub decided: usize,
    pub ties: usize,
    pub unscored: usize,
    pub phi: f64,
    pub unfair_fraction: Option<f64>,
    pub unfair_win_rate: Option<f64>,
}

/// The metric battery for one scorer: `buckets.csv`, `kd_ratio.csv`,
/// `strata.csv` and `summary.json` in `dir`.
pub fn write_evaluation(dir: &Path, matches: &[MatchRecord], score: &str, scorer: &dyn Scorer, phi: f64) -> Result<EvalSummary, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let edges = default_edges();
    let buckets = bucket_by_diff(matches, scorer, &edges, DEFAULT_KD_THRESHOLD)?;
    write_csv(&dir.join("buckets.csv"), &buckets.iter().map(|b| BucketRow::of(score, b)).collect::<Vec<_>>())?;
    write_csv(&dir.join("kd_ratio.csv"), &extreme_kd_ratio(matches, scorer, DEFAULT_KD_THRESHOLD, &edges)?)?;
    write_csv(&dir.join("strata.csv"), &strata_rows(matches, &[(score, scorer)])?)?;
    let w = win_rate_h(matches, scorer)?;
    let summary = EvalSummary {
        score: score.into(),
        matches: matches.len(),
        win_rate_h: w.rate,
        decided: w.decided,
        ties: w.ties,
        unscored: w.unscored,
        phi,
        unfair_fraction: unfair_fraction(&buckets, phi),
        unfair_win_rate: unfair_win_rate(&buckets, phi),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Matches in which every participant reached `k` games.
pub fn matches_reaching<'a>(matches: &'a [MatchRecord], k: usize, rating: &RatingConfig<f64>) -> Vec<&'a MatchRecord> {
    let reach = FutureMmrScores::new(matches, Track::Ts, k, rating);
    matches.iter().filter(|m| m.players.iter().all(|p| reach.has(p.player_id))).collect()
}

/// `win_rate_h` of each track's MMR after game `k`, on the matches whose
/// players all reached the largest `k`.
pub fn ksweep_ground_truth(
    matches: &[MatchRecord],
    ks: &[usize],
    tracks: &[Track],
    rating: &RatingConfig<f64>,
) -> Result<(Vec<KSweepRow>, usize), PipelineError> {
    let Some(&k_max) = ks.iter().max() else { return Ok((Vec::new(), 0)) };
    let common = matches_reaching(matches, k_max, rating);
    let rows = k_sweep(ks, tracks, |k, track| {
        win_rate_h(common.iter().copied(), &FutureMmrScores::new(matches, track, k, rating))
    })?;
    Ok((rows, common.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub game_length: usize,
    pub slice: usize,
    pub samples: usize,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: Vec<HeatmapRow>,
    pub samples: usize,
    /// Samples whose mean late-slice weight exceeds their mean early-slice weight.
    pub late_dominant: usize,
}

impl Heatmap {
    pub fn late_share(&self) -> f64 {
        self.late_dominant as f64 / self.samples.max(1) as f64
    }
}

/// Omni-attention profile per game length and slice, averaged over samples.
pub fn attention_heatmap(predictor: &Predictor, samples: &[TrainingSample]) -> Result<Heatmap, PipelineError> {
    let mut acc: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    let (mut n, mut late_dominant) = (0, 0);
    for s in samples {
        let (_, profile) = predictor.predict_with_profile(&s.snapshots)?;
        let Some(p) = profile else {
            return Err(PipelineError::Check(format!("{} has no omni attention", predictor.checkpoint().config().variant)));
        };
        let t = p.len();
        let e = acc.entry(t).or_insert_with(|| (0, vec![0.0; t]));
        e.0 += 1;
        e.1.iter_mut().zip(&p).for_each(|(a, w)| *a += w);
        if t >= EARLY_SLICES + LATE_SLICES {
            n += 1;
            let early = p[..EARLY_SLICES].iter().sum::<f64>() / EARLY_SLICES as f64;
            let late = p[t - LATE_SLICES..].iter().sum::<f64>() / LATE_SLICES as f64;
            late_dominant += usize::from(late > early);
        }
    }
    let rows = acc
        .into_iter()
        .flat_map(|(t, (count, sum))| {
            sum.into_iter().enumerate().map(move |(slice, w)| HeatmapRow {
                game_length: t,
                slice,
                samples: count,
                mean_weight: w / count as f64,
            })
        })
        .collect();
    Ok(Heatmap { rows, samples: n, late_dominant })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub holdout_mae: f64,
    pub holdout_mse: f64,
    pub split_val_mae: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurveRow {
    variant: String,
    epoch: usize,
    train_mse: f64,
    val_mse: f64,
    val_mae: f64,
}

impl CurveRow {
    fn of(variant: Variant, c: &CurvePoint) -> Self {
        Self { variant: variant.name().into(), epoch: c.epoch, train_mse: c.train_mse, val_mse: c.val_mse, val_mae: c.val_mae }
    }
}

fn holdout_errors(predictor: &Predictor, samples: &[TrainingSample]) -> Result<(f64, f64), PipelineError> {
    let preds: Vec<f64> = samples.iter().map(|s| predictor.predict(&s.snapshots)).collect::<Result<_, _>>()?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let e = regression_errors(&preds, &labels)?;
    Ok((e.mae.mean, e.mse.mean))
}

/// `a <= b`, or within the tie tolerance of `b`.
fn at_most(a: f64, b: f64) -> (bool, bool) {
    (a <= b * (1.0 + ABLATION_TIE), a > b)
}

fn timed<T>(f: impl FnOnce() -> Result<T, PipelineError>) -> Result<(T, f64), PipelineError> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_secs_f64()))
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

struct Cohort {
    matches: Vec<MatchRecord>,
    samples: Vec<TrainingSample>,
}

fn cohort(cfg: &ReproConfig, sim: &SimConfig, n: usize) -> Result<Cohort, PipelineError> {
    let (matches, _) = run_cold_start_cohort(sim, n, MmrSource::Ts2, None)?;
    let samples = extract_training_samples(&matches, cfg.label_track, sim.label_k, sim.cold_start_c, &sim.rating).samples;
    Ok(Cohort { matches, samples })
}

/// Runs every criterion and writes its data to `out`.
///
/// `progress` receives one line per finished stage.
pub fn run_repro(cfg: &ReproConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<ReproReport, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("repro_config.json"), cfg)?;
    let rating = cfg.sim.rating;
    let mut results = Vec::new();
    let mut push = |r: CriterionResult, progress: &mut dyn FnMut(&str)| {
        progress(&r.line());
        results.push(r);
    };

    let (rows, secs) = timed(|| rating_oracle_rows(&rating))?;
    write_csv(&out.join("oracle.csv"), &rows)?;
    let worst = rows.iter().map(|r| r.max_abs_err).fold(0.0, f64::max);
    push(
        CriterionResult::new(
            1,
            "rating oracle",
            rows.len() == 6 && worst < 1e-2 && secs < 60.0,
            format!("max |update - oracle| = {worst:.2e} over {} grid points", rows.len()),
            secs,
        ),
        progress,
    );

    let (rows, secs) = timed(|| convergence_curve(&cfg.sim, &cfg.convergence))?;
    write_csv(&out.join("convergence.csv"), &rows)?;
    let at = |g: usize| rows.get(g - 1).map(|r| (r.median_err_ts, r.median_err_ts2));
    let th = cfg.convergence.threshold;
    let (c_ts, c_ts2) = (converged_at(&rows, th, Track::Ts), converged_at(&rows, th, Track::Ts2));
    let shrinks = match (at(1), at(10), at(50)) {
        (Some(a), Some(b), Some(c)) => c.0 < b.0 && b.0 < a.0 && c.1 < b.1 && b.1 < a.1,
        _ => false,
    };
    let faster = match (c_ts2, c_ts) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    };
    let show = |c: Option<usize>| c.map_or_else(|| format!(">{}", rows.len()), |g| g.to_string());
    push(
        CriterionResult::new(
            2,
            "rating convergence",
            shrinks && faster && secs < 120.0,
            format!(
                "median err ts@1/10/50 = {:.2}/{:.2}/{:.2}, ts2 = {:.2}/{:.2}/{:.2}; below {th}: ts2 at {} games, ts at {}",
                at(1).map_or(f64::NAN, |v| v.0),
                at(10).map_or(f64::NAN, |v| v.0),
                at(50).map_or(f64::NAN, |v| v.0),
                at(1).map_or(f64::NAN, |v| v.1),
                at(10).map_or(f64::NAN, |v| v.1),
                at(50).map_or(f64::NAN, |v| v.1),
                show(c_ts2),
                show(c_ts),
            ),
            secs,
        ),
        progress,
    );

    let (rows, secs) = timed(gradient_suite)?;
    write_csv(&out.join("gradients.csv"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    let worst_k = rows.iter().filter(|r| !r.check.starts_with("end_to_end")).map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_e = rows.iter().filter(|r| r.check.starts_with("end_to_end")).map(|r| r.max_rel_error).fold(0.0, f64::max);
    push(
        CriterionResult::new(
            3,
            "gradient suite",
            failed.is_empty() && secs < 120.0,
            format!("{} checks; worst rel err kernels {worst_k:.1e}, end-to-end {worst_e:.1e}; failed: {failed:?}", rows.len()),
            secs,
        ),
        progress,
    );

    let pipeline_start = Instant::now();
    let train_cohort = cohort(cfg, &cfg.sim, cfg.train_matches)?;
    let eval_sim = SimConfig { seed: cfg.eval_seed, ..cfg.sim.clone() };
    let eval = cohort(cfg, &eval_sim, cfg.eval_matches)?;
    progress(&format!(
        "cohorts: {} + {} matches, {} training and {} hold-out samples",
        train_cohort.matches.len(),
        eval.matches.len(),
        train_cohort.samples.len(),
        eval.samples.len()
    ));
    let mut trained: BTreeMap<&'static str, (TrainOutput, f64)> = BTreeMap::new();
    let mut mmrnet_secs = 0.0;
    for v in [Variant::Mmrnet].into_iter().chain(Variant::ALL.into_iter().filter(|&v| v != Variant::Mmrnet)) {
        let model = ModelConfig { variant: v, ..cfg.model.clone() };
        let (o, secs) = timed(|| Ok(train(&train_cohort.samples, model, &cfg.hyper, cfg.sim.label_k, cfg.label_track)?))?;
        if v == Variant::Mmrnet {
            mmrnet_secs = secs;
        }
        progress(&format!("trained {v} in {secs:.1} s (best epoch {})", o.checkpoint.meta.best_epoch));
        trained.insert(v.name(), (o, secs));
    }
    let mmrnet = Predictor::new(trained["mmrnet"].0.checkpoint.clone())?;
    crate::datasets::write_checkpoint(&out.join("mmrnet.ckpt"), mmrnet.checkpoint())?;

    let t0 = Instant::now();
    let xs = eval
        .samples
        .iter()
        .take(cfg.nesting_samples)
        .map(|s| mmrnet.checkpoint().model.prepare(&s.snapshots, mmrnet.checkpoint().norm.as_ref().expect("trained")))
        .collect::<Result<Vec<_>, _>>()?;
    let bad_trained = nesting_mismatches(&mmrnet.checkpoint().model, &xs)?;
    let bad_tiny = tiny_nesting_mismatches()?;
    push(
        CriterionResult::new(
            4,
            "variant nesting",
            bad_trained == 0 && bad_tiny == 0 && !xs.is_empty(),
            format!("bitwise mismatches: {bad_trained} of {} trained-model inputs, {bad_tiny} of 9 tiny-model inputs", xs.len()),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let t0 = Instant::now();
    let cs = cold_start_rows(&mmrnet, &eval.samples, 5)?;
    write_csv(&out.join("cold_start.csv"), &cs)?;
    let (mae_model, mae_raw) = pooled(&cs);
    let qs = QuickSkillScores::replay(&eval.matches, &mmrnet, cfg.sim.cold_start_c, rating)?;
    let ts2 = ScoreSource::Rating(Track::Ts2, rating);
    let ts = ScoreSource::Rating(Track::Ts, rating);
    let scorers: [(&str, &dyn Scorer); 4] =
        [("quickskill", &qs), ("ts2", &ts2), ("ts", &ts), ("latent", &ScoreSource::Latent)];
    write_csv(&out.join("strata.csv"), &strata_rows(&eval.matches, &scorers)?)?;
    let cold = cold_matches(&eval.matches);
    let wr_qs = win_rate_h(cold.iter().copied(), &qs)?.rate;
    let wr_ts2 = win_rate_h(cold.iter().copied(), &ts2)?.rate;
    let lead = wr_qs.zip(wr_ts2).map(|(a, b)| a - b);
    let mut bucket_rows = Vec::new();
    let mut unfair = Vec::new();
    for (name, s) in &scorers {
        let b = bucket_by_diff(cold.iter().copied(), *s, &default_edges(), DEFAULT_KD_THRESHOLD)?;
        bucket_rows.extend(b.iter().map(|x| BucketRow::of(name, x)));
        unfair.push((name.to_string(), unfair_fraction(&b, cfg.sim.phi_team), unfair_win_rate(&b, cfg.sim.phi_team)));
    }
    write_csv(&out.join("cold_buckets.csv"), &bucket_rows)?;
    let pipeline_secs = pipeline_start.elapsed().as_secs_f64() - trained.values().map(|t| t.1).sum::<f64>() + mmrnet_secs;
    push(
        CriterionResult::new(
            5,
            "cold-start headline",
            mae_model < mae_raw && lead.is_some_and(|l| l >= COLD_WIN_RATE_LEAD) && pipeline_secs < 600.0,
            format!(
                "(a) games 1-5 MAE model {mae_model:.3} vs raw ts2 {mae_raw:.3}; (b) win_rate_h on {} cold matches quickskill {} vs ts2 {} (lead {}); pipeline {pipeline_secs:.0} s",
                cold.len(),
                fmt_rate(wr_qs),
                fmt_rate(wr_ts2),
                lead.map_or_else(|| "n/a".into(), |l| format!("{:+.2} pts", 100.0 * l)),
            ),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let t0 = Instant::now();
    let mut ablation = Vec::new();
    let mut curves = Vec::new();
    for v in Variant::ALL {
        let (o, _) = &trained[v.name()];
        let p = Predictor::new(o.checkpoint.clone())?;
        let (mae, mse) = holdout_errors(&p, &eval.samples)?;
        let best = o.checkpoint.meta.best_epoch;
        let split_val_mae = o.curve.iter().find(|c| c.epoch == best).map_or(f64::NAN, |c| c.val_mae);
        ablation.push(AblationRow { variant: v.name().into(), holdout_mae: mae, holdout_mse: mse, split_val_mae, best_epoch: best });
        curves.extend(o.curve.iter().map(|c| CurveRow::of(v, c)));
    }
    write_csv(&out.join("ablation.csv"), &ablation)?;
    write_csv(&out.join("training_curves.csv"), &curves)?;
    let mae = |v: Variant| ablation.iter().find(|r| r.variant == v.name()).map_or(f64::NAN, |r| r.holdout_mae);
    let chain = [Variant::Mmrnet, Variant::Transformer, Variant::Gru, Variant::Mlp];
    let mut ok = mae(Variant::Mmrnet) < mae(Variant::MmrnetEnd);
    let mut ties = Vec::new();
    for w in chain.windows(2) {
        let (holds, tie) = at_most(mae(w[0]), mae(w[1]));
        ok &= holds;
        if holds && tie {
            ties.push(format!("{}~{}", w[0], w[1]));
        }
    }
    push(
        CriterionResult::new(
            6,
            "ablation ordering",
            ok,
            format!(
                "hold-out MAE {}; ties within 1%: {}",
                ablation.iter().map(|r| format!("{} {:.4}", r.variant, r.holdout_mae)).collect::<Vec<_>>().join(", "),
                if ties.is_empty() { "none".into() } else { ties.join(", ") }
            ),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let t0 = Instant::now();
    let (rows, common) = ksweep_ground_truth(&eval.matches, &cfg.ks, &[Track::Ts2, Track::Ts], &rating)?;
    write_csv(&out.join("ksweep.csv"), &rows)?;
    let rate = |k: usize| rows.iter().find(|r| r.k == k && r.track == cfg.label_track).and_then(|r| r.win_rate_h);
    let trend = match [12, 15, 18, 21].map(rate) {
        [Some(a), Some(b), Some(c), Some(d)] => Some((a <= b && b <= c, (c - d).abs() <= PLATEAU_TOL)),
        _ => None,
    };
    push(
        CriterionResult::new(
            7,
            "k-sweep trend",
            trend == Some((true, true)),
            format!(
                "{} win_rate_h on {common} matches: K=12 {}, 15 {}, 18 {}, 21 {}",
                cfg.label_track,
                fmt_rate(rate(12)),
                fmt_rate(rate(15)),
                fmt_rate(rate(18)),
                fmt_rate(rate(21))
            ),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let t0 = Instant::now();
    let buckets = bucket_by_diff(&eval.matches, &ScoreSource::Latent, &default_edges(), DEFAULT_KD_THRESHOLD)?;
    write_csv(&out.join("calibration.csv"), &buckets.iter().map(|b| BucketRow::of("latent", b)).collect::<Vec<_>>())?;
    let used: Vec<f64> = buckets
        .iter()
        .filter(|b| b.n_games >= MIN_CALIBRATION_GAMES)
        .filter_map(|b| b.alpha_win_rate())
        .collect();
    let increasing = used.len() >= 2 && used.windows(2).all(|w| w[0] < w[1]);
    push(
        CriterionResult::new(
            8,
            "calibration soundness",
            increasing,
            format!(
                "latent alpha win rate over {} buckets with >= {MIN_CALIBRATION_GAMES} games: {}",
                used.len(),
                used.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" < ")
            ),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let t0 = Instant::now();
    let heat = attention_heatmap(&mmrnet, &eval.samples)?;
    write_csv(&out.join("heatmap.csv"), &heat.rows)?;
    push(
        CriterionResult::new(
            9,
            "heatmap signal",
            heat.samples > 0 && heat.late_share() >= HEATMAP_SHARE,
            format!(
                "late slices outweigh early slices on {:.1}% of {} hold-out samples",
                100.0 * heat.late_share(),
                heat.samples
            ),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    let summary = serde_json::json!({
        "cold_start_mae": { "model": mae_model, "raw_ts2": mae_raw },
        "cold_win_rate_h": { "quickskill": wr_qs, "ts2": wr_ts2, "matches": cold.len() },
        "cold_unfair": unfair.iter().map(|(n, f, w)| serde_json::json!({ "score": n, "unfair_fraction": f, "unfair_win_rate": w })).collect::<Vec<_>>(),
        "ablation": ablation,
        "heatmap_late_share": heat.late_share(),
    });
    write_json(&out.join("summary.json"), &summary)?;

    let t0 = Instant::now();
    let mut notes = Vec::new();
    let rt = out.join("roundtrip");
    std::fs::create_dir_all(&rt)?;
    let head: Vec<MatchRecord> = eval.matches.iter().take(cfg.roundtrip_records).cloned().collect();
    write_matches(&rt, &head, &eval_sim)?;
    let matches_ok = read_matches(&rt)?.1 == head;
    let sample_head: Vec<TrainingSample> = eval.samples.iter().take(cfg.roundtrip_records).cloned().collect();
    write_samples(&rt.join("samples.jsonl"), &sample_head)?;
    let samples_ok = read_samples(&rt.join("samples.jsonl"))? == sample_head;
    let mut ckpt_ok = true;
    for (o, _) in trained.values() {
        let bytes = encode_checkpoint(&o.checkpoint)?;
        let back = decode_checkpoint(&bytes)?;
        ckpt_ok &= back == o.checkpoint && encode_checkpoint(&back)? == bytes;
    }
    notes.push(format!(
        "round trips: {} matches {}, {} samples {}, {} checkpoints {}",
        head.len(),
        ok_word(matches_ok),
        sample_head.len(),
        ok_word(samples_ok),
        trained.len(),
        ok_word(ckpt_ok)
    ));
    let mut deterministic = true;
    if cfg.determinism_check {
        let det = out.join("determinism");
        let (a, b) = (det.join("a"), det.join("b"));
        for d in [&a, &b] {
            if d.exists() {
                std::fs::remove_dir_all(d)?;
            }
            run_repro(&ReproConfig::smoke(), d, &mut |_| {})?;
        }
        let (same, files) = same_csvs(&a, &b)?;
        deterministic = same;
        notes.push(format!("smoke repro twice: {files} CSVs {}", if same { "byte-identical" } else { "DIFFER" }));
    }
    push(
        CriterionResult::new(
            10,
            "determinism and round trips",
            matches_ok && samples_ok && ckpt_ok && deterministic,
            notes.join("; "),
            t0.elapsed().as_secs_f64(),
        ),
        progress,
    );

    write_csv(&out.join("criteria.csv"), &results)?;
    Ok(ReproReport { criteria: results })
}

fn ok_word(b: bool) -> &'static str {
    if b {
        "exact"
    } else {
        "MISMATCH"
    }
}

/// Compares every CSV directly inside `a` with its namesake in `b`.
pub fn same_csvs(a: &Path, b: &Path) -> Result<(bool, usize), PipelineError> {
    let list = |d: &Path| -> Result<Vec<String>, PipelineError> {
        let mut v: Vec<String> = std::fs::read_dir(d)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        v.sort();
        Ok(v)
    };
    let (la, lb) = (list(a)?, list(b)?);
    if la != lb || la.is_empty() {
        return Ok((false, la.len()));
    }
    for name in &la {
        if std::fs::read(a.join(name))? != std::fs::read(b.join(name))? {
            return Ok((false, la.len()));
        }
    }
    Ok((true, la.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_policy() {
        assert_eq!(at_most(1.0, 1.0), (true, false));
        assert_eq!(at_most(1.005, 1.0), (true, true));
        assert_eq!(at_most(1.02, 1.0), (false, true));
    }

    #[test]
    fn configs_validate_and_round_trip() {
        for c in [ReproConfig::pinned(), ReproConfig::smoke()] {
            c.validate().unwrap();
            let back: ReproConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn smoke_repro_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ra = run_repro(&ReproConfig::smoke(), &a, &mut |l| eprintln!("{l}")).unwrap();
        run_repro(&ReproConfig::smoke(), &b, &mut |_| {}).unwrap();
        assert_eq!(ra.criteria.len(), 10);
        assert_eq!(same_csvs(&a, &b).unwrap(), (true, 12));
        for id in [1, 3, 4, 10] {
            assert!(ra.criteria[id - 1].passed, "{}", ra.criteria[id - 1].line());
        }
    }
}
