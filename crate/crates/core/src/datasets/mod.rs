//! On-disk formats: match streams, training samples, checkpoints and metric
//! reports.
//!
//! Match streams and samples are line-delimited JSON. Every line is one record
//! with keys in struct declaration order; floats use the shortest decimal form
//! that parses back to the identical bit pattern. A match directory holds
//! `matches.jsonl` plus `manifest.json`.

mod checkpoint;
mod report;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use report::{write_csv, write_json};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mmrnet::TrainingSample;
use crate::rating::{mmr_scalar, RatingConfig};
use crate::simworld::{MatchRecord, PlayerGame, SimConfig, Track};

pub const FORMAT_VERSION: u32 = 1;
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing key `{key}`")]
    MissingKey { line: usize, key: String },
    #[error("unsupported format version {0}")]
    UnknownVersion(u32),
    #[error("manifest declares {declared} records, stream holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Describes a stored match stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Hex SHA-256 of the JSON-serialized simulation config.
    pub sim_config_sha256: String,
    pub record_count: usize,
    pub feature_count: usize,
    /// RFC 3339 timestamp; the only field allowed to differ between reruns.
    pub created_at: String,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn for_records(cfg: &SimConfig, record_count: usize) -> Result<Self, DatasetError> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            sim_config_sha256: config_hash(cfg)?,
            record_count,
            feature_count: cfg.feature_count,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed: cfg.seed,
        })
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String, DatasetError> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

const MATCH_KEYS: &[&str] =
    &["match_id", "mmr_source", "team_alpha", "team_beta", "outcome", "avg_games_at_match", "game_length", "players"];
const PLAYER_KEYS: &[&str] = &[
    "player_id",
    "team",
    "character",
    "games_before",
    "latent_skill",
    "matchmaking_score",
    "kills",
    "deaths",
    "assists",
    "perf_z",
    "ts_before",
    "ts_after",
    "ts2_before",
    "ts2_after",
    "predicted_before",
    "predicted_from_match",
    "snapshots",
];
const SAMPLE_KEYS: &[&str] = &["player_id", "match_id", "game_index", "snapshots", "label", "raw_mmr"];

fn require(v: &serde_json::Value, keys: &[&str], line: usize) -> Result<(), DatasetError> {
    let obj = v.as_object().ok_or_else(|| DatasetError::Parse { line, msg: "expected a JSON object".into() })?;
    match keys.iter().find(|k| !obj.contains_key(**k)) {
        Some(k) => Err(DatasetError::MissingKey { line, key: (*k).to_string() }),
        None => Ok(()),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per non-empty line; `check` validates the raw object first.
fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    check: impl Fn(&serde_json::Value, usize) -> Result<(), DatasetError>,
) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: line_no, msg: e.to_string() })?;
        check(&value, line_no)?;
        out.push(serde_json::from_value(value).map_err(|e| DatasetError::Parse { line: line_no, msg: e.to_string() })?);
    }
    Ok(out)
}

/// Writes `records` and their manifest into `dir`, creating it if needed.
pub fn write_matches(dir: &Path, records: &[MatchRecord], cfg: &SimConfig) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(MATCHES_FILE), records)?;
    let manifest = DatasetManifest::for_records(cfg, records.len())?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_matches(dir: &Path) -> Result<(DatasetManifest, Vec<MatchRecord>), DatasetError> {
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::UnknownVersion(manifest.format_version));
    }
    let records: Vec<MatchRecord> = read_jsonl(&dir.join(MATCHES_FILE), |v, line| {
        require(v, MATCH_KEYS, line)?;
        for p in v["players"].as_array().into_iter().flatten() {
            require(p, PLAYER_KEYS, line)?;
        }
        Ok(())
    })?;
    if records.len() != manifest.record_count {
        return Err(DatasetError::CountMismatch { declared: manifest.record_count, found: records.len() });
    }
    Ok((manifest, records))
}

pub fn write_samples(path: &Path, samples: &[TrainingSample]) -> Result<(), DatasetError> {
    write_jsonl(path, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainingSample>, DatasetError> {
    read_jsonl(path, |v, line| require(v, SAMPLE_KEYS, line))
}

/// A player who never reached the label game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsufficientHistory {
    pub player_id: u32,
    pub games: u32,
    pub needed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    /// Ordered by player id, then game index.
    pub samples: Vec<TrainingSample>,
    pub insufficient: Vec<InsufficientHistory>,
}

/// Pairs every early game's snapshots with the player's MMR after game `k`.
///
/// Games `1..c` (those with index below `c`) that carry snapshots become
/// samples; the label is the `track` MMR scalar right after game `k` and
/// `raw_mmr` the same scalar right after the sample's own game.
pub fn extract_training_samples(
    matches: &[MatchRecord],
    track: Track,
    k: usize,
    c: usize,
    rating: &RatingConfig<f64>,
) -> Extraction {
    let mut history: BTreeMap<u32, Vec<(u64, &PlayerGame)>> = BTreeMap::new();
    for m in matches {
        for pg in &m.players {
            history.entry(pg.player_id).or_default().push((m.match_id, pg));
        }
    }
    let mut out = Extraction::default();
    for (player_id, games) in history {
        let label_game = games.iter().find(|(_, pg)| pg.games_before as usize + 1 == k);
        let Some((_, label_game)) = label_game else {
            let games_seen = games.iter().map(|(_, pg)| pg.games_before + 1).max().unwrap_or(0);
            out.insufficient.push(InsufficientHistory { player_id, games: games_seen, needed: k });
            continue;
        };
        let label = mmr_scalar(label_game.after(track), rating);
        for (match_id, pg) in &games {
            let game_index = pg.games_before + 1;
            if (game_index as usize) >= c {
                continue;
            }
            if let Some(seq) = &pg.snapshots {
                out.samples.push(TrainingSample {
                    player_id,
                    match_id: *match_id,
                    game_index,
                    snapshots: seq.clone(),
                    label,
                    raw_mmr: mmr_scalar(pg.after(track), rating),
                });
            }
        }
    }
    out.samples.sort_by_key(|s| (s.player_id, s.game_index));
    out
}
