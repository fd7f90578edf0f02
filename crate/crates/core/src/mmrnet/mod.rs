//! Sequence regressor from one game's performance snapshots to a player's
//! future MMR, together with the recurrent, feed-forward and linear baselines.
//!
//! A sample is the `T x F` snapshot matrix of one game plus the line-up. The
//! full network embeds every slice, runs a pre-norm transformer stack, attends
//! once more over the hidden states of all inner layers at the same time (the
//! omnidirectional term), adds the reduced result to the last layer's output
//! and regresses a scalar from the mean-pooled sequence.

mod model;
mod predict;
mod train;

pub use model::{Model, ModelCache, Prepared};
pub use predict::Predictor;
pub use train::{train, CurvePoint, Hyper, Optimizer, TrainOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::KernelError;
use crate::simworld::{SnapshotSequence, Track};

#[derive(Debug, Error)]
pub enum MmrNetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("sample does not fit the model schema: {0}")]
    SchemaMismatch(String),
    #[error("character id {id} outside the line-up vocabulary of {vocab}")]
    UnknownCharacterId { id: u32, vocab: usize },
    #[error("checkpoint lacks feature normalization statistics")]
    NotNormalized,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Transformer stack plus omnidirectional attention.
    Mmrnet,
    /// The stack without the omnidirectional term.
    Transformer,
    Gru,
    Mlp,
    Lr,
    /// The full network fed only the final slice.
    MmrnetEnd,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Mmrnet, Variant::Transformer, Variant::Gru, Variant::Mlp, Variant::Lr, Variant::MmrnetEnd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mmrnet => "mmrnet",
            Variant::Transformer => "transformer",
            Variant::Gru => "gru",
            Variant::Mlp => "mlp",
            Variant::Lr => "lr",
            Variant::MmrnetEnd => "mmrnet-end",
        }
    }

    pub fn has_omni(self) -> bool {
        matches!(self, Variant::Mmrnet | Variant::MmrnetEnd)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub t_max: usize,
    pub features: usize,
    pub lineup_vocab: usize,
    /// Leading channels of each slice embedding given to the line-up.
    pub lineup_dim: usize,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 160,
            heads: 10,
            t_max: 12,
            features: 32,
            lineup_vocab: 50,
            lineup_dim: 32,
            ffn_dim: 640,
            head_hidden: 80,
            variant: Variant::Mmrnet,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), MmrNetError> {
        let bad = |m: String| Err(MmrNetError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.lineup_dim == 0 || self.lineup_dim >= self.d_model {
            return bad(format!("lineup_dim must lie in [1, {})", self.d_model));
        }
        if self.t_max == 0 || self.features == 0 || self.lineup_vocab == 0 || self.ffn_dim == 0 || self.head_hidden == 0 {
            return bad("t_max, features, lineup_vocab, ffn_dim and head_hidden must be >= 1".into());
        }
        let min_layers = if self.variant.has_omni() { 2 } else { 1 };
        if matches!(self.variant, Variant::Mmrnet | Variant::Transformer | Variant::MmrnetEnd) && self.layers < min_layers {
            return bad(format!("{} needs at least {min_layers} layers", self.variant));
        }
        Ok(())
    }

    /// Tokens seen by the omnidirectional attention for a full-length game.
    pub fn omni_tokens(&self) -> usize {
        self.layers.saturating_sub(1) * self.t_max
    }
}

/// One game's snapshots labelled with the player's future MMR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub player_id: u32,
    pub match_id: u64,
    /// 1-based index of this game in the player's history.
    pub game_index: u32,
    pub snapshots: SnapshotSequence,
    /// Label-track MMR after game K.
    pub label: f64,
    /// Label-track MMR right after this game.
    pub raw_mmr: f64,
}

/// Per-feature z-normalization plus label standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl Normalization {
    /// Statistics over every slice of every sample; zero spreads become 1.
    pub fn fit(samples: &[&TrainingSample]) -> Result<Self, MmrNetError> {
        let first = samples.first().ok_or(MmrNetError::EmptyDataset)?;
        let f = first.snapshots.feature_count();
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut rows = 0usize;
        for s in samples {
            for r in &s.snapshots.features {
                if r.len() != f {
                    return Err(MmrNetError::SchemaMismatch(format!("{} features, expected {f}", r.len())));
                }
                for (k, &v) in r.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                rows += 1;
            }
        }
        let n = rows as f64;
        let feature_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let feature_std = sq
            .iter()
            .zip(&feature_mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let m = samples.len() as f64;
        let label_mean = samples.iter().map(|s| s.label).sum::<f64>() / m;
        let label_sd = (samples.iter().map(|s| (s.label - label_mean).powi(2)).sum::<f64>() / m).sqrt();
        Ok(Self { feature_mean, feature_std, label_mean, label_std: if label_sd > 1e-12 { label_sd } else { 1.0 } })
    }

    pub fn validate(&self, features: usize) -> Result<(), MmrNetError> {
        if self.feature_mean.len() != features
            || self.feature_std.len() != features
            || self.feature_std.iter().any(|s| !(*s > 0.0))
            || !(self.label_std > 0.0)
        {
            return Err(MmrNetError::NotNormalized);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub label_k: usize,
    pub label_track: Track,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// A trained network with everything needed to serve predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub norm: Option<Normalization>,
    pub meta: TrainMeta,
    pub model: Model<f64>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}
