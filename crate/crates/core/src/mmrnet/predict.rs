use super::{Checkpoint, MmrNetError, Normalization};
use crate::simworld::SnapshotSequence;

/// Serving wrapper around a checkpoint.
#[derive(Debug, Clone)]
pub struct Predictor {
    ckpt: Checkpoint,
}

impl Predictor {
    pub fn new(ckpt: Checkpoint) -> Result<Self, MmrNetError> {
        match &ckpt.norm {
            Some(n) => n.validate(ckpt.model.config.features)?,
            None => return Err(MmrNetError::NotNormalized),
        }
        Ok(Self { ckpt })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    fn norm(&self) -> &Normalization {
        self.ckpt.norm.as_ref().expect("checked in new")
    }

    /// Predicted future MMR in label units.
    pub fn predict(&self, seq: &SnapshotSequence) -> Result<f64, MmrNetError> {
        self.predict_with_profile(seq).map(|(y, _)| y)
    }

    /// Prediction plus the per-slice omnidirectional attention profile.
    pub fn predict_with_profile(&self, seq: &SnapshotSequence) -> Result<(f64, Option<Vec<f64>>), MmrNetError> {
        let norm = self.norm();
        let x = self.ckpt.model.prepare(seq, norm)?;
        let (y, cache) = self.ckpt.model.forward(&x)?;
        Ok((y * norm.label_std + norm.label_mean, cache.attention_profile()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmrnet::{Model, ModelConfig, TrainMeta, Variant};
    use crate::simworld::Track;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt(norm: Option<Normalization>) -> Checkpoint {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            t_max: 4,
            features: 3,
            lineup_vocab: 5,
            lineup_dim: 2,
            ffn_dim: 8,
            head_hidden: 4,
            variant: Variant::Mmrnet,
        };
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let meta = TrainMeta { label_k: 18, label_track: Track::Ts2, seed: 1, epochs: 0, best_epoch: 0, best_val_mse: 0.0 };
        Checkpoint { norm, meta, model }
    }

    fn seq(scale: f64) -> SnapshotSequence {
        SnapshotSequence {
            length: 2,
            features: vec![vec![0.3 * scale, -1.1 * scale, 2.0 * scale], vec![0.7 * scale, 0.1 * scale, 2.5 * scale]],
            lineup_ids: vec![vec![0, 1], vec![3, 4]],
        }
    }

    #[test]
    fn missing_normalization_is_rejected() {
        assert!(matches!(Predictor::new(ckpt(None)), Err(MmrNetError::NotNormalized)));
    }

    #[test]
    fn normalization_invariance() {
        let norm = Normalization {
            feature_mean: vec![0.2, -0.4, 1.9],
            feature_std: vec![0.5, 1.5, 0.25],
            label_mean: 24.0,
            label_std: 6.0,
        };
        let doubled = Normalization {
            feature_mean: norm.feature_mean.iter().map(|m| 2.0 * m).collect(),
            feature_std: norm.feature_std.iter().map(|s| 2.0 * s).collect(),
            ..norm.clone()
        };
        let a = Predictor::new(ckpt(Some(norm))).unwrap().predict(&seq(1.0)).unwrap();
        let b = Predictor::new(ckpt(Some(doubled))).unwrap().predict(&seq(2.0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn oversized_inputs_are_schema_errors() {
        let norm = Normalization { feature_mean: vec![0.0; 3], feature_std: vec![1.0; 3], label_mean: 0.0, label_std: 1.0 };
        let p = Predictor::new(ckpt(Some(norm))).unwrap();
        let long = SnapshotSequence { length: 5, features: vec![vec![0.0; 3]; 5], lineup_ids: vec![vec![0], vec![1]] };
        assert!(matches!(p.predict(&long), Err(MmrNetError::SchemaMismatch(_))));
        let (y, profile) = p.predict_with_profile(&seq(1.0)).unwrap();
        assert!(y.is_finite());
        assert_eq!(profile.unwrap().len(), 2);
    }
}
