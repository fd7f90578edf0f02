use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, MmrNetError, Model, ModelConfig, Normalization, Prepared, TrainMeta, TrainingSample};
use crate::kernels::Tensor;
use crate::simworld::Track;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum SGD.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Peak learning rate; decays to zero on a cosine schedule.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of players (not samples) held out for model selection.
    pub val_fraction: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 32,
            epochs: 10,
            seed: 7,
            val_fraction: 0.15,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Held-out player ids.
    pub val_players: Vec<u32>,
}

struct OptState {
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
    step: usize,
}

/// Deterministic player-level split: returns the held-out player ids.
pub(crate) fn split_players(samples: &[TrainingSample], fraction: f64, seed: u64) -> Vec<u32> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.player_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if fraction <= 0.0 || ids.len() < 2 {
        return Vec::new();
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5e11_7a11));
    let n = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut val = ids[..n].to_vec();
    val.sort_unstable();
    val
}

/// Mean squared and absolute error in label units.
pub(crate) fn errors(model: &Model<f64>, norm: &Normalization, xs: &[(Prepared<f64>, f64)]) -> Result<(f64, f64), MmrNetError> {
    let (mut se, mut ae) = (0.0, 0.0);
    for (x, label) in xs {
        let pred = model.forward(x)?.0 * norm.label_std + norm.label_mean;
        se += (pred - label).powi(2);
        ae += (pred - label).abs();
    }
    let n = xs.len().max(1) as f64;
    Ok((se / n, ae / n))
}

/// Fits a model to minimise the mean squared error on normalized labels.
///
/// Returns the parameters of the epoch with the lowest validation MSE (the
/// training MSE when no players are held out).
pub fn train(
    dataset: &[TrainingSample],
    config: ModelConfig,
    hyper: &Hyper,
    label_k: usize,
    label_track: Track,
) -> Result<TrainOutput, MmrNetError> {
    if dataset.is_empty() {
        return Err(MmrNetError::EmptyDataset);
    }
    if dataset.iter().any(|s| !s.label.is_finite()) {
        return Err(MmrNetError::SchemaMismatch("non-finite label".into()));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(MmrNetError::InvalidConfig("batch and lr must be positive".into()));
    }
    let val_players = split_players(dataset, hyper.val_fraction, hyper.seed);
    let (val, tr): (Vec<&TrainingSample>, Vec<&TrainingSample>) =
        dataset.iter().partition(|s| val_players.binary_search(&s.player_id).is_ok());
    let norm = Normalization::fit(&tr)?;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = Model::<f64>::new(config, &mut rng)?;
    let prep = |set: &[&TrainingSample]| -> Result<Vec<(Prepared<f64>, f64)>, MmrNetError> {
        set.iter().map(|s| Ok((model.prepare(&s.snapshots, &norm)?, s.label))).collect()
    };
    let train_set = prep(&tr)?;
    let val_set = prep(&val)?;
    let select_set = if val_set.is_empty() { &train_set } else { &val_set };

    let shapes: Vec<Vec<usize>> = model.named_values().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
    let mut state = OptState { m: zeros(), v: zeros(), step: 0 };
    let batches_per_epoch = train_set.len().div_ceil(hyper.batch);
    let total_steps = (batches_per_epoch * hyper.epochs).max(1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    let (val_mse0, _) = errors(&model, &norm, select_set)?;
    let mut best = (val_mse0, 0usize, model.clone());
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for batch in order.chunks(hyper.batch) {
            model.zero_grad();
            let scale = 2.0 / batch.len() as f64;
            for &i in batch {
                let (x, label) = &train_set[i];
                let target = (label - norm.label_mean) / norm.label_std;
                let (y, cache) = model.forward(x)?;
                let diff = y - target;
                sq_sum += diff * diff;
                model.backward(x, &cache, scale * diff)?;
            }
            if !sq_sum.is_finite() {
                return Err(MmrNetError::DivergedLoss { epoch });
            }
            let lr = hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * state.step as f64 / total_steps as f64).cos());
            step(&mut model, &mut state, hyper, lr);
        }
        let train_mse = sq_sum / train_set.len() as f64 * norm.label_std.powi(2);
        let (val_mse, val_mae) = errors(&model, &norm, select_set)?;
        if !val_mse.is_finite() {
            return Err(MmrNetError::DivergedLoss { epoch });
        }
        curve.push(CurvePoint { epoch, train_mse, val_mse, val_mae });
        if val_mse < best.0 {
            best = (val_mse, epoch, model.clone());
        }
    }

    let (best_val_mse, best_epoch, mut model) = best;
    model.zero_grad();
    let meta = TrainMeta { label_k, label_track, seed: hyper.seed, epochs: hyper.epochs, best_epoch, best_val_mse };
    Ok(TrainOutput { checkpoint: Checkpoint { norm: Some(norm), meta, model }, curve, val_players })
}

fn step(model: &mut Model<f64>, st: &mut OptState, hyper: &Hyper, lr: f64) {
    st.step += 1;
    let mut params = model.named_params_mut();
    if hyper.clip_norm > 0.0 {
        let norm = params.iter().map(|(_, p)| p.grad.sum_squares()).sum::<f64>().sqrt();
        if norm > hyper.clip_norm {
            let k = hyper.clip_norm / norm;
            params.iter_mut().for_each(|(_, p)| p.grad.scale(k));
        }
    }
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let t = st.step as i32;
    let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
    for (((_, p), m), v) in params.iter_mut().zip(&mut st.m).zip(&mut st.v) {
        let g = p.grad.data();
        let w = p.value.data_mut();
        match hyper.optimizer {
            Optimizer::Sgd => {
                for ((wi, mi), &gi) in w.iter_mut().zip(m.data_mut()).zip(g) {
                    *mi = hyper.momentum * *mi + gi;
                    *wi -= lr * *mi;
                }
            }
            Optimizer::Adam => {
                for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
    }
}
