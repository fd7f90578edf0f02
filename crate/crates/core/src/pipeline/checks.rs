use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::PipelineError;
use crate::kernels::{
    dense_fwd, embed_bwd, embed_fwd, gelu_bwd, gelu_fwd, grad_check, mean_pool_bwd, mean_pool_fwd, softmax_bwd,
    softmax_fwd, Dense, GradCheckReport, LayerNorm, MultiHeadAttention, Param, Tensor,
};
use crate::mmrnet::{Model, ModelConfig, Prepared, Variant};
use crate::oracle::{one_on_one_posterior, oracle_grid};
use crate::rating::{update_two_team, Rating, RatingConfig, Team, TeamOutcome};
use crate::simworld::{run_cold_start_cohort, MmrSource, SimConfig, Track};

pub const KERNEL_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub mu: f64,
    pub sigma: f64,
    pub winner_mu: f64,
    pub winner_sigma: f64,
    pub oracle_winner_mu: f64,
    pub oracle_winner_sigma: f64,
    pub loser_mu: f64,
    pub loser_sigma: f64,
    pub oracle_loser_mu: f64,
    pub oracle_loser_sigma: f64,
    pub max_abs_err: f64,
}

/// 1v1 updates of every grid rating beating a prior opponent, side by side
/// with the quadrature posterior.
pub fn rating_oracle_rows(cfg: &RatingConfig<f64>) -> Result<Vec<OracleRow>, PipelineError> {
    let opp = Rating::prior(cfg);
    oracle_grid()
        .into_iter()
        .map(|r| {
            let (ow, ol) = one_on_one_posterior(r, opp, cfg);
            let (a, b) = update_two_team(&[r], &[opp], TeamOutcome::win(Team::Alpha), cfg)?;
            let (w, l) = (a[0], b[0]);
            let max_abs_err = [w.mu - ow.mu, w.sigma - ow.sigma, l.mu - ol.mu, l.sigma - ol.sigma]
                .iter()
                .fold(0.0f64, |m, d| m.max(d.abs()));
            Ok(OracleRow {
                mu: r.mu,
                sigma: r.sigma,
                winner_mu: w.mu,
                winner_sigma: w.sigma,
                oracle_winner_mu: ow.mu,
                oracle_winner_sigma: ow.sigma,
                loser_mu: l.mu,
                loser_sigma: l.sigma,
                oracle_loser_mu: ol.mu,
                oracle_loser_sigma: ol.sigma,
                max_abs_err,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub population_size: usize,
    pub matches: usize,
    /// Longest per-player history tracked.
    pub max_games: usize,
    /// `|mu - latent|` below which a track counts as converged.
    pub threshold: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { seeds: 100, first_seed: 1000, population_size: 200, matches: 2400, max_games: 100, threshold: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub games: usize,
    pub players: usize,
    pub median_err_ts: f64,
    pub median_err_ts2: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median `|mu - latent|` after each player's n-th game, pooled over seeds.
/// Every cohort is matchmade on the TS2 track, so both tracks see the same games.
pub fn convergence_curve(base: &SimConfig, cc: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>, PipelineError> {
    let mut errs: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; cc.max_games];
    for s in 0..cc.seeds {
        let cfg = SimConfig {
            population_size: cc.population_size,
            queue_size: base.queue_size.min(cc.population_size),
            seed: cc.first_seed + s,
            snapshot_window: 0,
            ..base.clone()
        };
        let (records, _) = run_cold_start_cohort(&cfg, cc.matches, MmrSource::Ts2, None)?;
        for p in records.iter().flat_map(|m| &m.players) {
            let n = p.games_before as usize;
            if n < cc.max_games {
                errs[n][0].push((p.after(Track::Ts).mu - p.latent_skill).abs());
                errs[n][1].push((p.after(Track::Ts2).mu - p.latent_skill).abs());
            }
        }
    }
    Ok(errs
        .into_iter()
        .enumerate()
        .map(|(i, [mut ts, mut ts2])| ConvergenceRow {
            games: i + 1,
            players: ts.len(),
            median_err_ts: median(&mut ts),
            median_err_ts2: median(&mut ts2),
        })
        .collect())
}

/// First game count whose median error is below `threshold`.
pub fn converged_at(rows: &[ConvergenceRow], threshold: f64, track: Track) -> Option<usize> {
    rows.iter()
        .find(|r| match track {
            Track::Ts => r.median_err_ts < threshold,
            Track::Ts2 => r.median_err_ts2 < threshold,
        })
        .map(|r| r.games)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub check: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradRow {
    fn of(check: &str, r: GradCheckReport) -> Self {
        Self { check: check.into(), max_rel_error: r.max_rel_error, checked: r.checked, tol: r.tol, passed: r.passed }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_dense(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = Tensor::randn(&[3, 4], 1.0, rng);
    let mut layer = Dense::<f64>::new(4, 5, 1.0, rng);
    layer.b.value = Tensor::randn(&[5], 0.5, rng);
    let proj = Tensor::randn(&[3, 5], 1.0, rng);
    let dx = layer.backward(&x, &proj).expect("shapes agree");
    let analytic = vec![dx, layer.w.grad.clone(), layer.b.grad.clone()];
    let mut inputs = vec![x, layer.w.value.clone(), layer.b.value.clone()];
    grad_check(&mut inputs, &analytic, |t| dot(&dense_fwd(&t[0], &t[1], &t[2]).expect("shapes"), &proj), 1e-4, KERNEL_TOL)
}

fn check_embedding(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut table = Param::new(Tensor::randn(&[6, 3], 1.0, rng));
    let ids = [4, 1, 4];
    let proj = Tensor::randn(&[3, 3], 1.0, rng);
    embed_bwd(&mut table, &ids, &proj).expect("ids in range");
    let analytic = vec![table.grad.clone()];
    let mut inputs = vec![table.value.clone()];
    grad_check(&mut inputs, &analytic, |t| dot(&embed_fwd(&t[0], &ids).expect("ids"), &proj), 1e-4, KERNEL_TOL)
}

fn check_layernorm(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = Tensor::randn(&[3, 6], 1.0, rng);
    let mut ln = LayerNorm::<f64>::new(6);
    ln.gamma.value = Tensor::randn(&[6], 1.0, rng);
    ln.beta.value = Tensor::randn(&[6], 1.0, rng);
    let proj = Tensor::randn(&[3, 6], 1.0, rng);
    let (_, cache) = ln.forward(&x).expect("width");
    let dx = ln.backward(&cache, &proj).expect("width");
    let analytic = vec![dx, ln.gamma.grad.clone(), ln.beta.grad.clone()];
    let mut inputs = vec![x, ln.gamma.value.clone(), ln.beta.value.clone()];
    grad_check(
        &mut inputs,
        &analytic,
        |t| {
            let mut l = LayerNorm::new(6);
            l.gamma.value = t[1].clone();
            l.beta.value = t[2].clone();
            dot(&l.forward(&t[0]).expect("width").0, &proj)
        },
        1e-4,
        KERNEL_TOL,
    )
}

fn check_softmax(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = Tensor::randn(&[3, 4], 1.0, rng);
    let proj = Tensor::randn(&[3, 4], 1.0, rng);
    let mask = [true, true, false, true];
    let y = softmax_fwd(&x, Some(&mask)).expect("mask width");
    let analytic = vec![softmax_bwd(&y, &proj).expect("shapes")];
    let mut inputs = vec![x];
    grad_check(&mut inputs, &analytic, |t| dot(&softmax_fwd(&t[0], Some(&mask)).expect("mask"), &proj), 1e-4, KERNEL_TOL)
}

fn check_gelu(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = Tensor::randn(&[2, 5], 1.5, rng);
    let proj = Tensor::randn(&[2, 5], 1.0, rng);
    let analytic = vec![gelu_bwd(&x, &proj).expect("shapes")];
    let mut inputs = vec![x];
    grad_check(&mut inputs, &analytic, |t| dot(&gelu_fwd(&t[0]), &proj), 1e-4, KERNEL_TOL)
}

fn check_mean_pool(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let x = Tensor::randn(&[4, 3], 1.0, rng);
    let proj = Tensor::randn(&[1, 3], 1.0, rng);
    let analytic = vec![mean_pool_bwd(4, 3, &proj).expect("shapes")];
    let mut inputs = vec![x];
    grad_check(&mut inputs, &analytic, |t| dot(&mean_pool_fwd(&t[0], 3).expect("rows"), &proj), 1e-4, KERNEL_TOL)
}

fn check_attention(rng: &mut ChaCha8Rng, mask: Option<&[bool]>) -> GradCheckReport {
    let mut mha = MultiHeadAttention::<f64>::new(8, 2, rng).expect("divisible");
    mha.qkv.b.value = Tensor::randn(&[24], 0.3, rng);
    mha.out.b.value = Tensor::randn(&[8], 0.3, rng);
    let x = Tensor::randn(&[5, 8], 1.0, rng);
    let proj = Tensor::randn(&[5, 8], 1.0, rng);
    let (_, cache) = mha.forward(&x, mask).expect("shapes");
    let dx = mha.backward(&cache, &proj).expect("shapes");
    let params = |m: &MultiHeadAttention<f64>| [&m.qkv.w, &m.qkv.b, &m.out.w, &m.out.b].map(|p| (p.value.clone(), p.grad.clone()));
    let (values, grads): (Vec<_>, Vec<_>) = params(&mha).into_iter().unzip();
    let mut analytic = vec![dx];
    analytic.extend(grads);
    let mut inputs = vec![x];
    inputs.extend(values);
    grad_check(
        &mut inputs,
        &analytic,
        |t| {
            let probe = MultiHeadAttention {
                heads: 2,
                qkv: Dense { w: Param::new(t[1].clone()), b: Param::new(t[2].clone()) },
                out: Dense { w: Param::new(t[3].clone()), b: Param::new(t[4].clone()) },
            };
            dot(&probe.forward(&t[0], mask).expect("shapes").0, &proj)
        },
        1e-4,
        KERNEL_TOL,
    )
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        t_max: 3,
        features: 4,
        lineup_vocab: 6,
        lineup_dim: 3,
        ffn_dim: 12,
        head_hidden: 5,
        variant,
    }
}

fn tiny_sample(t: usize, rng: &mut ChaCha8Rng) -> Prepared<f64> {
    Prepared { feats: Tensor::randn(&[t, 4], 1.0, rng), own: vec![0, 2, 5], opp: vec![1, 3, 4] }
}

/// Whole-network check of a tiny model with jittered parameters on the loss
/// `(y - 0.3)^2`.
pub fn end_to_end_check(variant: Variant) -> Result<GradCheckReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = Model::<f64>::new(tiny_config(variant), &mut rng)?;
    for (_, p) in m.named_params_mut() {
        let noise = Tensor::randn(p.shape(), 0.1, &mut rng);
        p.value.add_assign(&noise)?;
    }
    let x = tiny_sample(3, &mut rng);
    m.zero_grad();
    let (y, cache) = m.forward(&x)?;
    m.backward(&x, &cache, 2.0 * (y - 0.3))?;
    let analytic: Vec<Tensor<f64>> = m.named_params_mut().into_iter().map(|(_, p)| p.grad.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = m.named_values().into_iter().map(|(_, v)| v).collect();
    let template = m.clone();
    Ok(grad_check(
        &mut inputs,
        &analytic,
        |vals| {
            let mut probe = template.clone();
            for ((_, p), v) in probe.named_params_mut().into_iter().zip(vals) {
                p.value = v.clone();
            }
            let (y, _) = probe.forward(&x).expect("fixed shapes");
            (y - 0.3) * (y - 0.3)
        },
        1e-5,
        END_TO_END_TOL,
    ))
}

/// Every kernel, then every network end to end.
pub fn gradient_suite() -> Result<Vec<GradRow>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows = vec![
        GradRow::of("dense", check_dense(&mut rng)),
        GradRow::of("embedding", check_embedding(&mut rng)),
        GradRow::of("layernorm", check_layernorm(&mut rng)),
        GradRow::of("softmax", check_softmax(&mut rng)),
        GradRow::of("gelu", check_gelu(&mut rng)),
        GradRow::of("mean_pool", check_mean_pool(&mut rng)),
        GradRow::of("attention", check_attention(&mut rng, None)),
        GradRow::of("attention_masked", check_attention(&mut rng, Some(&[true, false, true, true, false]))),
    ];
    for v in Variant::ALL {
        rows.push(GradRow::of(&format!("end_to_end_{v}"), end_to_end_check(v)?));
    }
    Ok(rows)
}

/// Zeroes the omni reducer and compares against the plain stack bit for bit
/// on `inputs`; returns the number of mismatching outputs.
pub fn nesting_mismatches(model: &Model<f64>, inputs: &[Prepared<f64>]) -> Result<usize, PipelineError> {
    let mut zeroed = model.clone();
    let Some(reducer) = zeroed.omni_reducer_mut() else {
        return Err(PipelineError::Check(format!("{} has no omni reducer", model.config.variant)));
    };
    reducer.value.fill(0.0);
    let plain = zeroed.without_omni();
    let mut bad = 0;
    for x in inputs {
        let (a, _) = zeroed.forward(x)?;
        let (b, _) = plain.forward(x)?;
        bad += usize::from(a.to_bits() != b.to_bits() || plain.config.variant != Variant::Transformer);
    }
    Ok(bad)
}

/// Tiny random networks of several depths and lengths.
pub fn tiny_nesting_mismatches() -> Result<usize, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for layers in 2..=4 {
        let m = Model::<f64>::new(ModelConfig { layers, ..tiny_config(Variant::Mmrnet) }, &mut rng)?;
        let xs: Vec<_> = (1..=3).map(|t| tiny_sample(t, &mut rng)).collect();
        bad += nesting_mismatches(&m, &xs)?;
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_rows_agree() {
        let rows = rating_oracle_rows(&RatingConfig::default()).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.max_abs_err < 1e-2));
    }

    #[test]
    fn gradient_suite_passes() {
        let rows = gradient_suite().unwrap();
        assert_eq!(rows.len(), 8 + Variant::ALL.len());
        for r in rows {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn nesting_holds_on_tiny_models() {
        assert_eq!(tiny_nesting_mismatches().unwrap(), 0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn convergence_curve_shrinks() {
        let cc = ConvergenceConfig { seeds: 2, population_size: 60, matches: 300, max_games: 30, ..Default::default() };
        let rows = convergence_curve(&SimConfig::default(), &cc).unwrap();
        assert_eq!(rows.len(), 30);
        assert!(rows[0].players > 0);
        assert!(rows[24].median_err_ts2 < rows[0].median_err_ts2);
    }
}
