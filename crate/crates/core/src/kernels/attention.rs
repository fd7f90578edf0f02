use rand::Rng;

use super::ops::{softmax_bwd, softmax_fwd, Dense};
use super::{mismatch, KernelError, Tensor};
use crate::scalar::Scalar;

/// Bidirectional multi-head self-attention with fused query/key/value
/// projection. No causal mask; an optional key mask removes padded tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<S> {
    pub heads: usize,
    /// `d -> 3d`, columns laid out as `[q | k | v]`.
    pub qkv: Dense<S>,
    /// `d -> d`.
    pub out: Dense<S>,
}

#[derive(Debug, Clone)]
pub struct MhaCache<S> {
    x: Tensor<S>,
    qkv: Tensor<S>,
    /// One `[T x T]` weight matrix per head.
    weights: Vec<Tensor<S>>,
    ctx: Tensor<S>,
}

impl<S: Scalar> MhaCache<S> {
    pub fn weights(&self) -> &[Tensor<S>] {
        &self.weights
    }
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self, KernelError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return mismatch(format!("model dim {dim} not divisible by {heads} heads"));
        }
        Ok(Self { heads, qkv: Dense::new(dim, 3 * dim, 1.0, rng), out: Dense::new(dim, dim, 1.0, rng) })
    }

    pub fn dim(&self) -> usize {
        self.out.fan_out()
    }

    pub fn forward(&self, x: &Tensor<S>, key_mask: Option<&[bool]>) -> Result<(Tensor<S>, MhaCache<S>), KernelError> {
        let d = self.dim();
        if x.cols() != d {
            return mismatch(format!("attention of width {d} on {:?}", x.shape()));
        }
        let t = x.rows();
        let dh = d / self.heads;
        let scale = S::one() / S::of_usize(dh).sqrt();
        let qkv = self.qkv.forward(x)?;
        let mut ctx = Tensor::zeros(&[t, d]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut scores = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let q = &qkv.row(i)[qo..qo + dh];
                for j in 0..t {
                    let k = &qkv.row(j)[ko..ko + dh];
                    scores.row_mut(i)[j] = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale;
                }
            }
            let a = softmax_fwd(&scores, key_mask)?;
            for i in 0..t {
                for j in 0..t {
                    let w = a.row(i)[j];
                    if w == S::zero() {
                        continue;
                    }
                    let v = &qkv.row(j)[vo..vo + dh];
                    for (c, &vv) in ctx.row_mut(i)[qo..qo + dh].iter_mut().zip(v) {
                        *c += w * vv;
                    }
                }
            }
            weights.push(a);
        }
        let y = self.out.forward(&ctx)?;
        Ok((y, MhaCache { x: x.clone(), qkv, weights, ctx }))
    }

    pub fn backward(&mut self, cache: &MhaCache<S>, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
        let d = self.dim();
        let t = cache.x.rows();
        let dh = d / self.heads;
        let scale = S::one() / S::of_usize(dh).sqrt();
        let dctx = self.out.backward(&cache.ctx, dy)?;
        let qkv = &cache.qkv;
        let mut dqkv = Tensor::zeros(&[t, 3 * d]);
        for (h, a) in cache.weights.iter().enumerate() {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut da = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let dc = &dctx.row(i)[qo..qo + dh];
                for j in 0..t {
                    let v = &qkv.row(j)[vo..vo + dh];
                    da.row_mut(i)[j] = dc.iter().zip(v).map(|(&p, &q)| p * q).sum();
                    let w = a.row(i)[j];
                    if w != S::zero() {
                        for (g, &c) in dqkv.row_mut(j)[vo..vo + dh].iter_mut().zip(dc) {
                            *g += w * c;
                        }
                    }
                }
            }
            let ds = softmax_bwd(a, &da)?;
            for i in 0..t {
                for j in 0..t {
                    let s = ds.row(i)[j] * scale;
                    if s == S::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kj = qkv.row(j)[ko + c];
                        let qi = qkv.row(i)[qo + c];
                        dqkv.row_mut(i)[qo + c] += s * kj;
                        dqkv.row_mut(j)[ko + c] += s * qi;
                    }
                }
            }
        }
        self.qkv.backward(&cache.x, &dqkv)
    }

    pub fn zero_grad(&mut self) {
        for p in [&mut self.qkv.w, &mut self.qkv.b, &mut self.out.w, &mut self.out.b] {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{grad_check, Param};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(MultiHeadAttention::<f64>::new(10, 3, &mut rng()).is_err());
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut r);
        let (y, cache) = mha.forward(&x, None).unwrap();
        for w in cache.weights() {
            assert_eq!(w.data(), &[1.0]);
        }
        let qkv = mha.qkv.forward(&x).unwrap();
        let v = Tensor::new(vec![1, 8], qkv.row(0)[16..24].to_vec()).unwrap();
        let expected = mha.out.forward(&v).unwrap();
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let (y, _) = mha.forward(&x, None).unwrap();
        let (yp, _) = mha.forward(&xp, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_distributions_and_mask_is_exact() {
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::new(8, 4, &mut r).unwrap();
        let x = Tensor::randn(&[5, 8], 2.0, &mut r);
        let mask = [true, true, true, false, false];
        let (y, cache) = mha.forward(&x, Some(&mask)).unwrap();
        for w in cache.weights() {
            for i in 0..5 {
                assert!(w.row(i).iter().all(|&v| v >= 0.0));
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(w.row(i)[3], 0.0);
                assert_eq!(w.row(i)[4], 0.0);
            }
        }
        // padded tokens cannot influence the valid ones
        let mut x2 = x.clone();
        x2.row_mut(4).iter_mut().for_each(|v| *v += 10.0);
        let (y2, _) = mha.forward(&x2, Some(&mask)).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), y2.row(i));
        }
    }

    fn params(m: &MultiHeadAttention<f64>) -> Vec<Tensor<f64>> {
        vec![m.qkv.w.value.clone(), m.qkv.b.value.clone(), m.out.w.value.clone(), m.out.b.value.clone()]
    }

    fn grads(m: &MultiHeadAttention<f64>) -> Vec<Tensor<f64>> {
        vec![m.qkv.w.grad.clone(), m.qkv.b.grad.clone(), m.out.w.grad.clone(), m.out.b.grad.clone()]
    }

    fn with_params(heads: usize, t: &[Tensor<f64>]) -> MultiHeadAttention<f64> {
        MultiHeadAttention {
            heads,
            qkv: Dense { w: Param::new(t[0].clone()), b: Param::new(t[1].clone()) },
            out: Dense { w: Param::new(t[2].clone()), b: Param::new(t[3].clone()) },
        }
    }

    fn check(mask: Option<&[bool]>) {
        let mut r = rng();
        let mut mha = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
        mha.qkv.b.value = Tensor::randn(&[24], 0.3, &mut r);
        mha.out.b.value = Tensor::randn(&[8], 0.3, &mut r);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let proj = Tensor::randn(&[5, 8], 1.0, &mut r);
        let (_, cache) = mha.forward(&x, mask).unwrap();
        let dx = mha.backward(&cache, &proj).unwrap();
        let mut analytic = vec![dx];
        analytic.extend(grads(&mha));
        let mut inputs = vec![x];
        inputs.extend(params(&mha));
        let report = grad_check(
            &mut inputs,
            &analytic,
            |t| dot(&with_params(2, &t[1..]).forward(&t[0], mask).unwrap().0, &proj),
            1e-4,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(None);
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        check(Some(&[true, false, true, true, false]));
    }
}
