use rand::Rng;

use super::{mismatch, KernelError, Param, Tensor};
use crate::scalar::Scalar;

/// `y = x W + b` for `x: [N x a]`, `W: [a x b]`, `b: [b]`.
pub fn dense_fwd<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
    let (n, a) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != a || b.len() != w.shape()[1] {
        return mismatch(format!("dense x{:?} W{:?} b{:?}", x.shape(), w.shape(), b.shape()));
    }
    let out = w.shape()[1];
    let (wd, bd) = (w.data(), b.data());
    let mut y = Tensor::zeros(&[n, out]);
    for i in 0..n {
        let yr = y.row_mut(i);
        yr.copy_from_slice(bd);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            for (yv, &wv) in yr.iter_mut().zip(&wd[k * out..(k + 1) * out]) {
                *yv += xv * wv;
            }
        }
    }
    Ok(y)
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn dense_bwd<S: Scalar>(
    x: &Tensor<S>,
    w: &mut Param<S>,
    b: &mut Param<S>,
    dy: &Tensor<S>,
) -> Result<Tensor<S>, KernelError> {
    let (n, a) = (x.rows(), x.cols());
    let out = w.shape()[1];
    if dy.rows() != n || dy.cols() != out || w.shape()[0] != a {
        return mismatch(format!("dense bwd x{:?} W{:?} dy{:?}", x.shape(), w.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(&[n, a]);
    let wd = w.value.data();
    let dw = w.grad.data_mut();
    let db = b.grad.data_mut();
    for i in 0..n {
        let dyr = dy.row(i);
        for (g, &d) in db.iter_mut().zip(dyr) {
            *g += d;
        }
        let xr = x.row(i);
        let dxr = dx.row_mut(i);
        for k in 0..a {
            let wrow = &wd[k * out..(k + 1) * out];
            let mut acc = S::zero();
            for (&wv, &d) in wrow.iter().zip(dyr) {
                acc += wv * d;
            }
            dxr[k] = acc;
            let xv = xr[k];
            if xv != S::zero() {
                for (g, &d) in dw[k * out..(k + 1) * out].iter_mut().zip(dyr) {
                    *g += xv * d;
                }
            }
        }
    }
    Ok(dx)
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub w: Param<S>,
    pub b: Param<S>,
}

impl<S: Scalar> Dense<S> {
    /// Scaled Gaussian initialisation (`std = gain / sqrt(fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self { w: Param::new(Tensor::randn(&[fan_in, fan_out], std, rng)), b: Param::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
        dense_fwd(x, &self.w.value, &self.b.value)
    }

    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
        dense_bwd(x, &mut self.w, &mut self.b, dy)
    }
}

/// Row lookup `table[ids[i]]`, giving `[ids.len() x e]`.
pub fn embed_fwd<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>, KernelError> {
    let vocab = table.rows();
    if ids.is_empty() {
        return mismatch("empty id list");
    }
    let mut out = Tensor::zeros(&[ids.len(), table.cols()]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(KernelError::UnknownId { id, vocab });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-adds `dy` rows into the table gradient.
pub fn embed_bwd<S: Scalar>(table: &mut Param<S>, ids: &[usize], dy: &Tensor<S>) -> Result<(), KernelError> {
    if dy.rows() != ids.len() || dy.cols() != table.value.cols() {
        return mismatch(format!("embed bwd dy{:?} for {} ids", dy.shape(), ids.len()));
    }
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.value.rows() {
            return Err(KernelError::UnknownId { id, vocab: table.value.rows() });
        }
        for (g, &d) in table.grad.row_mut(id).iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
    Ok(())
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub eps: S,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub const DEFAULT_EPS: f64 = 1e-9;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[dim], S::one())),
            beta: Param::zeros(&[dim]),
            eps: S::of(Self::DEFAULT_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LayerNormCache<S>), KernelError> {
        let d = x.cols();
        if self.gamma.value.len() != d {
            return mismatch(format!("layernorm of width {} on {:?}", self.gamma.value.len(), x.shape()));
        }
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let inv_d = S::one() / S::of_usize(d);
        let mut y = Tensor::zeros(&[x.rows(), d]);
        let mut xhat = Tensor::zeros(&[x.rows(), d]);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let xr = x.row(i);
            let mean = xr.iter().copied().sum::<S>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let is = S::one() / (var + self.eps).sqrt();
            inv_std.push(is);
            let hr = xhat.row_mut(i);
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
            let hr = xhat.row(i).to_vec();
            for (k, yv) in y.row_mut(i).iter_mut().enumerate() {
                *yv = hr[k] * g[k] + b[k];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
        let d = cache.xhat.cols();
        if dy.shape() != cache.xhat.shape() {
            return mismatch(format!("layernorm bwd dy{:?} vs {:?}", dy.shape(), cache.xhat.shape()));
        }
        let dn = S::of_usize(d);
        let mut dx = Tensor::zeros(&[dy.rows(), d]);
        let g = self.gamma.value.data().to_vec();
        for i in 0..dy.rows() {
            let (dyr, hr) = (dy.row(i), cache.xhat.row(i));
            let mut dxhat = vec![S::zero(); d];
            let (mut sum_dh, mut sum_dh_h) = (S::zero(), S::zero());
            for k in 0..d {
                self.gamma.grad.data_mut()[k] += dyr[k] * hr[k];
                self.beta.grad.data_mut()[k] += dyr[k];
                dxhat[k] = dyr[k] * g[k];
                sum_dh += dxhat[k];
                sum_dh_h += dxhat[k] * hr[k];
            }
            let scale = cache.inv_std[i] / dn;
            for (k, v) in dx.row_mut(i).iter_mut().enumerate() {
                *v = scale * (dn * dxhat[k] - sum_dh - hr[k] * sum_dh_h);
            }
        }
        Ok(dx)
    }
}

/// Row softmax. Columns with `key_mask[j] == false` receive exactly zero weight;
/// a row with every column masked comes out all zero.
pub fn softmax_fwd<S: Scalar>(x: &Tensor<S>, key_mask: Option<&[bool]>) -> Result<Tensor<S>, KernelError> {
    let c = x.cols();
    if let Some(m) = key_mask {
        if m.len() != c {
            return mismatch(format!("mask of {} for {c} columns", m.len()));
        }
    }
    let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
    let mut y = Tensor::zeros(&[x.rows(), c]);
    for i in 0..x.rows() {
        let xr = x.row(i);
        let max = (0..c).filter(|&j| keep(j)).map(|j| xr[j]).fold(S::neg_infinity(), S::max);
        if max == S::neg_infinity() {
            continue;
        }
        let yr = y.row_mut(i);
        let mut total = S::zero();
        for j in 0..c {
            if keep(j) {
                yr[j] = (xr[j] - max).exp();
                total += yr[j];
            }
        }
        for v in yr.iter_mut() {
            *v /= total;
        }
    }
    Ok(y)
}

/// `dx = y * (dy - sum(y * dy))` row by row.
pub fn softmax_bwd<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
    if y.shape() != dy.shape() {
        return mismatch(format!("softmax bwd {:?} vs {:?}", y.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, dr) = (y.row(i), dy.row(i));
        let dot: S = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for (k, v) in dx.row_mut(i).iter_mut().enumerate() {
            *v = yr[k] * (dr[k] - dot);
        }
    }
    Ok(dx)
}

fn gelu_inner<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044_715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let half = S::of(0.5);
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * k * x * x);
    (y, dy)
}

/// GELU, tanh approximation.
pub fn gelu_fwd<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| gelu_inner(v).0)
}

pub fn gelu_bwd<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
    if x.shape() != dy.shape() {
        return mismatch(format!("gelu bwd {:?} vs {:?}", x.shape(), dy.shape()));
    }
    let data = x.data().iter().zip(dy.data()).map(|(&v, &d)| gelu_inner(v).1 * d).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Mean over the first `valid` rows, giving `[1 x d]`.
pub fn mean_pool_fwd<S: Scalar>(x: &Tensor<S>, valid: usize) -> Result<Tensor<S>, KernelError> {
    if valid == 0 || valid > x.rows() {
        return mismatch(format!("mean pool over {valid} of {} rows", x.rows()));
    }
    let inv = S::one() / S::of_usize(valid);
    let mut y = Tensor::zeros(&[1, x.cols()]);
    for i in 0..valid {
        for (a, &v) in y.data_mut().iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    y.scale(inv);
    Ok(y)
}

pub fn mean_pool_bwd<S: Scalar>(rows: usize, valid: usize, dy: &Tensor<S>) -> Result<Tensor<S>, KernelError> {
    if valid == 0 || valid > rows || dy.rows() != 1 {
        return mismatch(format!("mean pool bwd over {valid} of {rows} rows, dy{:?}", dy.shape()));
    }
    let inv = S::one() / S::of_usize(valid);
    let mut dx = Tensor::zeros(&[rows, dy.cols()]);
    for i in 0..valid {
        for (a, &d) in dx.row_mut(i).iter_mut().zip(dy.data()) {
            *a = d * inv;
        }
    }
    Ok(dx)
}
