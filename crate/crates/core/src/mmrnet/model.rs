use rand::Rng;

use super::{MmrNetError, ModelConfig, Normalization, Variant};
use crate::kernels::{
    embed_bwd, embed_fwd, gelu_bwd, gelu_fwd, mean_pool_bwd, mean_pool_fwd, sigmoid, Dense, LayerNorm, LayerNormCache,
    MhaCache, MultiHeadAttention, Param, Tensor,
};
use crate::scalar::Scalar;
use crate::simworld::SnapshotSequence;

/// A normalized sample ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<S> {
    /// `[T x F]` z-normalized features.
    pub feats: Tensor<S>,
    /// Own-team characters.
    pub own: Vec<usize>,
    /// Opposing characters.
    pub opp: Vec<usize>,
}

impl<S: Scalar> Prepared<S> {
    pub fn len(&self) -> usize {
        self.feats.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Slice embedding: `[line-up | projected features] + position`.
#[derive(Debug, Clone, PartialEq)]
struct Embedding<S> {
    /// Rows `0..V` embed own characters, rows `V..2V` opposing ones.
    lineup: Param<S>,
    feat: Dense<S>,
    pos: Param<S>,
}

impl<S: Scalar> Embedding<S> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            lineup: Param::new(Tensor::randn(&[2 * cfg.lineup_vocab, cfg.lineup_dim], 1.0, rng)),
            feat: Dense::new(cfg.features, cfg.d_model - cfg.lineup_dim, 1.0, rng),
            pos: Param::new(Tensor::randn(&[cfg.t_max, cfg.d_model], 0.1, rng)),
        }
    }

    fn vocab(&self) -> usize {
        self.lineup.value.rows() / 2
    }

    fn lineup_vec(&self, x: &Prepared<S>) -> Result<Vec<S>, MmrNetError> {
        let v = self.vocab();
        let opp: Vec<usize> = x.opp.iter().map(|&c| c + v).collect();
        let mut out = vec![S::zero(); self.lineup.value.cols()];
        for ids in [&x.own, &opp] {
            let rows = embed_fwd(&self.lineup.value, ids)?;
            let pooled = mean_pool_fwd(&rows, ids.len())?;
            for (o, &p) in out.iter_mut().zip(pooled.data()) {
                *o += p;
            }
        }
        Ok(out)
    }

    fn forward(&self, x: &Prepared<S>) -> Result<Tensor<S>, MmrNetError> {
        let t = x.len();
        let d = self.pos.value.cols();
        if t > self.pos.value.rows() {
            return Err(MmrNetError::SchemaMismatch(format!("{t} slices exceed t_max {}", self.pos.value.rows())));
        }
        let lv = self.lineup_vec(x)?;
        let ld = lv.len();
        let f = self.feat.forward(&x.feats)?;
        let mut h = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let row = h.row_mut(i);
            row[..ld].copy_from_slice(&lv);
            row[ld..].copy_from_slice(f.row(i));
            for (v, &p) in row.iter_mut().zip(self.pos.value.row(i)) {
                *v += p;
            }
        }
        Ok(h)
    }

    fn backward(&mut self, x: &Prepared<S>, dh: &Tensor<S>) -> Result<(), MmrNetError> {
        let t = x.len();
        let ld = self.lineup.value.cols();
        let d = dh.cols();
        let mut dl = vec![S::zero(); ld];
        let mut df = Tensor::zeros(&[t, d - ld]);
        for i in 0..t {
            let row = dh.row(i);
            for (g, &v) in self.pos.grad.row_mut(i).iter_mut().zip(row) {
                *g += v;
            }
            for (a, &v) in dl.iter_mut().zip(&row[..ld]) {
                *a += v;
            }
            df.row_mut(i).copy_from_slice(&row[ld..]);
        }
        let v = self.vocab();
        let opp: Vec<usize> = x.opp.iter().map(|&c| c + v).collect();
        for ids in [&x.own, &opp] {
            let dl_t = Tensor::new(vec![1, ld], dl.clone())?;
            let dy = mean_pool_bwd(ids.len(), ids.len(), &dl_t)?;
            embed_bwd(&mut self.lineup, ids, &dy)?;
        }
        self.feat.backward(&x.feats, &df)?;
        Ok(())
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Debug, Clone, PartialEq)]
struct Block<S> {
    ln1: LayerNorm<S>,
    attn: MultiHeadAttention<S>,
    ln2: LayerNorm<S>,
    ff1: Dense<S>,
    ff2: Dense<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    mha: MhaCache<S>,
    ln2: LayerNormCache<S>,
    b: Tensor<S>,
    pre: Tensor<S>,
    act: Tensor<S>,
}

impl<S: Scalar> Block<S> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, MmrNetError> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, cfg.heads, rng)?,
            ln2: LayerNorm::new(d),
            ff1: Dense::new(d, cfg.ffn_dim, 1.0, rng),
            ff2: Dense::new(cfg.ffn_dim, d, 0.5, rng),
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BlockCache<S>), MmrNetError> {
        let (a, ln1) = self.ln1.forward(x)?;
        let (m, mha) = self.attn.forward(&a, None)?;
        let x1 = x.add(&m)?;
        let (b, ln2) = self.ln2.forward(&x1)?;
        let pre = self.ff1.forward(&b)?;
        let act = gelu_fwd(&pre);
        let f = self.ff2.forward(&act)?;
        Ok((x1.add(&f)?, BlockCache { ln1, mha, ln2, b, pre, act }))
    }

    fn backward(&mut self, c: &BlockCache<S>, dy: &Tensor<S>) -> Result<Tensor<S>, MmrNetError> {
        let dact = self.ff2.backward(&c.act, dy)?;
        let dpre = gelu_bwd(&c.pre, &dact)?;
        let db = self.ff1.backward(&c.b, &dpre)?;
        let dx1 = dy.add(&self.ln2.backward(&c.ln2, &db)?)?;
        let da = self.attn.backward(&c.mha, &dx1)?;
        Ok(dx1.add(&self.ln1.backward(&c.ln1, &da)?)?)
    }
}

/// Attention over the hidden states of all inner layers at once, reduced back
/// to `[T x d]` by a learned per-(position, channel) weighting of the layers.
#[derive(Debug, Clone, PartialEq)]
struct Omni<S> {
    ln: LayerNorm<S>,
    attn: MultiHeadAttention<S>,
    /// `[(L-1) * t_max x d]`; row `l * t_max + t`.
    reducer: Param<S>,
    t_max: usize,
}

#[derive(Debug, Clone)]
struct OmniCache<S> {
    ln: LayerNormCache<S>,
    mha: MhaCache<S>,
    o: Tensor<S>,
    layers: usize,
    t: usize,
}

impl<S: Scalar> Omni<S> {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, MmrNetError> {
        let layers = cfg.layers - 1;
        Ok(Self {
            ln: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.heads, rng)?,
            reducer: Param::new(Tensor::filled(&[layers * cfg.t_max, cfg.d_model], S::one() / S::of_usize(layers))),
            t_max: cfg.t_max,
        })
    }

    fn forward(&self, states: &[Tensor<S>]) -> Result<(Tensor<S>, OmniCache<S>), MmrNetError> {
        let layers = states.len();
        let (t, d) = (states[0].rows(), states[0].cols());
        if layers * self.t_max != self.reducer.value.rows() {
            return Err(MmrNetError::SchemaMismatch(format!("{layers} hidden states for the omni reducer")));
        }
        let flat: Vec<S> = states.iter().flat_map(|s| s.data().iter().copied()).collect();
        let stack = Tensor::new(vec![layers * t, d], flat)?;
        let (a, ln) = self.ln.forward(&stack)?;
        let (o, mha) = self.attn.forward(&a, None)?;
        let mut red = Tensor::zeros(&[t, d]);
        for l in 0..layers {
            for i in 0..t {
                let r = self.reducer.value.row(l * self.t_max + i);
                let orow = o.row(l * t + i);
                for ((acc, &w), &v) in red.row_mut(i).iter_mut().zip(r).zip(orow) {
                    *acc += w * v;
                }
            }
        }
        Ok((red, OmniCache { ln, mha, o, layers, t }))
    }

    fn backward(&mut self, c: &OmniCache<S>, dred: &Tensor<S>) -> Result<Vec<Tensor<S>>, MmrNetError> {
        let d = dred.cols();
        let mut dout = Tensor::zeros(&[c.layers * c.t, d]);
        for l in 0..c.layers {
            for i in 0..c.t {
                let row = l * self.t_max + i;
                let dr = dred.row(i);
                let orow = c.o.row(l * c.t + i);
                for k in 0..d {
                    self.reducer.grad.row_mut(row)[k] += orow[k] * dr[k];
                    dout.row_mut(l * c.t + i)[k] = self.reducer.value.row(row)[k] * dr[k];
                }
            }
        }
        let da = self.attn.backward(&c.mha, &dout)?;
        let dstack = self.ln.backward(&c.ln, &da)?;
        (0..c.layers)
            .map(|l| Ok(Tensor::new(vec![c.t, d], dstack.data()[l * c.t * d..(l + 1) * c.t * d].to_vec())?))
            .collect()
    }

    /// Per-slice share of attention: mean over heads and queries of the
    /// weight landing on slice `t` in any layer. Sums to one.
    fn profile(c: &OmniCache<S>) -> Vec<S> {
        let weights = c.mha.weights();
        let n = c.layers * c.t;
        let mut out = vec![S::zero(); c.t];
        for a in weights {
            for q in 0..n {
                for (k, &w) in a.row(q).iter().enumerate() {
                    out[k % c.t] += w;
                }
            }
        }
        let denom = S::of_usize(weights.len() * n);
        out.iter_mut().for_each(|v| *v /= denom);
        out
    }
}

/// `d -> hidden -> GELU -> 1`.
#[derive(Debug, Clone, PartialEq)]
struct Head<S> {
    hidden: Dense<S>,
    out: Dense<S>,
}

#[derive(Debug, Clone)]
struct HeadCache<S> {
    x: Tensor<S>,
    pre: Tensor<S>,
    act: Tensor<S>,
}

impl<S: Scalar> Head<S> {
    fn new<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self { hidden: Dense::new(d, hidden, 1.0, rng), out: Dense::new(hidden, 1, 0.5, rng) }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(S, HeadCache<S>), MmrNetError> {
        let pre = self.hidden.forward(x)?;
        let act = gelu_fwd(&pre);
        let y = self.out.forward(&act)?.data()[0];
        Ok((y, HeadCache { x: x.clone(), pre, act }))
    }

    fn backward(&mut self, c: &HeadCache<S>, dy: S) -> Result<Tensor<S>, MmrNetError> {
        let dact = self.out.backward(&c.act, &Tensor::filled(&[1, 1], dy))?;
        let dpre = gelu_bwd(&c.pre, &dact)?;
        Ok(self.hidden.backward(&c.x, &dpre)?)
    }
}

/// Gated recurrent cell; gate columns laid out as `[update | reset | candidate]`.
#[derive(Debug, Clone, PartialEq)]
struct GruCell<S> {
    wx: Dense<S>,
    uh: Dense<S>,
}

#[derive(Debug, Clone)]
struct GruCache<S> {
    x: Tensor<S>,
    /// `h_0 .. h_T`, each `[1 x d]`.
    hs: Vec<Tensor<S>>,
    /// Recurrent pre-activations per step, `[1 x 3d]`.
    gh: Vec<Tensor<S>>,
    z: Vec<Vec<S>>,
    r: Vec<Vec<S>>,
    n: Vec<Vec<S>>,
}

impl<S: Scalar> GruCell<S> {
    fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self { wx: Dense::new(d, 3 * d, 1.0, rng), uh: Dense::new(d, 3 * d, 1.0, rng) }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, GruCache<S>), MmrNetError> {
        let d = self.uh.fan_in();
        let gx = self.wx.forward(x)?;
        let mut hs = vec![Tensor::zeros(&[1, d])];
        let (mut ghs, mut zs, mut rs, mut ns) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in 0..x.rows() {
            let prev = hs.last().expect("h_0 exists");
            let gh = self.uh.forward(prev)?;
            let (gxr, ghr) = (gx.row(t), gh.data());
            let z: Vec<S> = (0..d).map(|k| sigmoid(gxr[k] + ghr[k])).collect();
            let r: Vec<S> = (0..d).map(|k| sigmoid(gxr[d + k] + ghr[d + k])).collect();
            let n: Vec<S> = (0..d).map(|k| (gxr[2 * d + k] + r[k] * ghr[2 * d + k]).tanh()).collect();
            let h: Vec<S> = (0..d).map(|k| (S::one() - z[k]) * n[k] + z[k] * prev.data()[k]).collect();
            hs.push(Tensor::new(vec![1, d], h)?);
            ghs.push(gh);
            zs.push(z);
            rs.push(r);
            ns.push(n);
        }
        let last = hs.last().expect("at least one step").clone();
        Ok((last, GruCache { x: x.clone(), hs, gh: ghs, z: zs, r: rs, n: ns }))
    }

    fn backward(&mut self, c: &GruCache<S>, dlast: &Tensor<S>) -> Result<Tensor<S>, MmrNetError> {
        let d = self.uh.fan_in();
        let steps = c.x.rows();
        let mut dgx = Tensor::zeros(&[steps, 3 * d]);
        let mut dh = dlast.data().to_vec();
        for t in (0..steps).rev() {
            let (z, r, n) = (&c.z[t], &c.r[t], &c.n[t]);
            let prev = c.hs[t].data();
            let gh = c.gh[t].data();
            let mut dgh = vec![S::zero(); 3 * d];
            let mut dprev = vec![S::zero(); d];
            {
                let row = dgx.row_mut(t);
                for k in 0..d {
                    let dn = dh[k] * (S::one() - z[k]);
                    let dz = dh[k] * (prev[k] - n[k]);
                    dprev[k] = dh[k] * z[k];
                    let dpre_n = dn * (S::one() - n[k] * n[k]);
                    let dr = dpre_n * gh[2 * d + k];
                    let dpre_z = dz * z[k] * (S::one() - z[k]);
                    let dpre_r = dr * r[k] * (S::one() - r[k]);
                    row[k] = dpre_z;
                    row[d + k] = dpre_r;
                    row[2 * d + k] = dpre_n;
                    dgh[k] = dpre_z;
                    dgh[d + k] = dpre_r;
                    dgh[2 * d + k] = dpre_n * r[k];
                }
            }
            let dfrom = self.uh.backward(&c.hs[t], &Tensor::new(vec![1, 3 * d], dgh)?)?;
            for (a, &b) in dprev.iter_mut().zip(dfrom.data()) {
                *a += b;
            }
            dh = dprev;
        }
        Ok(self.wx.backward(&c.x, &dgx)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body<S> {
    Stack { embed: Embedding<S>, blocks: Vec<Block<S>>, omni: Option<Omni<S>>, ln_f: LayerNorm<S>, head: Head<S> },
    Gru { embed: Embedding<S>, cell: GruCell<S>, head: Head<S> },
    Mlp { embed: Embedding<S>, hidden: Dense<S>, head: Head<S> },
    Lr { linear: Dense<S> },
}

/// Intermediate values of one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ModelCache<S> {
    inner: CacheBody<S>,
}

#[derive(Debug, Clone)]
enum CacheBody<S> {
    Stack { blocks: Vec<BlockCache<S>>, omni: Option<OmniCache<S>>, ln_f: LayerNormCache<S>, head: HeadCache<S> },
    Gru { gru: GruCache<S>, head: HeadCache<S> },
    Mlp { flat: Tensor<S>, pre: Tensor<S>, head: HeadCache<S> },
    Lr { flat: Tensor<S> },
}

impl<S: Scalar> ModelCache<S> {
    /// Per-slice omnidirectional attention shares, for variants that have them.
    pub fn attention_profile(&self) -> Option<Vec<S>> {
        match &self.inner {
            CacheBody::Stack { omni: Some(c), .. } => Some(Omni::profile(c)),
            _ => None,
        }
    }
}

/// Zero-padded row-major flattening of `[T x c]` into `[1 x t_max * c]`.
fn flatten_padded<S: Scalar>(x: &Tensor<S>, t_max: usize) -> Result<Tensor<S>, MmrNetError> {
    let mut data = x.data().to_vec();
    data.resize(t_max * x.cols(), S::zero());
    Ok(Tensor::new(vec![1, t_max * x.cols()], data)?)
}

fn unflatten<S: Scalar>(flat: &Tensor<S>, t: usize, cols: usize) -> Result<Tensor<S>, MmrNetError> {
    Ok(Tensor::new(vec![t, cols], flat.data()[..t * cols].to_vec())?)
}

fn push_dense<'a, S>(out: &mut Vec<(String, &'a mut Param<S>)>, name: &str, d: &'a mut Dense<S>) {
    out.push((format!("{name}.w"), &mut d.w));
    out.push((format!("{name}.b"), &mut d.b));
}

fn push_ln<'a, S>(out: &mut Vec<(String, &'a mut Param<S>)>, name: &str, l: &'a mut LayerNorm<S>) {
    out.push((format!("{name}.gamma"), &mut l.gamma));
    out.push((format!("{name}.beta"), &mut l.beta));
}

fn push_mha<'a, S>(out: &mut Vec<(String, &'a mut Param<S>)>, name: &str, m: &'a mut MultiHeadAttention<S>) {
    push_dense(out, &format!("{name}.qkv"), &mut m.qkv);
    push_dense(out, &format!("{name}.out"), &mut m.out);
}

fn push_embed<'a, S>(out: &mut Vec<(String, &'a mut Param<S>)>, e: &'a mut Embedding<S>) {
    out.push(("embed.lineup".into(), &mut e.lineup));
    push_dense(out, "embed.feat", &mut e.feat);
    out.push(("embed.pos".into(), &mut e.pos));
}

fn push_head<'a, S>(out: &mut Vec<(String, &'a mut Param<S>)>, h: &'a mut Head<S>) {
    push_dense(out, "head.hidden", &mut h.hidden);
    push_dense(out, "head.out", &mut h.out);
}

/// Any of the six regressors, selected by [`ModelConfig::variant`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    body: Body<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, MmrNetError> {
        config.validate()?;
        let c = &config;
        let body = match c.variant {
            Variant::Mmrnet | Variant::Transformer | Variant::MmrnetEnd => {
                let embed = Embedding::new(c, rng);
                let blocks = (0..c.layers).map(|_| Block::new(c, rng)).collect::<Result<_, _>>()?;
                let omni = if c.variant.has_omni() { Some(Omni::new(c, rng)?) } else { None };
                Body::Stack { embed, blocks, omni, ln_f: LayerNorm::new(c.d_model), head: Head::new(c.d_model, c.head_hidden, rng) }
            }
            Variant::Gru => Body::Gru {
                embed: Embedding::new(c, rng),
                cell: GruCell::new(c.d_model, rng),
                head: Head::new(c.d_model, c.head_hidden, rng),
            },
            Variant::Mlp => Body::Mlp {
                embed: Embedding::new(c, rng),
                hidden: Dense::new(c.t_max * c.d_model, c.d_model, 1.0, rng),
                head: Head::new(c.d_model, c.head_hidden, rng),
            },
            Variant::Lr => Body::Lr { linear: Dense::new(c.t_max * c.features, 1, 0.1, rng) },
        };
        Ok(Self { config, body })
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<S>)> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Stack { embed, blocks, omni, ln_f, head } => {
                push_embed(&mut out, embed);
                for (i, b) in blocks.iter_mut().enumerate() {
                    let p = format!("block{i}");
                    push_ln(&mut out, &format!("{p}.ln1"), &mut b.ln1);
                    push_mha(&mut out, &format!("{p}.attn"), &mut b.attn);
                    push_ln(&mut out, &format!("{p}.ln2"), &mut b.ln2);
                    push_dense(&mut out, &format!("{p}.ff1"), &mut b.ff1);
                    push_dense(&mut out, &format!("{p}.ff2"), &mut b.ff2);
                }
                if let Some(o) = omni {
                    push_ln(&mut out, "omni.ln", &mut o.ln);
                    push_mha(&mut out, "omni.attn", &mut o.attn);
                    out.push(("omni.reducer".into(), &mut o.reducer));
                }
                push_ln(&mut out, "ln_f", ln_f);
                push_head(&mut out, head);
            }
            Body::Gru { embed, cell, head } => {
                push_embed(&mut out, embed);
                push_dense(&mut out, "gru.wx", &mut cell.wx);
                push_dense(&mut out, "gru.uh", &mut cell.uh);
                push_head(&mut out, head);
            }
            Body::Mlp { embed, hidden, head } => {
                push_embed(&mut out, embed);
                push_dense(&mut out, "mlp.hidden", hidden);
                push_head(&mut out, head);
            }
            Body::Lr { linear } => push_dense(&mut out, "lr.linear", linear),
        }
        out
    }

    /// Names and values of every parameter, in [`Self::named_params_mut`] order.
    pub fn named_values(&self) -> Vec<(String, Tensor<S>)> {
        let mut copy = self.clone();
        copy.named_params_mut().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_values().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.named_params_mut().into_iter().for_each(|(_, p)| p.zero_grad());
    }

    /// The omnidirectional reducer, if this variant has one.
    pub fn omni_reducer_mut(&mut self) -> Option<&mut Param<S>> {
        match &mut self.body {
            Body::Stack { omni: Some(o), .. } => Some(&mut o.reducer),
            _ => None,
        }
    }

    /// The same network with the omnidirectional term removed.
    pub fn without_omni(&self) -> Self {
        let mut m = self.clone();
        if let Body::Stack { omni, .. } = &mut m.body {
            *omni = None;
            m.config.variant = Variant::Transformer;
        }
        m
    }

    /// Validates the sample against the schema and normalizes its features.
    pub fn prepare(&self, seq: &SnapshotSequence, norm: &Normalization) -> Result<Prepared<S>, MmrNetError> {
        let c = &self.config;
        norm.validate(c.features)?;
        seq.validate().map_err(MmrNetError::SchemaMismatch)?;
        if seq.feature_count() != c.features {
            return Err(MmrNetError::SchemaMismatch(format!("{} features, model expects {}", seq.feature_count(), c.features)));
        }
        if seq.length > c.t_max {
            return Err(MmrNetError::SchemaMismatch(format!("{} slices, model takes at most {}", seq.length, c.t_max)));
        }
        for &id in seq.lineup_ids.iter().flatten() {
            if id as usize >= c.lineup_vocab {
                return Err(MmrNetError::UnknownCharacterId { id, vocab: c.lineup_vocab });
            }
        }
        let first = if c.variant == Variant::MmrnetEnd { seq.length - 1 } else { 0 };
        let rows: Vec<Vec<S>> = seq.features[first..]
            .iter()
            .map(|r| {
                r.iter()
                    .zip(norm.feature_mean.iter().zip(&norm.feature_std))
                    .map(|(&v, (&m, &s))| S::of((v - m) / s))
                    .collect()
            })
            .collect();
        Ok(Prepared {
            feats: Tensor::from_rows(&rows)?,
            own: seq.lineup_ids[0].iter().map(|&i| i as usize).collect(),
            opp: seq.lineup_ids[1].iter().map(|&i| i as usize).collect(),
        })
    }

    /// Normalized-scale prediction plus the cache for the backward pass.
    pub fn forward(&self, x: &Prepared<S>) -> Result<(S, ModelCache<S>), MmrNetError> {
        let t = x.len();
        if x.feats.cols() != self.config.features || t > self.config.t_max {
            return Err(MmrNetError::SchemaMismatch(format!("input {:?}", x.feats.shape())));
        }
        let (y, inner) = match &self.body {
            Body::Stack { embed, blocks, omni, ln_f, head } => {
                let mut h = embed.forward(x)?;
                let mut caches = Vec::with_capacity(blocks.len());
                let mut states = Vec::new();
                for (i, b) in blocks.iter().enumerate() {
                    let (next, c) = b.forward(&h)?;
                    caches.push(c);
                    if i + 1 < blocks.len() && omni.is_some() {
                        states.push(next.clone());
                    }
                    h = next;
                }
                let (z, oc) = match omni {
                    Some(o) => {
                        let (red, oc) = o.forward(&states)?;
                        (h.add(&red)?, Some(oc))
                    }
                    None => (h, None),
                };
                let (zn, lnc) = ln_f.forward(&z)?;
                let pooled = mean_pool_fwd(&zn, t)?;
                let (y, hc) = head.forward(&pooled)?;
                (y, CacheBody::Stack { blocks: caches, omni: oc, ln_f: lnc, head: hc })
            }
            Body::Gru { embed, cell, head } => {
                let h = embed.forward(x)?;
                let (last, gru) = cell.forward(&h)?;
                let (y, hc) = head.forward(&last)?;
                (y, CacheBody::Gru { gru, head: hc })
            }
            Body::Mlp { embed, hidden, head } => {
                let flat = flatten_padded(&embed.forward(x)?, self.config.t_max)?;
                let pre = hidden.forward(&flat)?;
                let act = gelu_fwd(&pre);
                let (y, hc) = head.forward(&act)?;
                (y, CacheBody::Mlp { flat, pre, head: hc })
            }
            Body::Lr { linear } => {
                let flat = flatten_padded(&x.feats, self.config.t_max)?;
                let y = linear.forward(&flat)?.data()[0];
                (y, CacheBody::Lr { flat })
            }
        };
        Ok((y, ModelCache { inner }))
    }

    /// Accumulates parameter gradients of `dy * y` into every [`Param::grad`].
    pub fn backward(&mut self, x: &Prepared<S>, cache: &ModelCache<S>, dy: S) -> Result<(), MmrNetError> {
        let t = x.len();
        match (&mut self.body, &cache.inner) {
            (Body::Stack { embed, blocks, omni, ln_f, head }, CacheBody::Stack { blocks: bc, omni: oc, ln_f: lc, head: hc }) => {
                let dpooled = head.backward(hc, dy)?;
                let dzn = mean_pool_bwd(t, t, &dpooled)?;
                let dz = ln_f.backward(lc, &dzn)?;
                let dstates = match (omni, oc) {
                    (Some(o), Some(c)) => o.backward(c, &dz)?,
                    _ => Vec::new(),
                };
                let mut dh = dz;
                for i in (0..blocks.len()).rev() {
                    if let Some(ds) = dstates.get(i) {
                        dh.add_assign(ds)?;
                    }
                    dh = blocks[i].backward(&bc[i], &dh)?;
                }
                embed.backward(x, &dh)
            }
            (Body::Gru { embed, cell, head }, CacheBody::Gru { gru, head: hc }) => {
                let dlast = head.backward(hc, dy)?;
                let dh = cell.backward(gru, &dlast)?;
                embed.backward(x, &dh)
            }
            (Body::Mlp { embed, hidden, head }, CacheBody::Mlp { flat, pre, head: hc }) => {
                let dact = head.backward(hc, dy)?;
                let dpre = gelu_bwd(pre, &dact)?;
                let dflat = hidden.backward(flat, &dpre)?;
                let dh = unflatten(&dflat, t, self.config.d_model)?;
                embed.backward(x, &dh)
            }
            (Body::Lr { linear }, CacheBody::Lr { flat }) => {
                linear.backward(flat, &Tensor::filled(&[1, 1], dy))?;
                Ok(())
            }
            _ => Err(MmrNetError::SchemaMismatch("cache from a different variant".into())),
        }
    }

    /// Embedded slices before the transformer stack (or recurrent cell).
    pub fn embed(&self, x: &Prepared<S>) -> Result<Option<Tensor<S>>, MmrNetError> {
        match &self.body {
            Body::Stack { embed, .. } | Body::Gru { embed, .. } | Body::Mlp { embed, .. } => embed.forward(x).map(Some),
            Body::Lr { .. } => Ok(None),
        }
    }

    /// Mutable access to the position table, for the variants that have one.
    pub fn position_table_mut(&mut self) -> Option<&mut Param<S>> {
        match &mut self.body {
            Body::Stack { embed, .. } | Body::Gru { embed, .. } | Body::Mlp { embed, .. } => Some(&mut embed.pos),
            Body::Lr { .. } => None,
        }
    }

    /// Omnidirectional attention over explicit hidden states (one `[T x d]`
    /// tensor per inner layer) and its per-slice attention profile.
    pub fn omni_attention(&self, states: &[Tensor<S>]) -> Result<Option<(Tensor<S>, Vec<S>)>, MmrNetError> {
        match &self.body {
            Body::Stack { omni: Some(o), .. } => {
                if states.is_empty() || states.iter().any(|s| s.shape() != states[0].shape()) {
                    return Err(MmrNetError::SchemaMismatch("omni attention needs equally shaped states".into()));
                }
                let (red, c) = o.forward(states)?;
                Ok(Some((red, Omni::profile(&c))))
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant) -> ModelConfig {
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

    fn sample(t: usize, f: usize, rng: &mut ChaCha8Rng) -> Prepared<f64> {
        Prepared { feats: Tensor::randn(&[t, f], 1.0, rng), own: vec![0, 2, 5], opp: vec![1, 3, 4] }
    }

    fn loss(m: &Model<f64>, x: &Prepared<f64>) -> f64 {
        let (y, _) = m.forward(x).unwrap();
        (y - 0.3) * (y - 0.3)
    }

    /// Perturbs a few randomised biases away from zero so every path carries
    /// gradient, then checks the whole network against finite differences.
    fn end_to_end(variant: Variant) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::<f64>::new(tiny(variant), &mut rng).unwrap();
        for (_, p) in m.named_params_mut() {
            let noise = Tensor::randn(p.shape(), 0.1, &mut rng);
            p.value.add_assign(&noise).unwrap();
        }
        let x = sample(3, 4, &mut rng);
        m.zero_grad();
        let (y, cache) = m.forward(&x).unwrap();
        m.backward(&x, &cache, 2.0 * (y - 0.3)).unwrap();
        let names: Vec<String> = m.named_values().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Tensor<f64>> = m.clone().named_params_mut().into_iter().map(|(_, p)| p.grad.clone()).collect();
        let mut inputs: Vec<Tensor<f64>> = m.named_values().into_iter().map(|(_, v)| v).collect();
        let template = m.clone();
        let report = grad_check(
            &mut inputs,
            &analytic,
            |vals| {
                let mut probe = template.clone();
                for ((_, p), v) in probe.named_params_mut().into_iter().zip(vals) {
                    p.value = v.clone();
                }
                loss(&probe, &x)
            },
            1e-5,
            1e-3,
        );
        assert!(report.passed, "{variant}: {report:?} at {:?}", report.worst.map(|(i, j)| (&names[i], j)));
    }

    #[test]
    fn mmrnet_gradients() {
        end_to_end(Variant::Mmrnet);
    }

    #[test]
    fn transformer_gradients() {
        end_to_end(Variant::Transformer);
    }

    #[test]
    fn gru_gradients() {
        end_to_end(Variant::Gru);
    }

    #[test]
    fn mlp_gradients() {
        end_to_end(Variant::Mlp);
    }

    #[test]
    fn lr_gradients() {
        end_to_end(Variant::Lr);
    }

    #[test]
    fn zeroed_reducer_equals_plain_transformer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Model::<f64>::new(ModelConfig { layers: 3, ..tiny(Variant::Mmrnet) }, &mut rng).unwrap();
        m.omni_reducer_mut().unwrap().value.fill(0.0);
        let plain = m.without_omni();
        assert_eq!(plain.config.variant, Variant::Transformer);
        for t in 1..=3 {
            let x = sample(t, 4, &mut rng);
            let (a, _) = m.forward(&x).unwrap();
            let (b, _) = plain.forward(&x).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_features_and_positions_broadcast_the_lineup() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::<f64>::new(tiny(Variant::Mmrnet), &mut rng).unwrap();
        m.position_table_mut().unwrap().value.fill(0.0);
        let x = Prepared { feats: Tensor::zeros(&[3, 4]), own: vec![1, 2, 3], opp: vec![0, 4, 5] };
        let h = m.embed(&x).unwrap().unwrap();
        let Body::Stack { embed, .. } = &m.body else { unreachable!() };
        let lv = embed.lineup_vec(&x).unwrap();
        for t in 0..3 {
            assert_eq!(&h.row(t)[..3], lv.as_slice());
            assert!(h.row(t)[3..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn positions_make_slice_order_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::<f64>::new(tiny(Variant::Mmrnet), &mut rng).unwrap();
        let x = sample(3, 4, &mut rng);
        let mut swapped = x.clone();
        let (r0, r1) = (x.feats.row(0).to_vec(), x.feats.row(1).to_vec());
        swapped.feats.row_mut(0).copy_from_slice(&r1);
        swapped.feats.row_mut(1).copy_from_slice(&r0);
        let (a, b) = (m.embed(&x).unwrap().unwrap(), m.embed(&swapped).unwrap().unwrap());
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.omni_tokens(), 60);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::new(cfg, &mut rng).unwrap();
        let x = sample(12, 32, &mut rng);
        assert_eq!(m.embed(&x).unwrap().unwrap().shape(), &[12, 160]);
    }

    #[test]
    fn omni_with_identical_states_and_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Model::<f64>::new(ModelConfig { layers: 4, ..tiny(Variant::Mmrnet) }, &mut rng).unwrap();
        let s = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let (red, profile) = m.omni_attention(&[s.clone(), s.clone(), s.clone()]).unwrap().unwrap();
        // identical states attend identically: the reduced output equals the
        // single-state attention output
        let Body::Stack { omni: Some(o), .. } = &m.body else { unreachable!() };
        let (a, _) = o.ln.forward(&s).unwrap();
        let (single, _) = o.attn.forward(&a, None).unwrap();
        for (x, y) in red.data().iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((profile.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(profile.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn smallest_stack_has_one_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Model::<f64>::new(tiny(Variant::Mmrnet), &mut rng).unwrap();
        let s = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let (red, profile) = m.omni_attention(&[s]).unwrap().unwrap();
        assert_eq!(red.shape(), &[2, 8]);
        assert_eq!(profile.len(), 2);
    }

    #[test]
    fn attention_profile_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Model::<f64>::new(ModelConfig { layers: 3, ..tiny(Variant::Mmrnet) }, &mut rng).unwrap();
        let x = sample(3, 4, &mut rng);
        let (_, cache) = m.forward(&x).unwrap();
        let p = cache.attention_profile().unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let t = Model::<f64>::new(tiny(Variant::Transformer), &mut rng).unwrap();
        assert!(t.forward(&x).unwrap().1.attention_profile().is_none());
    }

    #[test]
    fn end_variant_sees_only_the_last_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Model::<f64>::new(tiny(Variant::MmrnetEnd), &mut rng).unwrap();
        let seq = SnapshotSequence {
            length: 3,
            features: vec![vec![1.0; 4], vec![2.0; 4], vec![3.0; 4]],
            lineup_ids: vec![vec![0, 1], vec![2, 3]],
        };
        let norm = Normalization { feature_mean: vec![0.0; 4], feature_std: vec![1.0; 4], label_mean: 0.0, label_std: 1.0 };
        let x = m.prepare(&seq, &norm).unwrap();
        assert_eq!(x.feats.shape(), &[1, 4]);
        assert_eq!(x.feats.row(0), &[3.0; 4]);
    }

    #[test]
    fn prepare_rejects_bad_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Model::<f64>::new(tiny(Variant::Mmrnet), &mut rng).unwrap();
        let norm = Normalization { feature_mean: vec![0.0; 4], feature_std: vec![1.0; 4], label_mean: 0.0, label_std: 1.0 };
        let seq = |len: usize, f: usize, id: u32| SnapshotSequence {
            length: len,
            features: vec![vec![0.5; f]; len],
            lineup_ids: vec![vec![id, 1], vec![2, 3]],
        };
        assert!(m.prepare(&seq(3, 4, 0), &norm).is_ok());
        assert!(matches!(m.prepare(&seq(4, 4, 0), &norm), Err(MmrNetError::SchemaMismatch(_))));
        assert!(matches!(m.prepare(&seq(2, 5, 0), &norm), Err(MmrNetError::SchemaMismatch(_))));
        assert!(matches!(m.prepare(&seq(2, 4, 6), &norm), Err(MmrNetError::UnknownCharacterId { id: 6, vocab: 6 })));
        let empty = Normalization { feature_mean: vec![], feature_std: vec![], label_mean: 0.0, label_std: 1.0 };
        assert!(matches!(m.prepare(&seq(2, 4, 0), &empty), Err(MmrNetError::NotNormalized)));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig { heads: 3, ..tiny(Variant::Mmrnet) };
        assert!(matches!(Model::<f64>::new(cfg, &mut rng), Err(MmrNetError::InvalidConfig(_))));
        let cfg = ModelConfig { layers: 1, ..tiny(Variant::Mmrnet) };
        assert!(Model::<f64>::new(cfg, &mut rng).is_err());
    }

    #[test]
    fn runs_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = Model::<f32>::new(tiny(Variant::Mmrnet), &mut rng).unwrap();
        let x = Prepared { feats: Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng), own: vec![0], opp: vec![1] };
        let (y, cache) = m.forward(&x).unwrap();
        assert!(y.is_finite());
        m.backward(&x, &cache, 1.0).unwrap();
    }
}
