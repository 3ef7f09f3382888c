//! Multi-head attention with per-head QK RMS-norm and optional rotary
//! embeddings.
//!
//! The pieces are kept separate so joint attention can project each stream
//! with its own weights and then attend over the concatenation:
//! [`AttentionParams::project_q`] / [`AttentionParams::project_kv`] produce
//! normalized, rotated rows; [`attend`] gathers per-sample sequences from
//! several segments and runs scaled dot-product attention head by head.

use super::params::{Component, Grads, Layout, LinearParams, ParamId, ParamKind, ParamStore, Init};
use super::rope::RopeTable;
use crate::error::{dim_err, Result};
use crate::numerics::kernels::{
    gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, rms_norm_rows, rms_norm_rows_backward, softmax_rows,
    softmax_rows_backward,
};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mask {
    #[default]
    None,
    /// Query `i` sees keys `0..=i` of the joint sequence.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub q_gain: ParamId,
    pub k_gain: ParamId,
    pub heads: usize,
    pub width: usize,
}

/// Saved state of one Q or K projection: the linear input and the RMS-norm
/// intermediates.
#[derive(Clone, Debug)]
pub struct NormProjCache<T: Scalar> {
    normed: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct KvCache<T: Scalar> {
    k: NormProjCache<T>,
}

impl AttentionParams {
    pub fn register(layout: &mut Layout, name: &str, width: usize, heads: usize, component: Component) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(dim_err!("width {width} not divisible by {heads} heads"));
        }
        let hd = width / heads;
        let lin = |layout: &mut Layout, s: &str| {
            LinearParams::register(layout, &format!("{name}.{s}"), width, width, component, Init::Xavier)
        };
        let q = lin(layout, "q");
        let k = lin(layout, "k");
        let v = lin(layout, "v");
        let o = lin(layout, "o");
        let q_gain = layout.add(format!("{name}.q_norm"), &[hd], component, ParamKind::Gain, Init::Ones);
        let k_gain = layout.add(format!("{name}.k_norm"), &[hd], component, ParamKind::Gain, Init::Ones);
        Ok(Self {
            q,
            k,
            v,
            o,
            q_gain,
            k_gain,
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn check_width<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, w) = x.dims2()?;
        if w != self.width {
            return Err(dim_err!("attention expects width {}, got {w}", self.width));
        }
        Ok(())
    }

    fn norm_rope<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        raw: Tensor<T>,
        gain: ParamId,
        rope: Option<&RopeTable<T>>,
    ) -> (Tensor<T>, NormProjCache<T>) {
        let mut out = raw.clone();
        let (normed, rstd) = rms_norm_rows(raw.data(), store.get(gain).data(), out.data_mut());
        if let Some(r) = rope {
            r.apply_rows(out.data_mut(), self.width, false);
        }
        (out, NormProjCache { normed, rstd })
    }

    fn norm_rope_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &NormProjCache<T>,
        gain: ParamId,
        rope: Option<&RopeTable<T>>,
        dout: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut d = dout.clone();
        if let Some(r) = rope {
            r.apply_rows(d.data_mut(), self.width, true);
        }
        let draw = rms_norm_rows_backward(
            &cache.normed,
            &cache.rstd,
            store.get(gain).data(),
            d.data(),
            grads.get_mut(gain).data_mut(),
        );
        Tensor::new(dout.shape(), draw)
    }

    /// Normalized and rotated queries for rows `x`.
    pub fn project_q<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        rope: Option<&RopeTable<T>>,
    ) -> Result<(Tensor<T>, NormProjCache<T>)> {
        self.check_width(x)?;
        let raw = self.q.forward(store, x)?;
        Ok(self.norm_rope(store, raw, self.q_gain, rope))
    }

    pub fn project_q_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        cache: &NormProjCache<T>,
        rope: Option<&RopeTable<T>>,
        dq: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let draw = self.norm_rope_backward(store, grads, cache, self.q_gain, rope, dq)?;
        self.q.backward(store, grads, x, &draw)
    }

    /// Normalized and rotated keys plus values for rows `x`.
    pub fn project_kv<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        rope: Option<&RopeTable<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, KvCache<T>)> {
        self.check_width(x)?;
        let raw = self.k.forward(store, x)?;
        let (k, kc) = self.norm_rope(store, raw, self.k_gain, rope);
        let v = self.v.forward(store, x)?;
        Ok((k, v, KvCache { k: kc }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn project_kv_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        cache: &KvCache<T>,
        rope: Option<&RopeTable<T>>,
        dk: &Tensor<T>,
        dv: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dkraw = self.norm_rope_backward(store, grads, &cache.k, self.k_gain, rope, dk)?;
        let mut dx = self.k.backward(store, grads, x, &dkraw)?;
        let dxv = self.v.backward(store, grads, x, dv)?;
        dx.axpy(T::one(), &dxv)?;
        Ok(dx)
    }
}

/// Rows of one stream inside a batched sequence: `data` is
/// `(batch * tokens) × width` and sample `b` owns rows `b*tokens..(b+1)*tokens`.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a, T: Scalar> {
    pub data: &'a Tensor<T>,
    pub tokens: usize,
}

impl<'a, T: Scalar> Segment<'a, T> {
    pub fn new(data: &'a Tensor<T>, tokens: usize) -> Self {
        Self { data, tokens }
    }
}

#[derive(Clone, Debug)]
pub struct AttendCache<T: Scalar> {
    batch: usize,
    heads: usize,
    hd: usize,
    lq: usize,
    lk: usize,
    q_tokens: Vec<usize>,
    k_tokens: Vec<usize>,
    /// Per `(b, h)`: head-major `lq × hd`, `lk × hd`, `lk × hd`, `lq × lk`.
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    p: Vec<Vec<T>>,
}

impl<T: Scalar> AttendCache<T> {
    /// Attention probabilities `lq × lk` for sample `b`, head `h`.
    pub fn probs(&self, b: usize, h: usize) -> &[T] {
        &self.p[b * self.heads + h]
    }
}

fn segments_layout<T: Scalar>(segs: &[Segment<'_, T>], width: usize) -> Result<(usize, usize)> {
    if segs.is_empty() {
        return Err(dim_err!("attention needs at least one segment"));
    }
    let batch = match segs.iter().find(|s| s.tokens > 0) {
        Some(s) => s.data.dims2()?.0 / s.tokens,
        None => 0,
    };
    let mut total = 0;
    for s in segs {
        let (r, w) = s.data.dims2()?;
        if w != width {
            return Err(dim_err!("segment width {w} differs from {width}"));
        }
        if r != batch * s.tokens {
            return Err(dim_err!("segment has {r} rows, expected {} x {}", batch, s.tokens));
        }
        total += s.tokens;
    }
    Ok((batch, total))
}

/// Copies head `h` of sample `b` from the concatenated segments into a
/// contiguous `L × hd` block.
fn gather_head<T: Scalar>(segs: &[Segment<'_, T>], b: usize, h: usize, hd: usize, out: &mut Vec<T>) {
    out.clear();
    for s in segs {
        let (_, width) = (s.data.shape()[0], s.data.shape()[1]);
        for t in 0..s.tokens {
            let row = &s.data.data()[(b * s.tokens + t) * width..][..width];
            out.extend_from_slice(&row[h * hd..(h + 1) * hd]);
        }
    }
}

fn scatter_head<T: Scalar>(src: &[T], outs: &mut [Tensor<T>], tokens: &[usize], b: usize, h: usize, hd: usize) {
    let mut j = 0;
    for (o, &n) in outs.iter_mut().zip(tokens) {
        let width = o.shape()[1];
        for t in 0..n {
            let row = &mut o.data_mut()[(b * n + t) * width..][..width];
            for (dst, &s) in row[h * hd..(h + 1) * hd].iter_mut().zip(&src[j * hd..(j + 1) * hd]) {
                *dst += s;
            }
            j += 1;
        }
    }
}

/// Scaled dot-product attention of the concatenated query segments over the
/// concatenated key/value segments, sample by sample. Returns one output per
/// query segment, shaped like that segment.
pub fn attend<T: Scalar>(
    q: &[Segment<'_, T>],
    k: &[Segment<'_, T>],
    v: &[Segment<'_, T>],
    heads: usize,
    mask: Mask,
) -> Result<(Vec<Tensor<T>>, AttendCache<T>)> {
    let width = q.first().map(|s| s.data.shape().get(1).copied().unwrap_or(0)).unwrap_or(0);
    if heads == 0 || width % heads != 0 {
        return Err(dim_err!("width {width} not divisible by {heads} heads"));
    }
    let hd = width / heads;
    let (batch, lq) = segments_layout(q, width)?;
    let (kb, lk) = segments_layout(k, width)?;
    let (vb, lv) = segments_layout(v, width)?;
    if kb != batch || vb != batch || lv != lk || k.len() != v.len() {
        return Err(dim_err!("query, key and value segments disagree on batch or length"));
    }
    if mask == Mask::Causal && lq != lk {
        return Err(dim_err!("causal mask needs a square attention pattern"));
    }
    let q_tokens: Vec<usize> = q.iter().map(|s| s.tokens).collect();
    let mut outs: Vec<Tensor<T>> = q.iter().map(|s| Tensor::zeros(s.data.shape())).collect();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let n = batch * heads;
    let (mut cq, mut ck, mut cv, mut cp) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut o = vec![T::zero(); lq * hd];
    for b in 0..batch {
        for h in 0..heads {
            let (mut qh, mut kh, mut vh) = (Vec::new(), Vec::new(), Vec::new());
            gather_head(q, b, h, hd, &mut qh);
            gather_head(k, b, h, hd, &mut kh);
            gather_head(v, b, h, hd, &mut vh);
            let mut s = vec![T::zero(); lq * lk];
            gemm_a_bt_acc(lq, hd, lk, &qh, &kh, &mut s);
            s.iter_mut().for_each(|x| *x *= scale);
            let p = softmax_rows(&s, lq, lk, mask == Mask::Causal);
            o.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(lq, lk, hd, &p, &vh, &mut o);
            scatter_head(&o, &mut outs, &q_tokens, b, h, hd);
            cq.push(qh);
            ck.push(kh);
            cv.push(vh);
            cp.push(p);
        }
    }
    let cache = AttendCache {
        batch,
        heads,
        hd,
        lq,
        lk,
        q_tokens,
        k_tokens: k.iter().map(|s| s.tokens).collect(),
        q: cq,
        k: ck,
        v: cv,
        p: cp,
    };
    Ok((outs, cache))
}

/// Gradients with respect to the query, key and value segments.
pub struct AttendGrads<T: Scalar> {
    pub dq: Vec<Tensor<T>>,
    pub dk: Vec<Tensor<T>>,
    pub dv: Vec<Tensor<T>>,
}

pub fn attend_backward<T: Scalar>(cache: &AttendCache<T>, dout: &[&Tensor<T>]) -> Result<AttendGrads<T>> {
    if dout.len() != cache.q_tokens.len() {
        return Err(dim_err!("{} output gradients for {} segments", dout.len(), cache.q_tokens.len()));
    }
    let width = cache.heads * cache.hd;
    let (lq, lk, hd) = (cache.lq, cache.lk, cache.hd);
    let shape = |n: usize| [cache.batch * n, width];
    let mut dq: Vec<Tensor<T>> = cache.q_tokens.iter().map(|&n| Tensor::zeros(&shape(n))).collect();
    let mut dk: Vec<Tensor<T>> = cache.k_tokens.iter().map(|&n| Tensor::zeros(&shape(n))).collect();
    let mut dv = dk.clone();
    let dsegs: Vec<Segment<'_, T>> = dout
        .iter()
        .zip(&cache.q_tokens)
        .map(|(d, &n)| Segment::new(d, n))
        .collect();
    segments_layout(&dsegs, width)?;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut doh = Vec::new();
    for b in 0..cache.batch {
        for h in 0..cache.heads {
            let i = b * cache.heads + h;
            gather_head(&dsegs, b, h, hd, &mut doh);
            let p = &cache.p[i];
            let mut dvh = vec![T::zero(); lk * hd];
            gemm_at_b_acc(lq, lk, hd, p, &doh, &mut dvh);
            let mut dp = vec![T::zero(); lq * lk];
            gemm_a_bt_acc(lq, hd, lk, &doh, &cache.v[i], &mut dp);
            let mut ds = softmax_rows_backward(p, &dp, lq, lk);
            ds.iter_mut().for_each(|x| *x *= scale);
            let mut dqh = vec![T::zero(); lq * hd];
            gemm_acc(lq, lk, hd, &ds, &cache.k[i], &mut dqh);
            let mut dkh = vec![T::zero(); lk * hd];
            gemm_at_b_acc(lq, lk, hd, &ds, &cache.q[i], &mut dkh);
            scatter_head(&dqh, &mut dq, &cache.q_tokens, b, h, hd);
            scatter_head(&dkh, &mut dk, &cache.k_tokens, b, h, hd);
            scatter_head(&dvh, &mut dv, &cache.k_tokens, b, h, hd);
        }
    }
    Ok(AttendGrads { dq, dk, dv })
}

/// Single-sample multi-head attention: project, normalize, rotate, attend,
/// then apply the output projection.
pub fn mha<T: Scalar>(
    store: &ParamStore<T>,
    params: &AttentionParams,
    q_tokens: &Tensor<T>,
    kv_tokens: &Tensor<T>,
    q_rope: Option<&RopeTable<T>>,
    kv_rope: Option<&RopeTable<T>>,
    mask: Mask,
) -> Result<(Tensor<T>, AttendCache<T>)> {
    let (lq, _) = q_tokens.dims2()?;
    let (lk, _) = kv_tokens.dims2()?;
    let (q, _) = params.project_q(store, q_tokens, q_rope)?;
    let (k, v, _) = params.project_kv(store, kv_tokens, kv_rope)?;
    let (mut outs, cache) = attend(
        &[Segment::new(&q, lq)],
        &[Segment::new(&k, lk)],
        &[Segment::new(&v, lk)],
        params.heads,
        mask,
    )?;
    let y = params.o.forward(store, &outs.remove(0))?;
    Ok((y, cache))
}
