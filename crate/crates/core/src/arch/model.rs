use std::path::Path;

use super::config::{ModelConfig, Variant, TIME_FREQ_DIM};
use super::patch::{patchify, timestep_embedding, unpatchify};
use crate::conditioning::CondBundle;
use crate::error::{dim_err, Error, Result};
use crate::layers::{
    attend, attend_backward, post_norm_residual, post_norm_residual_backward, pre_norm, pre_norm_backward,
    AdaLnParams, AttendCache, AttentionParams, Component, Grads, Init, KvCache, Layout, LinearParams, Mask,
    MlpCache, MlpParams, Modulation, NormProjCache, ParamId, ParamKind, ParamStore, PostNorm, PreNorm, RopeTable,
    Segment, Site, ROPE_BASE,
};
use crate::numerics::kernels::{layer_norm, layer_norm_backward, silu, silu_backward};
use crate::numerics::{read_checkpoint, write_checkpoint, Rng, Scalar, Tensor};

/// Attention and MLP weights applied to one residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamBlock {
    pub attn: AttentionParams,
    pub mlp: MlpParams,
}

/// Text cross-attention with a learned per-channel residual gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossBlock {
    pub attn: AttentionParams,
    pub gate: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// One entry per residual stream: `[image]` for PixArt, `[text, image]` otherwise.
    pub streams: Vec<StreamBlock>,
    pub cross: Option<CrossBlock>,
    pub adaln: AdaLnParams,
}

/// Parameter handles of a model. Shared weights appear as repeated ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub patch_embed: LinearParams,
    pub time_fc1: LinearParams,
    pub time_fc2: LinearParams,
    pub text_proj: LinearParams,
    pub pooled_proj: LinearParams,
    pub null_tokens: ParamId,
    pub null_pooled: ParamId,
    pub blocks: Vec<Block>,
    pub final_adaln: LinearParams,
    pub head: LinearParams,
}

fn stream_block(layout: &mut Layout, name: &str, d: usize, heads: usize) -> Result<StreamBlock> {
    Ok(StreamBlock {
        attn: AttentionParams::register(layout, &format!("{name}.attn"), d, heads, Component::SelfAttention)?,
        mlp: MlpParams::register(layout, &format!("{name}.mlp"), d),
    })
}

/// Shape-only description of a model: the canonical parameter list plus the
/// handles each layer uses. Cheap enough for any size preset.
pub fn build_layout(config: &ModelConfig) -> Result<(Layout, Plan)> {
    config.validate()?;
    let (d, heads, v) = (config.width, config.heads(), config.variant);
    let mut l = Layout::new();
    let emb = |l: &mut Layout, name: &str, i: usize, o: usize| {
        LinearParams::register(l, name, i, o, Component::Embedding, Init::Xavier)
    };
    let patch_embed = emb(&mut l, "patch_embed", config.patch_dim(), d);
    let time_fc1 = emb(&mut l, "time.fc1", TIME_FREQ_DIM, d);
    let time_fc2 = emb(&mut l, "time.fc2", d, d);
    let text_proj = emb(&mut l, "text_proj", config.cond_dim, d);
    let pooled_proj = emb(&mut l, "pooled_proj", config.cond_dim, d);
    let null_tokens = l.add(
        "null.tokens",
        &[config.text_len, config.cond_dim],
        Component::Embedding,
        ParamKind::Table,
        Init::Normal(0.02),
    );
    let null_pooled = l.add("null.pooled", &[config.cond_dim], Component::Embedding, ParamKind::Table, Init::Normal(0.02));

    let shared_adaln = v
        .shares_adaln()
        .then(|| AdaLnParams::register(&mut l, "adaln", d, v.adaln_streams()));
    let shared_full = match v {
        Variant::DitAirLiteFull => Some(stream_block(&mut l, "shared", d, heads)?),
        _ => None,
    };
    let shared_attn = match v {
        Variant::DitAirLiteAttention => Some(AttentionParams::register(
            &mut l,
            "shared.attn",
            d,
            heads,
            Component::SelfAttention,
        )?),
        _ => None,
    };

    let mut blocks = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = format!("blocks.{i}");
        let adaln = match &shared_adaln {
            Some(a) => a.clone(),
            None => AdaLnParams::register(&mut l, &format!("{p}.adaln"), d, v.adaln_streams()),
        };
        let (streams, cross) = match v {
            Variant::Pixart => {
                let sb = stream_block(&mut l, &p, d, heads)?;
                let attn = AttentionParams::register(&mut l, &format!("{p}.cross"), d, heads, Component::CrossAttention)?;
                let gate = l.add(
                    format!("{p}.cross.gate"),
                    &[d],
                    Component::CrossAttention,
                    ParamKind::Gain,
                    Init::Zeros,
                );
                (vec![sb], Some(CrossBlock { attn, gate }))
            }
            Variant::Mmdit | Variant::MmditSharedAdaln => (
                vec![
                    stream_block(&mut l, &format!("{p}.text"), d, heads)?,
                    stream_block(&mut l, &format!("{p}.image"), d, heads)?,
                ],
                None,
            ),
            Variant::DitAir => {
                let sb = stream_block(&mut l, &p, d, heads)?;
                (vec![sb, sb], None)
            }
            Variant::DitAirLiteFull => {
                let sb = shared_full.expect("registered above");
                (vec![sb, sb], None)
            }
            Variant::DitAirLiteAttention => {
                let sb = StreamBlock {
                    attn: shared_attn.expect("registered above"),
                    mlp: MlpParams::register(&mut l, &format!("{p}.mlp"), d),
                };
                (vec![sb, sb], None)
            }
        };
        blocks.push(Block { streams, cross, adaln });
    }
    let final_adaln = LinearParams::register(&mut l, "final.adaln", d, 2 * d, Component::Head, Init::Zeros);
    let head = LinearParams::register(&mut l, "final.head", d, config.patch_dim(), Component::Head, Init::Zeros);
    Ok((
        l,
        Plan {
            patch_embed,
            time_fc1,
            time_fc2,
            text_proj,
            pooled_proj,
            null_tokens,
            null_pooled,
            blocks,
            final_adaln,
            head,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    plan: Plan,
    store: ParamStore<T>,
}

#[derive(Clone, Debug)]
struct AttnStream<T: Scalar> {
    pre: PreNorm<T>,
    h: Tensor<T>,
    qc: NormProjCache<T>,
    kc: KvCache<T>,
    ctx: Tensor<T>,
    post: PostNorm<T>,
}

#[derive(Clone, Debug)]
struct CrossCache<T: Scalar> {
    normed: Tensor<T>,
    rstd: Vec<T>,
    qc: NormProjCache<T>,
    kc: KvCache<T>,
    att: AttendCache<T>,
    ctx: Tensor<T>,
    post: Tensor<T>,
    post_rstd: Vec<T>,
}

#[derive(Clone, Debug)]
struct MlpStream<T: Scalar> {
    pre: PreNorm<T>,
    mc: MlpCache<T>,
    post: PostNorm<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T: Scalar> {
    attn: Vec<AttnStream<T>>,
    att: AttendCache<T>,
    cross: Option<CrossCache<T>>,
    mlp: Vec<MlpStream<T>>,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    batch: usize,
    latent: [usize; 3],
    tokens: Vec<usize>,
    rope: RopeTable<T>,
    patches: Tensor<T>,
    sinus: Tensor<T>,
    t1: Tensor<T>,
    a1: Tensor<T>,
    text_raw: Tensor<T>,
    pooled_raw: Tensor<T>,
    null_mask: Vec<bool>,
    text: Tensor<T>,
    c: Tensor<T>,
    s: Tensor<T>,
    mods: Vec<(LinearParams, Modulation<T>)>,
    blocks: Vec<BlockCache<T>>,
    final_normed: Tensor<T>,
    final_rstd: Vec<T>,
    final_mod: Tensor<T>,
    final_h: Tensor<T>,
}

fn segments<'a, T: Scalar>(ts: &'a [Tensor<T>], tokens: &[usize]) -> Vec<Segment<'a, T>> {
    ts.iter().zip(tokens).map(|(t, &n)| Segment::new(t, n)).collect()
}

fn find_mod<T: Scalar>(mods: &[(LinearParams, Modulation<T>)], key: LinearParams) -> usize {
    mods.iter().position(|(k, _)| *k == key).expect("modulation computed in forward")
}

/// `hn * (1 + scale) + shift` with `fm = [shift | scale]` per sample.
fn head_modulate<T: Scalar>(hn: &Tensor<T>, fm: &Tensor<T>, tokens: usize, d: usize) -> Tensor<T> {
    let mut out = hn.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let m = fm.row(r / tokens);
        for j in 0..d {
            row[j] = row[j] * (T::one() + m[d + j]) + m[j];
        }
    }
    out
}

fn head_modulate_backward<T: Scalar>(
    hn: &Tensor<T>,
    fm: &Tensor<T>,
    dh: &Tensor<T>,
    tokens: usize,
    d: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut dhn = dh.clone();
    let mut dfm = Tensor::zeros(fm.shape());
    for r in 0..dh.shape()[0] {
        let b = r / tokens;
        for j in 0..d {
            let g = dh.row(r)[j];
            dhn.row_mut(r)[j] = g * (T::one() + fm.row(b)[d + j]);
            dfm.row_mut(b)[j] += g;
            dfm.row_mut(b)[d + j] += g * hn.row(r)[j];
        }
    }
    (dhn, dfm)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        let (layout, plan) = build_layout(config)?;
        Ok(Self {
            config: config.clone(),
            plan,
            store: ParamStore::materialize(layout, rng),
        })
    }

    /// Wraps existing parameter values. The store layout must be the canonical
    /// layout of `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let (layout, plan) = build_layout(config)?;
        if store.layout().len() != layout.len()
            || store
                .layout()
                .specs()
                .iter()
                .zip(layout.specs())
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(dim_err!("parameter store does not match the {} layout", config.variant));
        }
        Ok(Self {
            config: config.clone(),
            plan,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        self.store.layout()
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            store: self.store.cast(),
        }
    }

    /// The learned unconditional embedding as a bundle.
    pub fn null_condition(&self) -> CondBundle<T> {
        CondBundle {
            tokens: self.store.get(self.plan.null_tokens).clone(),
            pooled: self.store.get(self.plan.null_pooled).clone(),
            is_null: true,
        }
    }

    /// Prediction for one latent `[C, H, W]`.
    pub fn forward(&self, z: &Tensor<T>, cond: &CondBundle<T>, t: T) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let zb = z.clone().reshape(&shape)?;
        let out = self.forward_batch(&zb, std::slice::from_ref(cond), &[t])?;
        out.reshape(z.shape())
    }

    /// Predictions for a batch `[B, C, H, W]`.
    pub fn forward_batch(&self, z: &Tensor<T>, conds: &[CondBundle<T>], t: &[T]) -> Result<Tensor<T>> {
        self.forward_train(z, conds, t).map(|(y, _)| y)
    }

    fn gather_conditions(&self, conds: &[CondBundle<T>]) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>)> {
        let (l, dc) = (self.config.text_len, self.config.cond_dim);
        let mut text = Vec::with_capacity(conds.len() * l * dc);
        let mut pooled = Vec::with_capacity(conds.len() * dc);
        let null_t = self.store.get(self.plan.null_tokens);
        let null_p = self.store.get(self.plan.null_pooled);
        for c in conds {
            if c.is_null {
                text.extend_from_slice(null_t.data());
                pooled.extend_from_slice(null_p.data());
                continue;
            }
            if c.tokens.shape() != [l, dc] || c.pooled.shape() != [dc] {
                return Err(dim_err!(
                    "condition tokens {:?} / pooled {:?}, model expects [{l}, {dc}] / [{dc}]",
                    c.tokens.shape(),
                    c.pooled.shape()
                ));
            }
            text.extend_from_slice(c.tokens.data());
            pooled.extend_from_slice(c.pooled.data());
        }
        Ok((
            Tensor::new(&[conds.len() * l, dc], text)?,
            Tensor::new(&[conds.len(), dc], pooled)?,
            conds.iter().map(|c| c.is_null).collect(),
        ))
    }

    pub fn forward_train(&self, z: &Tensor<T>, conds: &[CondBundle<T>], t: &[T]) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let st = &self.store;
        let plan = &self.plan;
        let [batch, ch, h, w] = match z.shape() {
            [b, c, h, w] => [*b, *c, *h, *w],
            s => return Err(dim_err!("expected [batch, channels, height, width], got {s:?}")),
        };
        if ch != cfg.latent_channels {
            return Err(dim_err!("latent has {ch} channels, model expects {}", cfg.latent_channels));
        }
        if conds.len() != batch || t.len() != batch {
            return Err(dim_err!("batch {batch} with {} conditions and {} timesteps", conds.len(), t.len()));
        }
        let (gh, gw) = (h / cfg.patch, w / cfg.patch);
        let n_img = gh * gw;
        let l = cfg.text_len;
        let d = cfg.width;

        let patches = patchify(z, cfg.patch)?;
        let x_img = plan.patch_embed.forward(st, &patches)?;
        let sinus = timestep_embedding(t, TIME_FREQ_DIM);
        let t1 = plan.time_fc1.forward(st, &sinus)?;
        let a1 = silu(&t1);
        let temb = plan.time_fc2.forward(st, &a1)?;
        let (text_raw, pooled_raw, null_mask) = self.gather_conditions(conds)?;
        let text = plan.text_proj.forward(st, &text_raw)?;
        let mut c = temb;
        if cfg.use_pooled {
            let pp = plan.pooled_proj.forward(st, &pooled_raw)?;
            c.axpy(T::one(), &pp)?;
        }
        let s = silu(&c);

        let mut mods: Vec<(LinearParams, Modulation<T>)> = Vec::new();
        for block in &plan.blocks {
            for (i, lin) in block.adaln.streams.iter().enumerate() {
                if !mods.iter().any(|(k, _)| k == lin) {
                    mods.push((*lin, block.adaln.modulation(st, &s, i)?));
                }
            }
        }

        let rope = RopeTable::<T>::grid(cfg.head_dim(), gh, gw, ROPE_BASE)?;
        let (mut xs, tokens): (Vec<Tensor<T>>, Vec<usize>) = if cfg.variant.is_joint() {
            (vec![text.clone(), x_img], vec![l, n_img])
        } else {
            (vec![x_img], vec![n_img])
        };
        let img = xs.len() - 1;
        let ropes: Vec<Option<&RopeTable<T>>> = (0..xs.len()).map(|i| (i == img).then_some(&rope)).collect();

        let mut block_caches = Vec::with_capacity(plan.blocks.len());
        for block in &plan.blocks {
            let m: Vec<&Modulation<T>> = block
                .adaln
                .streams
                .iter()
                .map(|lin| &mods[find_mod(&mods, *lin)].1)
                .collect();

            let mut qs = Vec::new();
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            let mut partial = Vec::new();
            for (i, sb) in block.streams.iter().enumerate() {
                let (hh, pre) = pre_norm(&xs[i], m[i], tokens[i], Site::Attention)?;
                let (q, qc) = sb.attn.project_q(st, &hh, ropes[i])?;
                let (k, v, kc) = sb.attn.project_kv(st, &hh, ropes[i])?;
                qs.push(q);
                ks.push(k);
                vs.push(v);
                partial.push((pre, hh, qc, kc));
            }
            let (ctxs, att) = attend(
                &segments(&qs, &tokens),
                &segments(&ks, &tokens),
                &segments(&vs, &tokens),
                cfg.heads(),
                Mask::None,
            )?;
            let mut attn_caches = Vec::with_capacity(xs.len());
            for (i, ((pre, hh, qc, kc), ctx)) in partial.into_iter().zip(ctxs).enumerate() {
                let a = block.streams[i].attn.o.forward(st, &ctx)?;
                let post = post_norm_residual(&mut xs[i], &a, m[i], tokens[i], Site::Attention)?;
                attn_caches.push(AttnStream {
                    pre,
                    h: hh,
                    qc,
                    kc,
                    ctx,
                    post,
                });
            }

            let cross = match &block.cross {
                None => None,
                Some(cb) => {
                    let x = &mut xs[img];
                    let (normed, rstd) = layer_norm(x)?;
                    let (q, qc) = cb.attn.project_q(st, &normed, None)?;
                    let (k, v, kc) = cb.attn.project_kv(st, &text, None)?;
                    let (mut ctxs, att) = attend(
                        &[Segment::new(&q, n_img)],
                        &[Segment::new(&k, l)],
                        &[Segment::new(&v, l)],
                        cfg.heads(),
                        Mask::None,
                    )?;
                    let ctx = ctxs.remove(0);
                    let a = cb.attn.o.forward(st, &ctx)?;
                    let (post, post_rstd) = layer_norm(&a)?;
                    let gate = st.get(cb.gate).data();
                    for (xr, pr) in x.data_mut().chunks_exact_mut(d).zip(post.data().chunks_exact(d)) {
                        for ((xv, &pv), &g) in xr.iter_mut().zip(pr).zip(gate) {
                            *xv += g * pv;
                        }
                    }
                    Some(CrossCache {
                        normed,
                        rstd,
                        qc,
                        kc,
                        att,
                        ctx,
                        post,
                        post_rstd,
                    })
                }
            };

            let mut mlp_caches = Vec::with_capacity(xs.len());
            for (i, sb) in block.streams.iter().enumerate() {
                let (hh, pre) = pre_norm(&xs[i], m[i], tokens[i], Site::Mlp)?;
                let (y, mc) = sb.mlp.forward(st, &hh)?;
                let post = post_norm_residual(&mut xs[i], &y, m[i], tokens[i], Site::Mlp)?;
                mlp_caches.push(MlpStream { pre, mc, post });
            }
            block_caches.push(BlockCache {
                attn: attn_caches,
                att,
                cross,
                mlp: mlp_caches,
            });
        }

        let (final_normed, final_rstd) = layer_norm(&xs[img])?;
        let final_mod = plan.final_adaln.forward(st, &s)?;
        let final_h = head_modulate(&final_normed, &final_mod, n_img, d);
        let out_tokens = plan.head.forward(st, &final_h)?;
        let out = unpatchify(&out_tokens, batch, ch, h, w, cfg.patch)?;
        out.check_finite("model output")?;

        let cache = ForwardCache {
            batch,
            latent: [ch, h, w],
            tokens,
            rope,
            patches,
            sinus,
            t1,
            a1,
            text_raw,
            pooled_raw,
            null_mask,
            text,
            c,
            s,
            mods,
            blocks: block_caches,
            final_normed,
            final_rstd,
            final_mod,
            final_h,
        };
        Ok((out, cache))
    }

    /// Gradients of `<dout, forward(...)>` with respect to every parameter,
    /// plus the gradient with respect to the input latent.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &Tensor<T>) -> Result<(Grads<T>, Tensor<T>)> {
        let cfg = &self.config;
        let st = &self.store;
        let plan = &self.plan;
        let [ch, h, w] = cache.latent;
        if dout.shape() != [cache.batch, ch, h, w] {
            return Err(dim_err!("output gradient shape {:?} does not match forward", dout.shape()));
        }
        let mut g = Grads::zeros_like(st);
        let d = cfg.width;
        let tokens = &cache.tokens;
        let img = tokens.len() - 1;
        let n_img = tokens[img];
        let l = cfg.text_len;
        let ropes: Vec<Option<&RopeTable<T>>> = (0..tokens.len()).map(|i| (i == img).then_some(&cache.rope)).collect();

        let dtok = patchify(dout, cfg.patch)?;
        let dfh = plan.head.backward(st, &mut g, &cache.final_h, &dtok)?;
        let (dfn, dfm) = head_modulate_backward(&cache.final_normed, &cache.final_mod, &dfh, n_img, d);
        let mut ds = plan.final_adaln.backward(st, &mut g, &cache.s, &dfm)?;

        let mut dxs: Vec<Tensor<T>> = tokens.iter().map(|&n| Tensor::zeros(&[cache.batch * n, d])).collect();
        dxs[img] = layer_norm_backward(&cache.final_normed, &cache.final_rstd, &dfn)?;
        let mut dtext_cross = Tensor::zeros(&[cache.batch * l, d]);
        let mut dmods: Vec<Tensor<T>> = cache.mods.iter().map(|(_, m)| m.zeros_grad()).collect();

        for (block, bc) in plan.blocks.iter().zip(&cache.blocks).rev() {
            let mi: Vec<usize> = block.adaln.streams.iter().map(|lin| find_mod(&cache.mods, *lin)).collect();

            for (i, sb) in block.streams.iter().enumerate() {
                let m = &cache.mods[mi[i]].1;
                let mc = &bc.mlp[i];
                let dy = post_norm_residual_backward(&mc.post, m, &dxs[i], tokens[i], Site::Mlp, &mut dmods[mi[i]])?;
                let dh = sb.mlp.backward(st, &mut g, &mc.mc, &dy)?;
                let dx = pre_norm_backward(&mc.pre, m, &dh, tokens[i], Site::Mlp, &mut dmods[mi[i]])?;
                dxs[i].axpy(T::one(), &dx)?;
            }

            if let (Some(cb), Some(cc)) = (&block.cross, &bc.cross) {
                let gate = st.get(cb.gate).data().to_vec();
                let mut dpost = dxs[img].clone();
                {
                    let dgate = g.get_mut(cb.gate).data_mut();
                    for (dr, pr) in dpost.data_mut().chunks_exact_mut(d).zip(cc.post.data().chunks_exact(d)) {
                        for j in 0..d {
                            dgate[j] += dr[j] * pr[j];
                            dr[j] *= gate[j];
                        }
                    }
                }
                let da = layer_norm_backward(&cc.post, &cc.post_rstd, &dpost)?;
                let dctx = cb.attn.o.backward(st, &mut g, &cc.ctx, &da)?;
                let ag = attend_backward(&cc.att, &[&dctx])?;
                let dn = cb.attn.project_q_backward(st, &mut g, &cc.normed, &cc.qc, None, &ag.dq[0])?;
                let dx = layer_norm_backward(&cc.normed, &cc.rstd, &dn)?;
                dxs[img].axpy(T::one(), &dx)?;
                let dt = cb
                    .attn
                    .project_kv_backward(st, &mut g, &cache.text, &cc.kc, None, &ag.dk[0], &ag.dv[0])?;
                dtext_cross.axpy(T::one(), &dt)?;
            }

            let mut dctxs = Vec::with_capacity(tokens.len());
            for (i, sb) in block.streams.iter().enumerate() {
                let m = &cache.mods[mi[i]].1;
                let ac = &bc.attn[i];
                let da = post_norm_residual_backward(&ac.post, m, &dxs[i], tokens[i], Site::Attention, &mut dmods[mi[i]])?;
                dctxs.push(sb.attn.o.backward(st, &mut g, &ac.ctx, &da)?);
            }
            let ag = attend_backward(&bc.att, &dctxs.iter().collect::<Vec<_>>())?;
            for (i, sb) in block.streams.iter().enumerate() {
                let m = &cache.mods[mi[i]].1;
                let ac = &bc.attn[i];
                let mut dh = sb.attn.project_q_backward(st, &mut g, &ac.h, &ac.qc, ropes[i], &ag.dq[i])?;
                let dkv = sb
                    .attn
                    .project_kv_backward(st, &mut g, &ac.h, &ac.kc, ropes[i], &ag.dk[i], &ag.dv[i])?;
                dh.axpy(T::one(), &dkv)?;
                let dx = pre_norm_backward(&ac.pre, m, &dh, tokens[i], Site::Attention, &mut dmods[mi[i]])?;
                dxs[i].axpy(T::one(), &dx)?;
            }
        }

        for ((lin, _), dm) in cache.mods.iter().zip(&dmods) {
            let dsi = lin.backward(st, &mut g, &cache.s, dm)?;
            ds.axpy(T::one(), &dsi)?;
        }

        let dtext = if cfg.variant.is_joint() { dxs[0].clone() } else { dtext_cross };
        let dtext_raw = plan.text_proj.backward(st, &mut g, &cache.text_raw, &dtext)?;
        let dpatches = plan.patch_embed.backward(st, &mut g, &cache.patches, &dxs[img])?;
        let dz = unpatchify(&dpatches, cache.batch, ch, h, w, cfg.patch)?;

        let dc = silu_backward(&cache.c, &ds);
        let dpooled_raw = if cfg.use_pooled {
            Some(plan.pooled_proj.backward(st, &mut g, &cache.pooled_raw, &dc)?)
        } else {
            None
        };
        let da1 = plan.time_fc2.backward(st, &mut g, &cache.a1, &dc)?;
        let dt1 = silu_backward(&cache.t1, &da1);
        plan.time_fc1.backward(st, &mut g, &cache.sinus, &dt1)?;

        let dc_len = cfg.cond_dim;
        for (b, _) in cache.null_mask.iter().enumerate().filter(|(_, &n)| n) {
            let rows = &dtext_raw.data()[b * l * dc_len..(b + 1) * l * dc_len];
            g.get_mut(plan.null_tokens)
                .data_mut()
                .iter_mut()
                .zip(rows)
                .for_each(|(a, &v)| *a += v);
            if let Some(dp) = &dpooled_raw {
                g.get_mut(plan.null_pooled)
                    .data_mut()
                    .iter_mut()
                    .zip(dp.row(b))
                    .for_each(|(a, &v)| *a += v);
            }
        }
        Ok((g, dz))
    }
}

impl Model<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.store.iter().map(|(s, t)| (s.name.as_str(), t)))
    }

    /// Loads a checkpoint written by [`Model::save`] for the same config.
    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let (layout, plan) = build_layout(config)?;
        let entries = read_checkpoint(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if entries.len() != layout.len() {
            return Err(bad(format!("{} tensors, layout has {}", entries.len(), layout.len())));
        }
        let mut values = Vec::with_capacity(entries.len());
        for (spec, e) in layout.specs().iter().zip(entries) {
            if spec.name != e.name || spec.shape != e.tensor.shape() {
                return Err(bad(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    e.name,
                    e.tensor.shape()
                )));
            }
            values.push(e.tensor);
        }
        Ok(Self {
            config: config.clone(),
            plan,
            store: ParamStore::from_parts(layout, values)?,
        })
    }
}
