//! Toy convolutional VAE with latent-channel widening.
//!
//! Images are single-channel `s × s`; two stride-2 convolutions compress
//! space 4×. The latent head emits `[mean | logvar]` with `c` channels each,
//! and the decoder mirrors the encoder with nearest-neighbour upsampling.
//! [`widen_latent`] swaps the two latent-adjacent convolutions for wider ones
//! so training can continue at a larger channel count.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, numeric_err, Error, Result};
use crate::numerics::conv::{conv2d, conv2d_backward, upsample_nearest, upsample_nearest_backward, ConvCache, ConvGeometry};
use crate::numerics::kernels::{mse, mse_backward, silu, silu_backward};
use crate::numerics::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub image_size: usize,
    pub hidden: usize,
    /// Stage-1 latent channels.
    pub c1: usize,
    /// Stage-2 latent channels.
    pub c2: usize,
    pub beta: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            hidden: 8,
            c1: 4,
            c2: 8,
            beta: 1e-3,
            stage1_steps: 400,
            stage2_steps: 400,
            batch: 16,
            lr: 2e-3,
            log_every: 50,
        }
    }
}

/// Spatial compression factor of the encoder.
pub const COMPRESSION: usize = 4;
/// Scale of freshly initialized slices after widening.
pub const WIDEN_INIT_STD: f64 = 0.01;

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c2 <= self.c1 || self.c1 == 0 {
            return Err(config_err!("need 0 < c1 < c2, got c1={} c2={}", self.c1, self.c2));
        }
        if !(self.beta > 0.0) {
            return Err(config_err!("KL weight must be positive, got {}", self.beta));
        }
        if self.image_size == 0 || self.image_size % COMPRESSION != 0 {
            return Err(config_err!("image size {} is not a multiple of {COMPRESSION}", self.image_size));
        }
        if self.hidden == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(config_err!("hidden, batch and log_every must be positive"));
        }
        Ok(())
    }
}

const LAYER_NAMES: [&str; 8] = [
    "enc.in", "enc.down1", "enc.down2", "enc.head", "dec.in", "dec.up1", "dec.up2", "dec.out",
];
const HEAD: usize = 3;
const DEC_IN: usize = 4;

fn geometry(layer: usize) -> ConvGeometry {
    ConvGeometry {
        stride: if layer == 1 || layer == 2 { 2 } else { 1 },
        padding: 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T = f32> {
    hidden: usize,
    channels: usize,
    /// `[w0, b0, w1, b1, …]` in [`LAYER_NAMES`] order; 3×3 kernels.
    params: Vec<Tensor<T>>,
}

fn conv_init<T: Scalar>(co: usize, ci: usize, gain: f64, rng: &mut Rng) -> [Tensor<T>; 2] {
    let std = (gain / (ci * 9) as f64).sqrt();
    [Tensor::randn(&[co, ci, 3, 3], std, rng), Tensor::zeros(&[co])]
}

/// `(co, ci)` for each layer.
fn layer_dims(hidden: usize, c: usize) -> [(usize, usize); 8] {
    let h = hidden;
    [(h, 1), (h, h), (h, h), (2 * c, h), (h, c), (h, h), (h, h), (1, h)]
}

pub struct VaeLoss {
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
}

struct Cache<T> {
    convs: Vec<ConvCache<T>>,
    pre: Vec<Tensor<T>>,
    mean: Tensor<T>,
    logvar: Tensor<T>,
    noise: Tensor<T>,
}

impl<T: Scalar> VaeModel<T> {
    pub fn new(hidden: usize, channels: usize, rng: &Rng) -> Self {
        let mut params = Vec::with_capacity(16);
        for (i, (co, ci)) in layer_dims(hidden, channels).into_iter().enumerate() {
            let gain = if i == HEAD || i == 7 { 1.0 } else { 2.0 };
            params.extend(conv_init(co, ci, gain, &mut rng.child(i as u64)));
        }
        Self { hidden, channels, params }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// `("enc.in.weight", w), ("enc.in.bias", b), …`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        LAYER_NAMES
            .iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .zip(&self.params)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn conv(&self, layer: usize, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        conv2d(x, &self.params[2 * layer], &self.params[2 * layer + 1], geometry(layer))
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, 1, h, w] if h == w && h % COMPRESSION == 0 && *h > 0 => Ok(()),
            s => Err(dim_err!("expected [N, 1, s, s] images with s divisible by {COMPRESSION}, got {s:?}")),
        }
    }

    /// Posterior `(mean, logvar)`, each `[N, c, s/4, s/4]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Self::check_input(x)?;
        let mut h = x.clone();
        for layer in 0..HEAD {
            h = silu(&self.conv(layer, &h)?.0);
        }
        Ok(split_stats(&self.conv(HEAD, &h)?.0, self.channels))
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().get(1) != Some(&self.channels) {
            return Err(dim_err!("latent has shape {:?}, model expects {} channels", z.shape(), self.channels));
        }
        let mut h = silu(&self.conv(DEC_IN, z)?.0);
        for layer in [5, 6] {
            h = silu(&self.conv(layer, &upsample_nearest(&h, 2)?)?.0);
        }
        Ok(self.conv(7, &h)?.0)
    }

    /// Decodes the posterior mean.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?.0)
    }

    fn forward(&self, x: &Tensor<T>, noise: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        Self::check_input(x)?;
        let mut convs = Vec::with_capacity(8);
        let mut pre = Vec::with_capacity(6);
        let mut h = x.clone();
        for layer in 0..HEAD {
            let (y, c) = self.conv(layer, &h)?;
            h = silu(&y);
            convs.push(c);
            pre.push(y);
        }
        let (stats, c) = self.conv(HEAD, &h)?;
        convs.push(c);
        let (mean, logvar) = split_stats(&stats, self.channels);
        noise.expect_same_shape(&mean)?;
        let half = T::lit(0.5);
        let z = Tensor::from_fn(mean.shape(), |i| {
            mean.data()[i] + (half * logvar.data()[i]).exp() * noise.data()[i]
        });
        let (y, c) = self.conv(DEC_IN, &z)?;
        h = silu(&y);
        convs.push(c);
        pre.push(y);
        for layer in [5, 6] {
            let (y, c) = self.conv(layer, &upsample_nearest(&h, 2)?)?;
            h = silu(&y);
            convs.push(c);
            pre.push(y);
        }
        let (out, c) = self.conv(7, &h)?;
        convs.push(c);
        Ok((out, Cache { convs, pre, mean, logvar, noise: noise.clone() }))
    }

    /// `mse + β·kl` for one batch with reparameterization noise `noise`, and
    /// gradients aligned with [`Self::params`].
    pub fn loss_and_grads(&self, x: &Tensor<T>, noise: &Tensor<T>, beta: f64) -> Result<(VaeLoss, Vec<Tensor<T>>)> {
        let (out, cache) = self.forward(x, noise)?;
        let rec = mse(&out, x)?.as_f64();
        let kl = kl_divergence(&cache.mean, &cache.logvar);
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();

        let mut dh = mse_backward(&out, x)?;
        for layer in (DEC_IN..8).rev() {
            let (gw, gb) = pair_mut(&mut grads, layer);
            let dx = conv2d_backward(&cache.convs[layer], &self.params[2 * layer], geometry(layer), &dh, gw, gb)?;
            dh = match layer {
                7 => silu_backward(&cache.pre[5], &dx),
                6 | 5 => silu_backward(&cache.pre[layer - 2], &upsample_nearest_backward(&dx, 2)?),
                _ => dx,
            };
        }
        let dz = dh;

        let n = T::lit(x.shape()[0] as f64);
        let b = T::lit(beta);
        let half = T::lit(0.5);
        let c = self.channels;
        let mut dstats = Tensor::zeros(&[cache.mean.shape()[0], 2 * c, cache.mean.shape()[2], cache.mean.shape()[3]]);
        let plane = cache.mean.shape()[2] * cache.mean.shape()[3];
        for (i, ((&mu, &lv), (&e, &g))) in cache
            .mean
            .data()
            .iter()
            .zip(cache.logvar.data())
            .zip(cache.noise.data().iter().zip(dz.data()))
            .enumerate()
        {
            let (s, rest) = (i / (c * plane), i % (c * plane));
            let dmu = g + b * mu / n;
            let dlv = g * e * half * (half * lv).exp() + b * half * (lv.exp() - T::one()) / n;
            dstats.data_mut()[s * 2 * c * plane + rest] = dmu;
            dstats.data_mut()[s * 2 * c * plane + c * plane + rest] = dlv;
        }

        let mut dh = dstats;
        for layer in (0..=HEAD).rev() {
            let (gw, gb) = pair_mut(&mut grads, layer);
            let dx = conv2d_backward(&cache.convs[layer], &self.params[2 * layer], geometry(layer), &dh, gw, gb)?;
            if layer > 0 {
                dh = silu_backward(&cache.pre[layer - 1], &dx);
            }
        }
        let total = rec + beta * kl;
        if !total.is_finite() {
            return Err(numeric_err!("VAE loss is not finite"));
        }
        Ok((VaeLoss { mse: rec, kl, total }, grads))
    }
}

impl VaeModel<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        write_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Loads a checkpoint written by [`Self::save`]; widths are read from the tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.tensor.clone())
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let hidden = find("enc.in.weight")?.shape()[0];
        let channels = find("dec.in.weight")?.shape().get(1).copied().unwrap_or(0);
        if entries.len() != 2 * LAYER_NAMES.len() {
            return Err(bad(format!("expected {} tensors, found {}", 2 * LAYER_NAMES.len(), entries.len())));
        }
        let mut params = Vec::with_capacity(16);
        for (name, (co, ci)) in LAYER_NAMES.iter().zip(layer_dims(hidden, channels)) {
            let w = find(&format!("{name}.weight"))?;
            let b = find(&format!("{name}.bias"))?;
            if w.shape() != [co, ci, 3, 3] || b.shape() != [co] {
                return Err(bad(format!("{name} has shapes {:?} / {:?}", w.shape(), b.shape())));
            }
            params.push(w);
            params.push(b);
        }
        Ok(Self { hidden, channels, params })
    }
}

fn pair_mut<T>(grads: &mut [Tensor<T>], layer: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
    let (w, b) = grads[2 * layer..2 * layer + 2].split_at_mut(1);
    (&mut w[0], &mut b[0])
}

fn split_stats<T: Scalar>(stats: &Tensor<T>, c: usize) -> (Tensor<T>, Tensor<T>) {
    let s = stats.shape();
    let (n, plane) = (s[0], s[2] * s[3]);
    let shape = [n, c, s[2], s[3]];
    let pick = |offset: usize| {
        Tensor::from_fn(&shape, |i| {
            let (b, rest) = (i / (c * plane), i % (c * plane));
            stats.data()[b * 2 * c * plane + offset * plane + rest]
        })
    };
    (pick(0), pick(c))
}

/// Mean over samples of `KL(N(μ, e^lv) ‖ N(0, I))`.
pub fn kl_divergence<T: Scalar>(mean: &Tensor<T>, logvar: &Tensor<T>) -> f64 {
    let n = mean.shape().first().copied().unwrap_or(1).max(1);
    let sum: f64 = mean
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    sum / n as f64
}

/// Mean posterior KL over `data`.
pub fn measure_kl<T: Scalar>(model: &VaeModel<T>, data: &Tensor<T>) -> Result<f64> {
    let (mean, logvar) = model.encode(data)?;
    Ok(kl_divergence(&mean, &logvar))
}

/// Per-pixel reconstruction error of the posterior mean.
pub fn measure_mse<T: Scalar>(model: &VaeModel<T>, data: &Tensor<T>) -> Result<f64> {
    Ok(mse(&model.reconstruct(data)?, data)?.as_f64())
}

/// Replaces the latent head and the first decoder convolution with
/// `c2`-channel versions. Existing slices are copied; new slices are drawn
/// from `N(0, 0.01²)` and new biases are zero.
pub fn widen_latent<T: Scalar>(model: &VaeModel<T>, c2: usize, rng: &Rng) -> Result<VaeModel<T>> {
    let c1 = model.channels;
    if c2 <= c1 {
        return Err(dim_err!("cannot widen {c1} latent channels to {c2}"));
    }
    let h = model.hidden;
    let mut params = model.params.clone();
    let mut fresh = rng.child(0);

    let old_w = &model.params[2 * HEAD];
    let old_b = &model.params[2 * HEAD + 1];
    let per_out = h * 9;
    let mut w = Tensor::zeros(&[2 * c2, h, 3, 3]);
    let mut b = Tensor::zeros(&[2 * c2]);
    for o in 0..2 * c2 {
        let src = match o {
            o if o < c1 => Some(o),
            o if (c2..c2 + c1).contains(&o) => Some(o - c2 + c1),
            _ => None,
        };
        let dst = &mut w.data_mut()[o * per_out..(o + 1) * per_out];
        match src {
            Some(s) => {
                dst.copy_from_slice(&old_w.data()[s * per_out..(s + 1) * per_out]);
                b.data_mut()[o] = old_b.data()[s];
            }
            None => dst.iter_mut().for_each(|v| *v = T::lit(WIDEN_INIT_STD * fresh.normal())),
        }
    }
    params[2 * HEAD] = w;
    params[2 * HEAD + 1] = b;

    let old = &model.params[2 * DEC_IN];
    let mut w = Tensor::zeros(&[h, c2, 3, 3]);
    for o in 0..h {
        for i in 0..c2 {
            let dst = ((o * c2) + i) * 9;
            if i < c1 {
                let src = ((o * c1) + i) * 9;
                w.data_mut()[dst..dst + 9].copy_from_slice(&old.data()[src..src + 9]);
            } else {
                w.data_mut()[dst..dst + 9]
                    .iter_mut()
                    .for_each(|v| *v = T::lit(WIDEN_INIT_STD * fresh.normal()));
            }
        }
    }
    params[2 * DEC_IN] = w;

    Ok(VaeModel { hidden: h, channels: c2, params })
}

/// Pads latents with zero channels up to `c2`.
pub fn pad_latent<T: Scalar>(z: &Tensor<T>, c2: usize) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 4 || s[1] > c2 {
        return Err(dim_err!("cannot pad latent {:?} to {c2} channels", s));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, c2, s[2], s[3]]);
    for b in 0..n {
        out.data_mut()[b * c2 * plane..b * c2 * plane + c * plane]
            .copy_from_slice(&z.data()[b * c * plane..(b + 1) * c * plane]);
    }
    Ok(out)
}

/// Sums of random axis-aligned gratings, one image per sample.
pub fn textures(n: usize, size: usize, rng: &mut Rng) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[n, 1, size, size]);
    let tau = std::f64::consts::TAU;
    for img in out.data_mut().chunks_exact_mut(size * size) {
        for _ in 0..2 {
            let fx = rng.below(3) as f64;
            let fy = rng.below(3) as f64;
            let phase = tau * rng.uniform();
            let amp = 0.3 + 0.7 * rng.uniform();
            for y in 0..size {
                for x in 0..size {
                    let arg = tau * (fx * x as f64 + fy * y as f64) / size as f64 + phase;
                    img[y * size + x] += (amp * arg.sin()) as f32;
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetric {
    pub step: usize,
    pub mse: f64,
    pub kl: f64,
}

fn gather(data: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = data.numel() / data.shape()[0];
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    let mut out = Tensor::zeros(&shape);
    for (dst, &i) in out.data_mut().chunks_exact_mut(per).zip(idx) {
        dst.copy_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    out
}

/// Trains `model` for `steps` Adam steps on minibatches of `data`. Metrics
/// are measured on all of `data` every `log_every` steps and after the last.
pub fn train_steps(
    model: &mut VaeModel<f32>,
    data: &Tensor<f32>,
    steps: usize,
    config: &VaeConfig,
    rng: &mut Rng,
    start_step: usize,
) -> Result<Vec<VaeMetric>> {
    let n = data.shape()[0];
    let mut opt = Adam::<f32>::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let latent = config.image_size / COMPRESSION;
    let mut curve = Vec::new();
    for step in 0..steps {
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.below(n)).collect();
        let x = gather(data, &idx);
        let noise = Tensor::randn(&[config.batch, model.channels, latent, latent], 1.0, rng);
        let (loss, grads) = model
            .loss_and_grads(&x, &noise, config.beta)
            .map_err(|e| match e {
                crate::Error::Numeric(m) => numeric_err!("{m} at step {}", start_step + step),
                other => other,
            })?;
        if !loss.total.is_finite() {
            return Err(numeric_err!("VAE loss diverged at step {}", start_step + step));
        }
        opt.step(&mut model.params, &grads)?;
        let done = step + 1;
        if done % config.log_every == 0 || done == steps {
            curve.push(VaeMetric {
                step: start_step + done,
                mse: measure_mse(model, data)?,
                kl: measure_kl(model, data)?,
            });
        }
    }
    Ok(curve)
}

/// Stage 1 trains a fresh `c1`-channel model. Stage 2 widens `previous` to
/// `c2` channels and continues. Model init, surgery and minibatches use
/// separate child streams of `rng`.
pub fn train_vae(
    config: &VaeConfig,
    data: &Tensor<f32>,
    stage: u8,
    previous: Option<&VaeModel<f32>>,
    rng: &Rng,
) -> Result<(VaeModel<f32>, Vec<VaeMetric>)> {
    config.validate()?;
    match (stage, previous) {
        (1, _) => {
            let mut model = VaeModel::new(config.hidden, config.c1, &rng.child(0));
            let curve = train_steps(&mut model, data, config.stage1_steps, config, &mut rng.child(1), 0)?;
            Ok((model, curve))
        }
        (2, Some(prev)) => {
            if prev.channels != config.c1 {
                return Err(dim_err!("stage 2 expects a {}-channel model, got {}", config.c1, prev.channels));
            }
            let mut model = widen_latent(prev, config.c2, &rng.child(2))?;
            let curve = train_steps(
                &mut model,
                data,
                config.stage2_steps,
                config,
                &mut rng.child(3),
                config.stage1_steps,
            )?;
            Ok((model, curve))
        }
        (2, None) => Err(config_err!("stage 2 requires a stage-1 model")),
        (s, _) => Err(config_err!("stage must be 1 or 2, got {s}")),
    }
}

/// Trains a `c2`-channel model from scratch for both stage budgets.
pub fn train_scratch(config: &VaeConfig, data: &Tensor<f32>, rng: &Rng) -> Result<(VaeModel<f32>, Vec<VaeMetric>)> {
    config.validate()?;
    let mut model = VaeModel::new(config.hidden, config.c2, &rng.child(0));
    let steps = config.stage1_steps + config.stage2_steps;
    let curve = train_steps(&mut model, data, steps, config, &mut rng.child(1), 0)?;
    Ok((model, curve))
}

pub fn write_metrics(path: &Path, curve: &[VaeMetric]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in curve {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
