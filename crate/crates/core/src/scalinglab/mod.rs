//! Scaling experiments on a synthetic conditional task.
//!
//! Each prompt `[BOS, k]` selects a class with latent mean `μ_k`; clean
//! latents are `μ_k + σ·n`. Because the class is known from the prompt, the
//! best achievable flow loss has a closed form (see [`crate::flow`]), which
//! gives every run an absolute reference.

mod report;

pub use report::{emit_report, read_runs, ReportPaths};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{Model, ModelConfig, Variant};
use crate::conditioning::{drop_conditions, CondBundle, LayerSpec, PoolMode, ToyEncoder, P_DROP};
use crate::error::{config_err, numeric_err, Result};
use crate::flow::{flow_loss_grad, optimal_loss, oracle_prediction, FlowBatch, TimestepDist};
use crate::numerics::{Adam, AdamConfig, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub sigma: f64,
    /// Standard deviation of the class-mean coordinates.
    pub mean_scale: f64,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub patch: usize,
    pub cond_dim: usize,
    pub val_size: usize,
    pub timesteps: TimestepDist,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            sigma: 0.5,
            mean_scale: 1.0,
            latent_channels: 4,
            latent_size: 4,
            patch: 2,
            cond_dim: 32,
            val_size: 1024,
            timesteps: TimestepDist::default(),
            seed: 0,
        }
    }
}

/// Two prompt tokens: BOS then the class id.
pub const PROMPT_LEN: usize = 2;

/// Sampled task: class means, encoded prompts and a fixed validation set.
#[derive(Clone, Debug)]
pub struct Task {
    pub config: TaskConfig,
    pub means: Vec<Vec<f32>>,
    pub conds: Vec<CondBundle<f32>>,
    pub val_classes: Vec<usize>,
    pub val: FlowBatch<f32>,
}

impl Task {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.classes == 0 || config.val_size == 0 {
            return Err(config_err!("task needs at least one class and one validation item"));
        }
        if !(config.sigma > 0.0) {
            return Err(config_err!("task sigma must be positive, got {}", config.sigma));
        }
        let root = Rng::new(config.seed);
        let dims = config.latent_channels * config.latent_size * config.latent_size;
        let mut rng = root.child(0);
        let means: Vec<Vec<f32>> = (0..config.classes)
            .map(|_| (0..dims).map(|_| (config.mean_scale * rng.normal()) as f32).collect())
            .collect();
        let encoder = ToyEncoder::new(config.classes + 1, config.cond_dim, 2, PoolMode::Causal, config.seed ^ 0x5eed)?;
        let bos = config.classes;
        let conds = (0..config.classes)
            .map(|k| encoder.encode(&[bos, k], &LayerSpec::Single(2)))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = root.child(1);
        let val_classes: Vec<usize> = (0..config.val_size).map(|i| i % config.classes).collect();
        let z0 = sample_latents(&config, &means, &val_classes, &mut rng);
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let t = (0..config.val_size)
            .map(|_| crate::flow::sample_timestep(&config.timesteps, &mut rng) as f32)
            .collect();
        let val = FlowBatch::from_parts(z0, eps, t)?;
        Ok(Self { config, means, conds, val_classes, val })
    }

    pub fn dims(&self) -> usize {
        self.means[0].len()
    }

    pub fn model_config(&self, variant: Variant, layers: usize, width: usize) -> ModelConfig {
        ModelConfig {
            variant,
            layers,
            width,
            patch: self.config.patch,
            latent_channels: self.config.latent_channels,
            latent_size: self.config.latent_size,
            text_len: PROMPT_LEN,
            cond_dim: self.config.cond_dim,
            use_pooled: true,
        }
    }

    /// Loss of the exact posterior-mean predictor on the validation set.
    pub fn oracle_val_loss(&self) -> f64 {
        let per = self.dims();
        let s = self.config.sigma;
        let mut total = 0.0;
        for (i, &k) in self.val_classes.iter().enumerate() {
            let t = self.val.t[i] as f64;
            for d in 0..per {
                let idx = i * per + d;
                let pred = oracle_prediction(self.val.zt.data()[idx] as f64, t, self.means[k][d] as f64, s);
                total += (pred - self.val.target.data()[idx] as f64).powi(2);
            }
        }
        total / self.val_classes.len() as f64
    }

    /// `dims · E_t[optimal per-dim loss]` under the timestep law.
    pub fn analytic_optimum(&self) -> f64 {
        let dist = self.config.timesteps;
        let s = self.config.sigma;
        expect_over_normal(|n| optimal_loss(dist.from_normal(n), s)) * self.dims() as f64
    }

    /// Expected loss of the all-zero predictor: `E‖z0 − ε‖²`.
    pub fn zero_predictor_loss(&self) -> f64 {
        let mu2: f64 = self.means.iter().flatten().map(|&m| (m as f64).powi(2)).sum::<f64>() / self.means.len() as f64;
        self.dims() as f64 * (self.config.sigma.powi(2) + 1.0) + mu2
    }

    /// Mean validation loss of `model` on the fixed validation set.
    pub fn val_loss(&self, model: &Model<f32>) -> Result<f64> {
        let per = self.dims();
        let shape = [self.config.latent_channels, self.config.latent_size, self.config.latent_size];
        let mut total = 0.0;
        for start in (0..self.val_classes.len()).step_by(256) {
            let end = (start + 256).min(self.val_classes.len());
            let b = end - start;
            let zt = Tensor::new(&[b, shape[0], shape[1], shape[2]], self.val.zt.data()[start * per..end * per].to_vec())?;
            let conds: Vec<_> = self.val_classes[start..end].iter().map(|&k| self.conds[k].clone()).collect();
            let pred = model.forward_batch(&zt, &conds, &self.val.t[start..end])?;
            total += pred
                .data()
                .iter()
                .zip(&self.val.target.data()[start * per..end * per])
                .map(|(&p, &y)| ((p - y) as f64).powi(2))
                .sum::<f64>();
        }
        Ok(total / self.val_classes.len() as f64)
    }
}

fn sample_latents(config: &TaskConfig, means: &[Vec<f32>], classes: &[usize], rng: &mut Rng) -> Tensor<f32> {
    let s = config.latent_size;
    let mut z = Tensor::zeros(&[classes.len(), config.latent_channels, s, s]);
    let per = means[0].len();
    for (row, &k) in z.data_mut().chunks_exact_mut(per).zip(classes) {
        for (v, &m) in row.iter_mut().zip(&means[k]) {
            *v = m + (config.sigma * rng.normal()) as f32;
        }
    }
    z
}

/// `E[f(n)]` for `n ~ N(0, 1)` by Simpson's rule on `[-10, 10]`.
fn expect_over_normal(f: impl Fn(f64) -> f64) -> f64 {
    let steps = 4000;
    let (lo, hi) = (-10.0, 10.0);
    let h = (hi - lo) / steps as f64;
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut sum = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(x) * density(x);
    }
    sum * h / 3.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability that a training condition is replaced by the null condition.
    pub cond_drop: f64,
    pub log_every: usize,
    /// Validation interval; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stops early once the validation loss falls to this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 64,
            lr: 1e-4,
            cond_drop: P_DROP,
            log_every: 50,
            eval_every: 0,
            stop_below: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    /// Unique parameters of the diffusion transformer.
    pub params: u64,
    pub steps_run: usize,
    pub train_loss: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    pub val_loss: f64,
}

/// One row of the runs CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: String,
    pub layers: usize,
    pub d: usize,
    pub params: u64,
    pub val_loss: f64,
}

impl From<&RunRecord> for RunRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            variant: r.variant.to_string(),
            layers: r.layers,
            d: r.width,
            params: r.params,
            val_loss: r.val_loss,
        }
    }
}

/// Hex SHA-256 over the canonical description of a run.
pub fn config_hash(model: &ModelConfig, task: &TaskConfig, train: &TrainConfig, seed: u64) -> String {
    let mut text = String::new();
    let _ = write!(text, "{:?}\n{:?}\n{:?}\nseed={seed}", model, task, train);
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains one model on `task`. Initialization uses child stream 0 of
/// `seed`, minibatches child stream 1.
pub fn train_run(model_config: &ModelConfig, task: &Task, train: &TrainConfig, seed: u64) -> Result<RunRecord> {
    train_model(model_config, task, train, seed).map(|(_, rec)| rec)
}

/// [`train_run`] that also hands back the trained weights.
pub fn train_model(
    model_config: &ModelConfig,
    task: &Task,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Model<f32>, RunRecord)> {
    if train.batch == 0 || train.log_every == 0 {
        return Err(config_err!("batch and log_every must be positive"));
    }
    let root = Rng::new(seed);
    let mut model = Model::<f32>::build(model_config, &root.child(0))?;
    let mut rng = root.child(1);
    let mut opt = Adam::<f32>::new(AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    });
    let mut train_loss = Vec::new();
    let mut val_curve = Vec::new();
    let mut steps_run = 0;
    let classes = task.config.classes;
    while steps_run < train.steps {
        let ks: Vec<usize> = (0..train.batch).map(|_| rng.below(classes)).collect();
        let z0 = sample_latents(&task.config, &task.means, &ks, &mut rng);
        let batch = crate::flow::make_batch(&z0, &mut rng, &task.config.timesteps)?;
        let mut conds: Vec<_> = ks.iter().map(|&k| task.conds[k].clone()).collect();
        drop_conditions(&mut conds, train.cond_drop, &mut rng);
        let (out, cache) = model.forward_train(&batch.zt, &conds, &batch.t).map_err(|e| at_step(e, steps_run))?;
        let (loss, dout) = flow_loss_grad(&out, &batch)?;
        if !loss.is_finite() {
            return Err(numeric_err!("training loss diverged at step {steps_run}"));
        }
        let (grads, _) = model.backward(&cache, &dout)?;
        opt.step(model.store_mut().tensors_mut(), grads.tensors())?;
        steps_run += 1;
        if steps_run % train.log_every == 0 {
            train_loss.push((steps_run, loss as f64));
        }
        if train.eval_every > 0 && steps_run % train.eval_every == 0 && steps_run < train.steps {
            let v = task.val_loss(&model)?;
            val_curve.push((steps_run, v));
            if train.stop_below.is_some_and(|limit| v <= limit) {
                break;
            }
        }
    }
    let val_loss = match val_curve.last() {
        Some(&(s, v)) if s == steps_run => v,
        _ => {
            let v = task.val_loss(&model)?;
            val_curve.push((steps_run, v));
            v
        }
    };
    let record = RunRecord {
        config_hash: config_hash(model_config, &task.config, train, seed),
        variant: model_config.variant,
        layers: model_config.layers,
        width: model_config.width,
        params: model.layout().total_numel(),
        steps_run,
        train_loss,
        val_curve,
        val_loss,
    };
    Ok((model, record))
}

fn at_step(e: crate::Error, step: usize) -> crate::Error {
    match e {
        crate::Error::Numeric(m) => numeric_err!("{m} at step {step}"),
        other => other,
    }
}

/// Architecture grid: every variant at every depth, width `width_per_layer · layers`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    pub layers: Vec<usize>,
    pub width_per_layer: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Pixart, Variant::Mmdit, Variant::DitAir],
            layers: vec![2, 4, 6, 8],
            width_per_layer: 16,
        }
    }
}

/// Runs the grid on a pool of `threads` workers. Records come back sorted
/// by config hash, independent of scheduling.
pub fn run_grid(grid: &GridSpec, task: &Task, train: &TrainConfig, seed: u64, threads: usize) -> Result<Vec<RunRecord>> {
    use rayon::prelude::*;
    let configs: Vec<ModelConfig> = grid
        .variants
        .iter()
        .flat_map(|&v| grid.layers.iter().map(move |&n| (v, n)))
        .map(|(v, n)| task.model_config(v, n, grid.width_per_layer * n))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| config_err!("cannot start worker pool: {e}"))?;
    let mut records = pool.install(|| {
        configs
            .par_iter()
            .map(|c| train_run(c, task, train, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
    Ok(records)
}

/// `L = a·S^b` fitted by least squares in log–log space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    /// Root-mean-square residual of `ln L`.
    pub rms: f64,
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, s: f64) -> f64 {
        self.a * s.powf(self.b)
    }
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(config_err!("power-law fit needs at least two points, got {}", points.len()));
    }
    if let Some(&(s, l)) = points.iter().find(|&&(s, l)| !(s > 0.0 && l > 0.0 && s.is_finite() && l.is_finite())) {
        return Err(config_err!("power-law fit needs positive finite inputs, got ({s}, {l})"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * n {
        return Err(config_err!("power-law fit needs at least two distinct sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let rms = (xs.iter().zip(&ys).map(|(x, y)| (y - ln_a - b * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PowerLawFit {
        a: ln_a.exp(),
        b,
        rms,
        points: points.len(),
    })
}

/// One fit per variant name, in order of first appearance.
pub fn fit_by_variant(rows: &[RunRow]) -> Result<Vec<(String, PowerLawFit)>> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == name)
                .map(|r| (r.params as f64, r.val_loss))
                .collect();
            fit_power_law(&pts).map(|f| (name.to_string(), f))
        })
        .collect()
}
