//! Heun integration of the flow ODE with classifier-free guidance.
//!
//! The grid is uniform in `t` from 1 to 0. Each step takes an Euler proposal
//! and averages the two slopes; the last step lands on `t = 0`, where the
//! field is not evaluated, so it stays a plain Euler step.

use crate::arch::Model;
use crate::conditioning::CondBundle;
use crate::error::{config_err, numeric_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance scale `w`.
    pub guidance: f64,
    /// Relative noise-level increase before each step; 0 gives the deterministic ODE.
    pub churn: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            churn: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("sampler needs at least one step"));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(config_err!("guidance scale must be finite and non-negative, got {}", self.guidance));
        }
        if !(self.churn >= 0.0 && self.churn.is_finite()) {
            return Err(config_err!("churn must be finite and non-negative, got {}", self.churn));
        }
        Ok(())
    }
}

/// `uncond + w·(cond − uncond)`. Returns an exact copy of `cond` at `w = 1`
/// and of `uncond` at `w = 0`.
pub fn cfg_combine<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    cond.expect_same_shape(uncond)?;
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let w = T::lit(w);
    uncond.zip_map(cond, |u, c| u + w * (c - u))
}

/// Timesteps `1, 1 − 1/n, …, 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Integrates from `t = 1` to `t = 0`. `field(z, t)` returns the prediction
/// of `z0 − ε`; the ODE velocity is its negative.
pub fn heun_integrate<T: Scalar>(
    mut field: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    z_start: &Tensor<T>,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    config.validate()?;
    let grid = time_grid(config.steps);
    let mut z = z_start.clone();
    for (step, w) in grid.windows(2).enumerate() {
        let (mut t, t_next) = (w[0], w[1]);
        if config.churn > 0.0 && t < 1.0 {
            t = churn(&mut z, t, config.churn, rng);
        }
        let h = T::lit(t_next - t);
        let d0 = field(&z, t)?;
        let mut proposal = z.clone();
        proposal.axpy(-h, &d0)?;
        if t_next > 0.0 {
            let d1 = field(&proposal, t_next)?;
            let half = h * T::lit(0.5);
            for ((zi, &a), &b) in z.data_mut().iter_mut().zip(d0.data()).zip(d1.data()) {
                *zi -= half * (a + b);
            }
        } else {
            z = proposal;
        }
        if !z.all_finite() {
            return Err(numeric_err!("sampler state became non-finite at step {}", step));
        }
    }
    Ok(z)
}

/// Raises the noise level of `z` from `t` to `t̂` and returns `t̂`.
///
/// With `σ = t/(1 − t)`, `z/(1 − t) = z0 + σ·ε`, so fresh noise of variance
/// `σ̂² − σ²` moves the state to `σ̂ = σ(1 + γ)`.
fn churn<T: Scalar>(z: &mut Tensor<T>, t: f64, gamma: f64, rng: &mut Rng) -> f64 {
    let sigma = t / (1.0 - t);
    let sigma_hat = sigma * (1.0 + gamma);
    let t_hat = sigma_hat / (1.0 + sigma_hat);
    let extra = (sigma_hat * sigma_hat - sigma * sigma).sqrt();
    let rescale = (1.0 - t_hat) / (1.0 - t);
    for v in z.data_mut() {
        let x = v.as_f64() * rescale + (1.0 - t_hat) * extra * rng.normal();
        *v = T::lit(x);
    }
    t_hat
}

/// Guided prediction of a model for a batch of conditions.
pub fn guided_field<T: Scalar>(
    model: &Model<T>,
    conds: &[CondBundle<T>],
    guidance: f64,
    z: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let ts = vec![T::lit(t); conds.len()];
    if guidance == 1.0 {
        return model.forward_batch(z, conds, &ts);
    }
    let nulls: Vec<CondBundle<T>> = conds.iter().map(|c| CondBundle::null(c.text_len(), c.width())).collect();
    if guidance == 0.0 {
        return model.forward_batch(z, &nulls, &ts);
    }
    let cond = model.forward_batch(z, conds, &ts)?;
    let uncond = model.forward_batch(z, &nulls, &ts)?;
    cfg_combine(&cond, &uncond, guidance)
}

/// Draws one latent per condition. Starting noise comes from child stream 0
/// of `config.seed`, churn noise from child stream 1.
pub fn generate<T: Scalar>(model: &Model<T>, conds: &[CondBundle<T>], config: &SamplerConfig) -> Result<Tensor<T>> {
    config.validate()?;
    let cfg = model.config();
    let shape = [conds.len(), cfg.latent_channels, cfg.latent_size, cfg.latent_size];
    let root = Rng::new(config.seed);
    let z = Tensor::randn(&shape, 1.0, &mut root.child(0));
    let mut noise = root.child(1);
    heun_integrate(
        |z, t| guided_field(model, conds, config.guidance, z, t),
        &z,
        config,
        &mut noise,
    )
}
