//! Flow-matching objective.
//!
//! Clean latents `z0` and noise `ε` are joined by the straight path
//! `z_t = (1 − t)·z0 + t·ε`. The network regresses `z0 − ε`, which is the
//! negative of `dz_t/dt`; the sampler integrates `v = −prediction` from
//! `t = 1` down to `t = 0`.

use crate::error::{dim_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Logit-normal timestep law: `t = sigmoid(m + s·n)`, `n ~ N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepDist {
    pub m: f64,
    pub s: f64,
}

impl Default for TimestepDist {
    fn default() -> Self {
        Self { m: 0.0, s: 1.0 }
    }
}

/// Smallest distance kept between a sampled timestep and either endpoint.
pub const T_MARGIN: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TimestepDist {
    /// Maps a standard normal draw to a timestep strictly inside (0, 1).
    pub fn from_normal(&self, n: f64) -> f64 {
        sigmoid(self.m + self.s * n).clamp(T_MARGIN, 1.0 - T_MARGIN)
    }
}

pub fn sample_timestep(dist: &TimestepDist, rng: &mut Rng) -> f64 {
    dist.from_normal(rng.normal())
}

/// `(1 − t)·z0 + t·ε` with one `t` per leading-axis sample.
pub fn interpolate<T: Scalar>(z0: &Tensor<T>, eps: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    z0.expect_same_shape(eps)?;
    let per = per_sample(z0, t.len())?;
    let mut out = Tensor::zeros(z0.shape());
    for (b, &tb) in t.iter().enumerate() {
        let range = b * per..(b + 1) * per;
        let one_minus = T::one() - tb;
        for ((o, &a), &e) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&z0.data()[range.clone()])
            .zip(&eps.data()[range])
        {
            *o = one_minus * a + tb * e;
        }
    }
    Ok(out)
}

fn per_sample<T: Scalar>(x: &Tensor<T>, batch: usize) -> Result<usize> {
    if x.rank() == 0 || x.shape()[0] != batch || batch == 0 {
        return Err(dim_err!("expected {} samples on the leading axis, got shape {:?}", batch, x.shape()));
    }
    Ok(x.numel() / batch)
}

/// One training batch. The leading axis of every tensor indexes samples.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    pub z0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<T>,
    pub zt: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn from_parts(z0: Tensor<T>, eps: Tensor<T>, t: Vec<T>) -> Result<Self> {
        let zt = interpolate(&z0, &eps, &t)?;
        let target = z0.sub(&eps)?;
        target.check_finite("flow target")?;
        Ok(Self { z0, eps, t, zt, target })
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

/// Draws `ε ~ N(0, I)` and one timestep per sample.
pub fn make_batch<T: Scalar>(z0: &Tensor<T>, rng: &mut Rng, dist: &TimestepDist) -> Result<FlowBatch<T>> {
    let batch = z0.shape().first().copied().unwrap_or(0);
    per_sample(z0, batch)?;
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    let t = (0..batch).map(|_| T::lit(sample_timestep(dist, rng))).collect();
    FlowBatch::from_parts(z0.clone(), eps, t)
}

/// Mean over samples of `‖pred − (z0 − ε)‖²`.
pub fn flow_loss<T: Scalar>(pred: &Tensor<T>, batch: &FlowBatch<T>) -> Result<T> {
    pred.expect_same_shape(&batch.target)?;
    let sq: T = pred
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum();
    Ok(sq / T::lit(batch.batch() as f64))
}

/// Loss and its gradient with respect to `pred`.
pub fn flow_loss_grad<T: Scalar>(pred: &Tensor<T>, batch: &FlowBatch<T>) -> Result<(T, Tensor<T>)> {
    let loss = flow_loss(pred, batch)?;
    let scale = T::lit(2.0 / batch.batch() as f64);
    let grad = pred.zip_map(&batch.target, |p, y| scale * (p - y))?;
    Ok((loss, grad))
}

/// Slope `k(t)` of the optimal predictor for `z0 ~ N(μ, σ²)`.
pub fn gaussian_gain(t: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    ((1.0 - t) * s2 - t) / ((1.0 - t) * (1.0 - t) * s2 + t * t)
}

/// `E[z0 − ε | z_t]` for a scalar coordinate with `z0 ~ N(μ, σ²)`.
pub fn oracle_prediction(zt: f64, t: f64, mu: f64, sigma: f64) -> f64 {
    mu + gaussian_gain(t, sigma) * (zt - (1.0 - t) * mu)
}

/// Optimal prediction for a batch; `t` holds one timestep per sample.
pub fn gaussian_oracle<T: Scalar>(zt: &Tensor<T>, t: &[f64], mu: f64, sigma: f64) -> Result<Tensor<T>> {
    let per = per_sample(zt, t.len())?;
    Ok(Tensor::from_fn(zt.shape(), |i| {
        T::lit(oracle_prediction(zt.data()[i].as_f64(), t[i / per], mu, sigma))
    }))
}

/// Per-dimension loss of the optimal predictor at fixed `t`.
pub fn optimal_loss(t: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let c = (1.0 - t) * s2 - t;
    (s2 + 1.0) - c * c / ((1.0 - t) * (1.0 - t) * s2 + t * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }

    #[test]
    fn timestep_center_and_median() {
        assert_eq!(TimestepDist::default().from_normal(0.0), 0.5);
        let mut rng = Rng::new(11);
        let d = TimestepDist { m: 0.7, s: 1.3 };
        let ts: Vec<f64> = (0..100_000).map(|_| sample_timestep(&d, &mut rng)).collect();
        assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
        assert!((median(ts) - sigmoid(0.7)).abs() < 0.01);

        let d = TimestepDist::default();
        let below = (0..100_000).filter(|_| sample_timestep(&d, &mut rng) < 0.5).count();
        assert!((below as f64 / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn extreme_draws_stay_interior() {
        let d = TimestepDist { m: 0.0, s: 50.0 };
        let lo = d.from_normal(-10.0);
        let hi = d.from_normal(10.0);
        assert!(lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        let mut rng = Rng::new(3);
        let z0 = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let zt = interpolate(&z0, &eps, &[0.0, 1.0, 0.5]).unwrap();
        assert_eq!(zt.row(0), z0.row(0));
        assert_eq!(zt.row(1), eps.row(1));
        for i in 0..5 {
            let want = (z0.row(2)[i] + eps.row(2)[i]) / 2.0;
            assert!((zt.row(2)[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(5);
        let z0 = Tensor::<f64>::randn(&[2000, 8], 1.0, &mut rng);
        let batch = make_batch(&z0, &mut rng, &TimestepDist::default()).unwrap();
        assert_eq!(flow_loss(&batch.target, &batch).unwrap(), 0.0);

        let zero = Tensor::zeros(z0.shape());
        let per_dim = flow_loss(&zero, &batch).unwrap() / 8.0;
        assert!((per_dim - 2.0).abs() < 0.05, "{per_dim}");

        let r = Tensor::<f64>::randn(z0.shape(), 1.0, &mut rng);
        let p1 = batch.target.add(&r).unwrap();
        let p2 = batch.target.add(&r.scale(2.0)).unwrap();
        let (l1, l2) = (flow_loss(&p1, &batch).unwrap(), flow_loss(&p2, &batch).unwrap());
        assert!((l2 / l1 - 4.0).abs() < 1e-12);
        assert!(flow_loss(&Tensor::zeros(&[2000, 7]), &batch).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = Rng::new(8);
        let z0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let batch = make_batch(&z0, &mut rng, &TimestepDist::default()).unwrap();
        let pred = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let (_, g) = flow_loss_grad(&pred, &batch).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut a = pred.clone();
            a.data_mut()[i] += h;
            let mut b = pred.clone();
            b.data_mut()[i] -= h;
            let fd = (flow_loss(&a, &batch).unwrap() - flow_loss(&b, &batch).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
    }

    /// Draws `(z_t, z0 − ε)` pairs at a fixed `t`.
    fn pairs(n: usize, t: f64, mu: f64, sigma: f64, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let z0 = mu + sigma * rng.normal();
                let e = rng.normal();
                ((1.0 - t) * z0 + t * e, z0 - e)
            })
            .collect()
    }

    #[test]
    fn oracle_gain_zero_at_half() {
        assert_eq!(gaussian_gain(0.5, 1.0), 0.0);
        let zt = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let p = gaussian_oracle(&zt, &[0.5, 0.5], 0.0, 1.0).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_matches_regression() {
        for (t, mu, sigma) in [(0.05, 0.3, 0.7), (0.3, -1.0, 2.0), (0.8, 3.0, 0.5)] {
            let ps = pairs(200_000, t, mu, sigma, 21);
            let n = ps.len() as f64;
            let mx = ps.iter().map(|p| p.0).sum::<f64>() / n;
            let my = ps.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy = ps.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
            let sxx = ps.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
            let slope = sxy / sxx;
            let k = gaussian_gain(t, sigma);
            assert!((slope - k).abs() < 0.02 * k.abs().max(0.1), "t={t}: {slope} vs {k}");
            let intercept = my - slope * mx;
            let want = mu - k * (1.0 - t) * mu;
            assert!((intercept - want).abs() < 0.02 * want.abs().max(1.0), "t={t}: {intercept} vs {want}");

            let mse = ps.iter().map(|&(z, y)| (oracle_prediction(z, t, mu, sigma) - y).powi(2)).sum::<f64>() / n;
            let want = optimal_loss(t, sigma);
            assert!((mse / want - 1.0).abs() < 0.02, "t={t}: {mse} vs {want}");
        }
    }

    #[test]
    fn oracle_beats_other_predictors() {
        let (mu, sigma) = (1.5, 0.8);
        let mut rng = Rng::new(4);
        let z0 = Tensor::<f64>::from_fn(&[4000, 4], |_| mu + sigma * rng.normal());
        let batch = make_batch(&z0, &mut rng, &TimestepDist::default()).unwrap();
        let ts: Vec<f64> = batch.t.clone();
        let best = flow_loss(&gaussian_oracle(&batch.zt, &ts, mu, sigma).unwrap(), &batch).unwrap();
        let per = 4;
        let others: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
            Box::new(|_, _| 0.0),
            Box::new(|z, _| -z),
            Box::new(|z, t| oracle_prediction(z, t, mu, sigma) * 1.1),
            Box::new(|z, t| oracle_prediction(z, t, 0.0, 1.0)),
            Box::new(|z, t| oracle_prediction(z, (t + 0.1).min(0.99), mu, sigma)),
        ];
        for g in others {
            let pred = Tensor::from_fn(batch.zt.shape(), |i| g(batch.zt.data()[i], ts[i / per]));
            assert!(best <= flow_loss(&pred, &batch).unwrap());
        }
    }
}
