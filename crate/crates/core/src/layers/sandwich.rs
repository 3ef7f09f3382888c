use super::adaln::{Modulation, Site};
use crate::error::Result;
use crate::numerics::kernels::{layer_norm, layer_norm_backward};
use crate::numerics::{Scalar, Tensor};

/// Saved intermediates of the pre-norm (`modulate(LN(x))`).
#[derive(Clone, Debug)]
pub struct PreNorm<T: Scalar> {
    pub normed: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Saved intermediates of the post-norm and gated residual.
#[derive(Clone, Debug)]
pub struct PostNorm<T: Scalar> {
    pub normed: Tensor<T>,
    pub rstd: Vec<T>,
}

/// `modulate(LN(x))`: the sublayer input.
pub fn pre_norm<T: Scalar>(
    x: &Tensor<T>,
    m: &Modulation<T>,
    tokens: usize,
    site: Site,
) -> Result<(Tensor<T>, PreNorm<T>)> {
    let (normed, rstd) = layer_norm(x)?;
    let h = m.modulate(&normed, tokens, site)?;
    Ok((h, PreNorm { normed, rstd }))
}

pub fn pre_norm_backward<T: Scalar>(
    cache: &PreNorm<T>,
    m: &Modulation<T>,
    dh: &Tensor<T>,
    tokens: usize,
    site: Site,
    dmod: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let dn = m.modulate_backward(&cache.normed, dh, tokens, site, dmod)?;
    layer_norm_backward(&cache.normed, &cache.rstd, &dn)
}

/// `x += gate ⊙ LN(y)`.
pub fn post_norm_residual<T: Scalar>(
    x: &mut Tensor<T>,
    y: &Tensor<T>,
    m: &Modulation<T>,
    tokens: usize,
    site: Site,
) -> Result<PostNorm<T>> {
    let (normed, rstd) = layer_norm(y)?;
    m.gate_residual(x, &normed, tokens, site)?;
    Ok(PostNorm { normed, rstd })
}

/// Given d(x_out), returns d(y); the identity path to d(x) is the caller's.
pub fn post_norm_residual_backward<T: Scalar>(
    cache: &PostNorm<T>,
    m: &Modulation<T>,
    dx: &Tensor<T>,
    tokens: usize,
    site: Site,
    dmod: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let dn = m.gate_backward(dx, &cache.normed, tokens, site, dmod)?;
    layer_norm_backward(&cache.normed, &cache.rstd, &dn)
}

/// `x + gate ⊙ LN(sublayer(modulate(LN(x))))` for a sublayer acting on the
/// rows of a single stream.
pub fn sandwich_block<T: Scalar>(
    x: &Tensor<T>,
    m: &Modulation<T>,
    tokens: usize,
    site: Site,
    sublayer: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let (h, _) = pre_norm(x, m, tokens, site)?;
    let y = sublayer(&h)?;
    let mut out = x.clone();
    post_norm_residual(&mut out, &y, m, tokens, site)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Layout, MlpParams, ParamStore};
    use crate::numerics::kernels::gelu;
    use crate::numerics::{grad_check, Rng};

    #[test]
    fn zero_gate_returns_input() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let m = Modulation::from_raw(Tensor::zeros(&[2, 48])).unwrap();
        let out = sandwich_block(&x, &m, 2, Site::Attention, |h| Ok(h.scale(3.0))).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn post_norm_has_unit_rms() {
        let mut rng = Rng::new(2);
        let y = Tensor::<f64>::randn(&[5, 16], 4.0, &mut rng);
        let mut x = Tensor::zeros(&[5, 16]);
        let m = Modulation::from_raw(Tensor::randn(&[1, 96], 1.0, &mut rng)).unwrap();
        let cache = post_norm_residual(&mut x, &y, &m, 5, Site::Mlp).unwrap();
        for r in 0..5 {
            let ms = cache.normed.row(r).iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mlp_block_matches_straight_line_reference() {
        let d = 16;
        let mut layout = Layout::new();
        let p = MlpParams::register(&mut layout, "mlp", d);
        let store = ParamStore::<f64>::materialize(layout, &Rng::new(3));
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::randn(&[3, d], 1.0, &mut rng);
        let raw = Tensor::<f64>::randn(&[1, 6 * d], 0.5, &mut rng);
        let m = Modulation::from_raw(raw.clone()).unwrap();
        let out = sandwich_block(&x, &m, 3, Site::Mlp, |h| p.forward(&store, h).map(|r| r.0)).unwrap();

        let (shift, scale, gate) = (&raw.data()[3 * d..4 * d], &raw.data()[4 * d..5 * d], &raw.data()[5 * d..]);
        let ln = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - mean) / (var + 1e-6).sqrt()).collect::<Vec<_>>()
        };
        let (wu, wd) = (store.get(p.up.weight).data(), store.get(p.down.weight).data());
        for r in 0..3 {
            let n = ln(x.row(r));
            let h: Vec<f64> = (0..d).map(|j| n[j] * (1.0 + scale[j]) + shift[j]).collect();
            let pre: Vec<f64> = (0..4 * d).map(|k| (0..d).map(|j| h[j] * wu[j * 4 * d + k]).sum()).collect();
            let act = gelu(&Tensor::new(&[4 * d], pre).unwrap()).into_data();
            let y: Vec<f64> = (0..d).map(|j| (0..4 * d).map(|k| act[k] * wd[k * d + j]).sum()).collect();
            let yn = ln(&y);
            for j in 0..d {
                let expect = x.row(r)[j] + gate[j] * yn[j];
                assert!((out.row(r)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_through_both_norms() {
        let mut rng = Rng::new(5);
        let (batch, tokens, d) = (2, 2, 4);
        let x = Tensor::<f64>::randn(&[batch * tokens, d], 1.0, &mut rng);
        let raw = Tensor::<f64>::randn(&[batch, 6 * d], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[d, d], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(&[batch * tokens, d], 1.0, &mut rng);
        let nx = x.numel();
        let run = |x: &Tensor<f64>, raw: &Tensor<f64>| {
            let m = Modulation::from_raw(raw.clone()).unwrap();
            sandwich_block(x, &m, tokens, Site::Attention, |h| crate::numerics::matmul(h, &w)).unwrap()
        };
        let loss = |flat: &[f64]| {
            let x = Tensor::new(&[batch * tokens, d], flat[..nx].to_vec()).unwrap();
            let raw = Tensor::new(&[batch, 6 * d], flat[nx..].to_vec()).unwrap();
            run(&x, &raw).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let m = Modulation::from_raw(raw.clone()).unwrap();
        let (h, pre) = pre_norm(&x, &m, tokens, Site::Attention).unwrap();
        let y = crate::numerics::matmul(&h, &w).unwrap();
        let mut out = x.clone();
        let post = post_norm_residual(&mut out, &y, &m, tokens, Site::Attention).unwrap();
        let mut dmod = m.zeros_grad();
        let dy = post_norm_residual_backward(&post, &m, &r, tokens, Site::Attention, &mut dmod).unwrap();
        let wt = Tensor::new(&[d, d], crate::numerics::kernels::transpose(d, d, w.data())).unwrap();
        let dh = crate::numerics::matmul(&dy, &wt).unwrap();
        let mut dx = pre_norm_backward(&pre, &m, &dh, tokens, Site::Attention, &mut dmod).unwrap();
        dx.axpy(1.0, &r).unwrap();
        let mut analytic = dx.into_data();
        analytic.extend(dmod.into_data());
        let mut params = x.into_data();
        params.extend(raw.into_data());
        let report = grad_check(loss, &analytic, &params, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
