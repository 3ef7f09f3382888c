use crate::error::{dim_err, Result};
use crate::numerics::{Scalar, Tensor};

fn dims4<T: Scalar>(z: &Tensor<T>) -> Result<[usize; 4]> {
    match z.shape() {
        [b, c, h, w] => Ok([*b, *c, *h, *w]),
        s => Err(dim_err!("expected a [batch, channels, height, width] latent, got {s:?}")),
    }
}

/// `[B, C, H, W]` to `(B · H/p · W/p) × (p²C)` tokens. Tokens run over the
/// patch grid in row-major order; features are ordered `(c, dy, dx)`.
pub fn patchify<T: Scalar>(z: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(z)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("latent {h}x{w} not divisible by patch {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let feat = p * p * c;
    let src = z.data();
    let mut out = Vec::with_capacity(z.numel());
    for s in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((s * c + ch) * h + gy * p + dy) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b * gh * gw, feat], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, batch: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("latent {h}x{w} not divisible by patch {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != [batch * gh * gw, p * p * c] {
        return Err(dim_err!(
            "tokens {:?} do not match a {batch}x{c}x{h}x{w} latent with patch {p}",
            tokens.shape()
        ));
    }
    let mut out = vec![T::zero(); batch * c * h * w];
    let mut it = tokens.data().chunks_exact(p);
    for s in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((s * c + ch) * h + gy * p + dy) * w + gx * p;
                        out[row..row + p].copy_from_slice(it.next().expect("length checked"));
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, c, h, w], out)
}

/// Sinusoidal features of `1000 t`: `[cos(1000 t ω_k) | sin(1000 t ω_k)]`
/// with `ω_k = 10000^(-k / (dim/2))`.
pub fn timestep_embedding<T: Scalar>(t: &[T], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (i, &tv) in t.iter().enumerate() {
        let row = out.row_mut(i);
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = 1000.0 * tv.as_f64() * freq;
            row[k] = T::lit(arg.cos());
            row[half + k] = T::lit(arg.sin());
        }
    }
    out
}
