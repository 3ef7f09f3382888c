//! 2-D convolution and nearest-neighbour upsampling on NCHW tensors.

use super::kernels::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Per-sample unfolded patches kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<Vec<T>>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match x.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(dim_err!("expected NCHW tensor, got {:?}", s)),
    }
}

fn out_size(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    let padded = n + 2 * g.padding;
    if padded < k || g.stride == 0 {
        return Err(dim_err!("kernel {k} does not fit input {n} with padding {}", g.padding));
    }
    Ok((padded - k) / g.stride + 1)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, g: ConvGeometry, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[q * p + oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, g: ConvGeometry, ho: usize, wo: usize, dx: &mut [T]) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let q = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += cols[q * p + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// `weight: [co, ci, k, k]`, `bias: [co]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeometry,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [n, c, h, w] = dims4(x)?;
    let [co, ci, k, k2] = dims4(weight)?;
    if ci != c || k != k2 || bias.numel() != co {
        return Err(dim_err!(
            "conv weight {:?} / bias {:?} incompatible with input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        ));
    }
    let (ho, wo) = (out_size(h, k, g)?, out_size(w, k, g)?);
    let p = ho * wo;
    let q = c * k * k;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cache = ConvCache {
        cols: Vec::with_capacity(n),
        in_shape: [n, c, h, w],
        out_hw: (ho, wo),
    };
    for b in 0..n {
        let cols = im2col(x.row(b), c, h, w, k, g, ho, wo);
        let ob = out.row_mut(b);
        gemm_acc(co, q, p, weight.data(), &cols, ob);
        for (o, &bv) in ob.chunks_exact_mut(p).zip(bias.data()) {
            for v in o.iter_mut() {
                *v += bv;
            }
        }
        cache.cols.push(cols);
    }
    Ok((out, cache))
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    g: ConvGeometry,
    dy: &Tensor<T>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = cache.in_shape;
    let co = weight.shape()[0];
    let k = weight.shape()[2];
    let (ho, wo) = cache.out_hw;
    if dy.shape() != [n, co, ho, wo] {
        return Err(dim_err!("conv upstream grad {:?}", dy.shape()));
    }
    let p = ho * wo;
    let q = c * k * k;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        let dyb = dy.row(b);
        gemm_a_bt_acc(co, p, q, dyb, &cache.cols[b], dweight.data_mut());
        for (g, o) in dbias.data_mut().iter_mut().zip(dyb.chunks_exact(p)) {
            *g += o.iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); q * p];
        gemm_at_b_acc(co, q, p, weight.data(), dyb, &mut dcols);
        col2im(&dcols, c, h, w, k, g, ho, wo, dx.row_mut(b));
    }
    Ok(dx)
}

/// Nearest-neighbour ×`factor` upsampling.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x)?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = dims4(dy)?;
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in dy.data().chunks_exact(oh * ow).zip(dx.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
            }
        }
    }
    Ok(dx)
}
