//! Differentiable kernels. Each forward has a matching `*_backward`.
//!
//! Matrix products accumulate over the inner index in increasing order, so
//! every output element is bit-identical to the textbook triple loop.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

const MR: usize = 4;
const NR: usize = 16;

/// `c[r][j] += Σ_q a(r, q)·b[q][j]` where `a(r, q) = a[r·rs + q·qs]`.
///
/// Output tiles of `MR × NR` live in registers while `q` runs in increasing
/// order, so rounding matches a plain triple loop.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(rows: usize, inner: usize, n: usize, a: &[T], rs: usize, qs: usize, b: &[T], c: &mut [T]) {
    for r0 in (0..rows).step_by(MR) {
        let mr = MR.min(rows - r0);
        for j0 in (0..n).step_by(NR) {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[T::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(r0 + r) * n + j0..(r0 + r) * n + j0 + NR]);
                }
                for q in 0..inner {
                    let bq: &[T; NR] = b[q * n + j0..q * n + j0 + NR].try_into().expect("tile width");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let x = a[(r0 + r) * rs + q * qs];
                        for (v, &bv) in row.iter_mut().zip(bq) {
                            *v += x * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(r0 + r) * n + j0..(r0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in r0..r0 + mr {
                    let ci = &mut c[r * n + j0..r * n + j0 + nr];
                    for q in 0..inner {
                        let x = a[r * rs + q * qs];
                        for (v, &bv) in ci.iter_mut().zip(&b[q * n + j0..q * n + j0 + nr]) {
                            *v += x * bv;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(m, k, n, a, k, 1, b, c);
}

/// `c[k×n] += aᵀ · b` with `a: m×k`, `b: m×n`.
pub fn gemm_at_b_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    gemm_strided(k, m, n, a, 1, k, b, c);
}

/// `c[m×k] += a · bᵀ` with `a: m×n`, `b: k×n`.
pub fn gemm_a_bt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(k, n, b);
    gemm_acc(m, n, k, a, &bt, c);
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// `y = x·W + b` for `x: m×in`, `W: in×out`, `b: out`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k) = x.dims2()?;
    let (k2, n) = w.dims2()?;
    if k != k2 {
        return Err(dim_err!("linear input width {k} but weight is {k2}x{n}"));
    }
    let mut y = Tensor::zeros(&[m, n]);
    gemm_acc(m, k, n, x.data(), w.data(), y.data_mut());
    if let Some(b) = b {
        add_bias(&mut y, b)?;
    }
    Ok(y)
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ_rows dy` and returns `dx = dy·Wᵀ`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
) -> Result<Tensor<T>> {
    let (m, k) = x.dims2()?;
    let (_, n) = w.dims2()?;
    if dy.shape() != [m, n] {
        return Err(dim_err!("linear upstream grad {:?}, expected [{m}, {n}]", dy.shape()));
    }
    gemm_at_b_acc(m, k, n, x.data(), dy.data(), dw.data_mut());
    if let Some(db) = db {
        bias_backward(dy, db);
    }
    let mut dx = Tensor::zeros(&[m, k]);
    gemm_a_bt_acc(m, n, k, dy.data(), w.data(), dx.data_mut());
    Ok(dx)
}

/// Adds `bias` to every row.
pub fn add_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (_, n) = x.dims2()?;
    if bias.numel() != n {
        return Err(dim_err!("bias width {} vs rows of width {n}", bias.numel()));
    }
    for row in x.data_mut().chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// `db += Σ_rows dy`
pub fn bias_backward<T: Scalar>(dy: &Tensor<T>, db: &mut Tensor<T>) {
    let n = db.numel();
    for row in dy.data().chunks_exact(n) {
        for (g, &d) in db.data_mut().iter_mut().zip(row) {
            *g += d;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three_a = T::lit(3.0 * GELU_A);
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let th = (c * (v + a * v * v * v)).tanh();
        let d = half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three_a * v * v);
        *g *= d;
    }
    out
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *g *= s * (T::one() + v * (T::one() - s));
    }
    out
}

/// Row-wise softmax of a `rows × cols` slice. With `causal`, entry `(i, j)`
/// is masked out when `j > i`.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, causal: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let limit = if causal { (r + 1).min(cols) } else { cols };
        let src = &x[r * cols..r * cols + limit];
        let dst = &mut out[r * cols..r * cols + limit];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Gradient w.r.t. the logits given softmax output `p` and upstream `dp`.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dp: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let pr = &p[r * cols..(r + 1) * cols];
        let dr = &dp[r * cols..(r + 1) * cols];
        let dot: T = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &dv) in out[r * cols..(r + 1) * cols].iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - dot);
        }
    }
    out
}

pub const NORM_EPS: f64 = 1e-6;

/// Affine-free layer norm over the last axis. Returns the normalized rows and
/// the per-row reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (rows, cols) = x.dims2()?;
    let eps = T::lit(NORM_EPS);
    let n = T::lit(cols as f64);
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(rows);
    for row in y.data_mut().chunks_exact_mut(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    Ok((y, rstd))
}

/// Backward of [`layer_norm`] from its normalized output `y` and `rstd`.
pub fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, rstd: &[T], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = y.dims2()?;
    y.expect_same_shape(dy)?;
    let n = T::lit(cols as f64);
    let mut dx = dy.clone();
    for ((dxr, yr), &r) in dx
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(y.data().chunks_exact(cols))
        .zip(rstd)
    {
        let mean_dy = dxr.iter().copied().sum::<T>() / n;
        let mean_dyy = dxr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / n;
        for (g, &v) in dxr.iter_mut().zip(yr) {
            *g = r * (*g - mean_dy - v * mean_dyy);
        }
    }
    Ok(dx)
}

/// RMS norm with learned gain over rows of width `gain.len()`, on a raw slice.
/// Returns `(normalized_without_gain, rstd)`; the gained output is written to `out`.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> (Vec<T>, Vec<T>) {
    let cols = gain.len();
    let eps = T::lit(NORM_EPS);
    let n = T::lit(cols as f64);
    let mut normed = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for ((xr, nr), or) in x
        .chunks_exact(cols)
        .zip(normed.chunks_exact_mut(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::one() / (ms + eps).sqrt();
        for (((nv, ov), &xv), &g) in nr.iter_mut().zip(or.iter_mut()).zip(xr).zip(gain) {
            *nv = xv * r;
            *ov = *nv * g;
        }
        rstd.push(r);
    }
    (normed, rstd)
}

/// Backward of [`rms_norm_rows`]; accumulates into `dgain` and returns `dx`.
pub fn rms_norm_rows_backward<T: Scalar>(
    normed: &[T],
    rstd: &[T],
    gain: &[T],
    dy: &[T],
    dgain: &mut [T],
) -> Vec<T> {
    let cols = gain.len();
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (((dxr, nr), dyr), &r) in dx
        .chunks_exact_mut(cols)
        .zip(normed.chunks_exact(cols))
        .zip(dy.chunks_exact(cols))
        .zip(rstd)
    {
        let mut dot = T::zero();
        for j in 0..cols {
            dgain[j] += dyr[j] * nr[j];
            let dn = dyr[j] * gain[j];
            dxr[j] = dn;
            dot += dn * nr[j];
        }
        let mean = dot / n;
        for j in 0..cols {
            dxr[j] = r * (dxr[j] - nr[j] * mean);
        }
    }
    dx
}

/// Rotates consecutive pairs `(x[2j], x[2j+1])` of one vector by the angles
/// whose cosines/sines are given. `inverse` rotates by the negated angles.
pub fn rotate_pairs<T: Scalar>(x: &mut [T], cos: &[T], sin: &[T], inverse: bool) {
    for (j, pair) in x.chunks_exact_mut(2).enumerate() {
        let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Gathers rows of `table` (vocab × d).
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, d) = table.dims2()?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(dim_err!("token id {id} outside vocabulary of {vocab}"));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-adds `dy` rows into `dtable`.
pub fn embedding_backward<T: Scalar>(ids: &[usize], dy: &Tensor<T>, dtable: &mut Tensor<T>) {
    for (i, &id) in ids.iter().enumerate() {
        for (g, &d) in dtable.row_mut(id).iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
}

/// Mean of squared differences over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target)?;
    let n = T::lit(pred.numel() as f64);
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n)
}

pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let scale = T::lit(2.0 / pred.numel() as f64);
    pred.zip_map(target, |p, t| scale * (p - t))
}
