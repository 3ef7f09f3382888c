use super::params::{Component, Grads, Init, Layout, LinearParams, ParamStore};
use crate::error::{dim_err, Result};
use crate::numerics::{Scalar, Tensor};

/// Which sublayer of a block a modulation triple belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    Attention,
    Mlp,
}

impl Site {
    fn offset(self) -> usize {
        match self {
            Site::Attention => 0,
            Site::Mlp => 3,
        }
    }
}

const SHIFT: usize = 0;
const SCALE: usize = 1;
const GATE: usize = 2;

/// Per-stream projections from the conditioning vector to six modulation
/// vectors: shift, scale and gate for the attention sublayer, then the same
/// for the MLP. Weights and biases start at zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdaLnParams {
    pub streams: Vec<LinearParams>,
    pub width: usize,
}

impl AdaLnParams {
    pub fn register(layout: &mut Layout, name: &str, width: usize, streams: usize) -> Self {
        let streams = (0..streams)
            .map(|s| LinearParams::register(layout, &format!("{name}.{s}"), width, 6 * width, Component::AdaLn, Init::Zeros))
            .collect();
        Self { streams, width }
    }

    fn stream(&self, stream: usize) -> Result<&LinearParams> {
        self.streams
            .get(stream)
            .ok_or_else(|| dim_err!("stream {stream} out of range for {} AdaLN streams", self.streams.len()))
    }

    /// Modulation vectors for each row of `cond` (batch × d).
    pub fn modulation<T: Scalar>(&self, store: &ParamStore<T>, cond: &Tensor<T>, stream: usize) -> Result<Modulation<T>> {
        let lin = self.stream(stream)?;
        let (_, w) = cond.dims2()?;
        if w != self.width {
            return Err(dim_err!("conditioning width {w}, AdaLN expects {}", self.width));
        }
        Ok(Modulation {
            raw: lin.forward(store, cond)?,
            width: self.width,
        })
    }

    /// Backpropagates a modulation gradient (batch × 6d); returns d(cond).
    pub fn modulation_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cond: &Tensor<T>,
        stream: usize,
        dmod: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.stream(stream)?.backward(store, grads, cond, dmod)
    }
}

/// The `(shift, scale, gate)` vectors of both sublayers for one stream.
#[derive(Clone, Debug)]
pub struct Modulation<T: Scalar> {
    raw: Tensor<T>,
    width: usize,
}

impl<T: Scalar> Modulation<T> {
    pub fn from_raw(raw: Tensor<T>) -> Result<Self> {
        let (_, w) = raw.dims2()?;
        if w % 6 != 0 {
            return Err(dim_err!("modulation width {w} is not a multiple of 6"));
        }
        Ok(Self { raw, width: w / 6 })
    }

    pub fn raw(&self) -> &Tensor<T> {
        &self.raw
    }

    pub fn batch(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn zeros_grad(&self) -> Tensor<T> {
        Tensor::zeros(self.raw.shape())
    }

    fn part(&self, b: usize, k: usize) -> &[T] {
        &self.raw.row(b)[k * self.width..(k + 1) * self.width]
    }

    pub fn shift(&self, b: usize, site: Site) -> &[T] {
        self.part(b, site.offset() + SHIFT)
    }

    pub fn scale(&self, b: usize, site: Site) -> &[T] {
        self.part(b, site.offset() + SCALE)
    }

    pub fn gate(&self, b: usize, site: Site) -> &[T] {
        self.part(b, site.offset() + GATE)
    }

    fn check(&self, x: &Tensor<T>, tokens: usize) -> Result<usize> {
        let (rows, w) = x.dims2()?;
        if w != self.width || rows != tokens * self.batch() {
            return Err(dim_err!(
                "rows {rows}x{w} do not match modulation batch {} x {tokens} tokens, width {}",
                self.batch(),
                self.width
            ));
        }
        Ok(rows)
    }

    /// `hn * (1 + scale) + shift`, broadcast over the `tokens` rows of each sample.
    pub fn modulate(&self, hn: &Tensor<T>, tokens: usize, site: Site) -> Result<Tensor<T>> {
        let rows = self.check(hn, tokens)?;
        let mut out = hn.clone();
        for r in 0..rows {
            let b = r / tokens;
            let (sh, sc) = (self.shift(b, site), self.scale(b, site));
            for ((o, &s), &c) in out.row_mut(r).iter_mut().zip(sh).zip(sc) {
                *o = *o * (T::one() + c) + s;
            }
        }
        Ok(out)
    }

    /// Returns d(hn); accumulates the shift and scale gradients into `dmod`.
    pub fn modulate_backward(
        &self,
        hn: &Tensor<T>,
        dh: &Tensor<T>,
        tokens: usize,
        site: Site,
        dmod: &mut Tensor<T>,
    ) -> Result<Tensor<T>> {
        let rows = self.check(dh, tokens)?;
        let d = self.width;
        let mut dhn = dh.clone();
        for r in 0..rows {
            let b = r / tokens;
            let sc = self.scale(b, site);
            let drow = &mut dmod.row_mut(b)[site.offset() * d..(site.offset() + 2) * d];
            let (dshift, dscale) = drow.split_at_mut(d);
            for j in 0..d {
                let g = dh.row(r)[j];
                dshift[j] += g;
                dscale[j] += g * hn.row(r)[j];
                dhn.row_mut(r)[j] = g * (T::one() + sc[j]);
            }
        }
        Ok(dhn)
    }

    /// `x += gate ⊙ y`.
    pub fn gate_residual(&self, x: &mut Tensor<T>, y: &Tensor<T>, tokens: usize, site: Site) -> Result<()> {
        let rows = self.check(x, tokens)?;
        x.expect_same_shape(y)?;
        for r in 0..rows {
            let g = self.gate(r / tokens, site);
            let yr = y.row(r).to_vec();
            for ((o, &gv), yv) in x.row_mut(r).iter_mut().zip(g).zip(yr) {
                *o += gv * yv;
            }
        }
        Ok(())
    }

    /// Returns d(y) for a residual `x + gate ⊙ y`; accumulates d(gate).
    pub fn gate_backward(
        &self,
        dx: &Tensor<T>,
        y: &Tensor<T>,
        tokens: usize,
        site: Site,
        dmod: &mut Tensor<T>,
    ) -> Result<Tensor<T>> {
        let rows = self.check(dx, tokens)?;
        let d = self.width;
        let mut dy = dx.clone();
        for r in 0..rows {
            let b = r / tokens;
            let g = self.gate(b, site);
            let dg = &mut dmod.row_mut(b)[(site.offset() + GATE) * d..(site.offset() + GATE + 1) * d];
            for j in 0..d {
                dg[j] += dx.row(r)[j] * y.row(r)[j];
                dy.row_mut(r)[j] = dx.row(r)[j] * g[j];
            }
        }
        Ok(dy)
    }
}

/// The modulation triple of one stream for a single conditioning vector.
pub struct Triple<T> {
    pub shift: Vec<T>,
    pub scale: Vec<T>,
    pub gate: Vec<T>,
}

/// Shift, scale and gate for both sublayers, for one conditioning vector.
pub fn adaln_modulate<T: Scalar>(
    store: &ParamStore<T>,
    params: &AdaLnParams,
    cond: &[T],
    stream: usize,
) -> Result<[Triple<T>; 2]> {
    let c = Tensor::new(&[1, cond.len()], cond.to_vec())?;
    let m = params.modulation(store, &c, stream)?;
    Ok([Site::Attention, Site::Mlp].map(|s| Triple {
        shift: m.shift(0, s).to_vec(),
        scale: m.scale(0, s).to_vec(),
        gate: m.gate(0, s).to_vec(),
    }))
}
