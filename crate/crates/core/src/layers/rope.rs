use crate::error::{dim_err, Result};
use crate::numerics::kernels::rotate_pairs;
use crate::numerics::{Scalar, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Per-token rotation angles for 2D rotary embeddings.
///
/// A head vector of width `hd` is split into `hd / 2` planes. Plane `j`
/// rotates by `pos[j % 2] * omega_{j / 2}` where `pos = (row, col)`, so rows
/// and columns each get half of the frequency ladder. Tokens without a
/// position (text) get the identity rotation.
#[derive(Clone, Debug)]
pub struct RopeTable<T: Scalar = f32> {
    pairs: usize,
    tokens: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, positions: &[Option<(i64, i64)>], base: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(dim_err!("rotary dimension {head_dim} is odd"));
        }
        let pairs = head_dim / 2;
        let n_freq = pairs.div_ceil(2).max(1);
        let omega: Vec<f64> = (0..pairs)
            .map(|j| base.powf(-((j / 2) as f64) / n_freq as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for (j, w) in omega.iter().enumerate() {
                let angle = match pos {
                    Some((r, c)) => (if j % 2 == 0 { *r } else { *c }) as f64 * w,
                    None => 0.0,
                };
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(Self {
            pairs,
            tokens: positions.len(),
            cos,
            sin,
        })
    }

    /// Table for an image grid in row-major order.
    pub fn grid(head_dim: usize, rows: usize, cols: usize, base: f64) -> Result<Self> {
        let pos: Vec<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Some((r as i64, c as i64))))
            .collect();
        Self::new(head_dim, &pos, base)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        2 * self.pairs
    }

    /// Rotates every head of every row of a `(batch * tokens) × (heads * hd)`
    /// buffer in place. Row `r` uses token `r % tokens`.
    pub fn apply_rows(&self, x: &mut [T], width: usize, inverse: bool) {
        let hd = self.head_dim();
        for (r, row) in x.chunks_exact_mut(width).enumerate() {
            let t = r % self.tokens;
            let (c, s) = (
                &self.cos[t * self.pairs..(t + 1) * self.pairs],
                &self.sin[t * self.pairs..(t + 1) * self.pairs],
            );
            for head in row.chunks_exact_mut(hd) {
                rotate_pairs(head, c, s, inverse);
            }
        }
    }
}

/// Rotates each row of `vectors` (n × dim) by the 2D position of that row.
pub fn rope2d_apply<T: Scalar>(vectors: &Tensor<T>, positions: &[(i64, i64)]) -> Result<Tensor<T>> {
    let (n, dim) = vectors.dims2()?;
    if positions.len() != n {
        return Err(dim_err!("{n} vectors but {} positions", positions.len()));
    }
    let pos: Vec<_> = positions.iter().copied().map(Some).collect();
    let table = RopeTable::<T>::new(dim, &pos, ROPE_BASE)?;
    let mut out = vectors.clone();
    table.apply_rows(out.data_mut(), dim, false);
    Ok(out)
}
