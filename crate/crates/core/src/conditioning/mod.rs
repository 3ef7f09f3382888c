//! Toy text conditioning.
//!
//! A seeded [`ToyEncoder`] stands in for a pretrained text encoder: an
//! embedding table followed by `M` mixing layers, each exposing its hidden
//! states. [`ToyEncoder::encode`] selects one layer or concatenates several
//! and projects back to the encoder width, then pools. The projection to the
//! transformer width lives in the model.

use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Probability of replacing a training condition with the null condition.
pub const P_DROP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CondBundle<T: Scalar = f32> {
    /// `l_text × d_enc`
    pub tokens: Tensor<T>,
    /// `d_enc`
    pub pooled: Tensor<T>,
    /// When set, the model substitutes its learned null embedding.
    pub is_null: bool,
}

impl<T: Scalar> CondBundle<T> {
    pub fn new(tokens: Tensor<T>, pooled: Tensor<T>) -> Result<Self> {
        let (_, d) = tokens.dims2()?;
        if pooled.shape() != [d] {
            return Err(dim_err!("pooled shape {:?} does not match token width {d}", pooled.shape()));
        }
        Ok(Self {
            tokens,
            pooled,
            is_null: false,
        })
    }

    /// Placeholder for the unconditional input; the values are ignored by the model.
    pub fn null(text_len: usize, d_enc: usize) -> Self {
        Self {
            tokens: Tensor::zeros(&[text_len, d_enc]),
            pooled: Tensor::zeros(&[d_enc]),
            is_null: true,
        }
    }

    pub fn text_len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pooled.numel()
    }

    pub fn cast<U: Scalar>(&self) -> CondBundle<U> {
        CondBundle {
            tokens: self.tokens.cast(),
            pooled: self.pooled.cast(),
            is_null: self.is_null,
        }
    }
}

/// Replaces each bundle by the null condition with probability `p`.
/// Returns how many were dropped.
pub fn drop_conditions<T: Scalar>(bundles: &mut [CondBundle<T>], p: f64, rng: &mut Rng) -> usize {
    let mut n = 0;
    for b in bundles {
        if rng.bernoulli(p) {
            b.is_null = true;
            n += 1;
        }
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Last token (the only one that has seen the whole prompt).
    Causal,
    /// Mean over tokens.
    Bidirectional,
}

pub fn pool<T: Scalar>(hidden: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (l, d) = hidden.dims2()?;
    if l == 0 {
        return Err(dim_err!("cannot pool an empty sequence"));
    }
    let data = match mode {
        PoolMode::Causal => hidden.row(l - 1).to_vec(),
        PoolMode::Bidirectional => {
            let n = T::lit(l as f64);
            (0..d)
                .map(|j| (0..l).map(|i| hidden.row(i)[j]).sum::<T>() / n)
                .collect()
        }
    };
    Tensor::new(&[d], data)
}

/// Which encoder layers feed the condition. Layers are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Single(usize),
    Concat(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    vocab: usize,
    width: usize,
    mode: PoolMode,
    table: Tensor<f64>,
    mixers: Vec<Tensor<f64>>,
}

/// Random orthogonal `n × n` matrix by Gram–Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_fn(&[n, n], |i| cols[i % n][i / n])
}

impl ToyEncoder {
    pub fn new(vocab: usize, width: usize, layers: usize, mode: PoolMode, seed: u64) -> Result<Self> {
        if vocab == 0 || width == 0 || layers == 0 {
            return Err(config_err!("encoder vocab, width and layers must be positive"));
        }
        let rng = Rng::new(seed);
        let table = Tensor::randn(&[vocab, width], 1.0, &mut rng.child(0));
        let mixers = (0..layers)
            .map(|k| random_orthogonal(width, &mut rng.child(k as u64 + 1)))
            .collect();
        Ok(Self {
            vocab,
            width,
            mode,
            table,
            mixers,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.mixers.len()
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    /// Hidden states of layers `1..=M`, each `l × width`.
    ///
    /// Layer `k` maps token `i` to `tanh(((h_i + ctx_i) / 2) Q_k)` where `ctx_i`
    /// averages tokens `0..=i` (causal) or all tokens (bidirectional).
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Vec<Tensor<f64>>> {
        if ids.is_empty() {
            return Err(dim_err!("empty token sequence"));
        }
        let mut h = crate::numerics::kernels::embedding(&self.table, ids)?;
        let (l, d) = (ids.len(), self.width);
        let mut out = Vec::with_capacity(self.mixers.len());
        for q in &self.mixers {
            let mut mixed = Tensor::zeros(&[l, d]);
            let mut prefix = vec![0.0; d];
            let total: Vec<f64> = (0..d).map(|j| (0..l).map(|i| h.row(i)[j]).sum()).collect();
            for i in 0..l {
                prefix.iter_mut().zip(h.row(i)).for_each(|(p, &v)| *p += v);
                let ctx: Vec<f64> = match self.mode {
                    PoolMode::Causal => prefix.iter().map(|p| p / (i + 1) as f64).collect(),
                    PoolMode::Bidirectional => total.iter().map(|t| t / l as f64).collect(),
                };
                for (j, m) in mixed.row_mut(i).iter_mut().enumerate() {
                    *m = 0.5 * (h.row(i)[j] + ctx[j]);
                }
            }
            h = crate::numerics::matmul(&mixed, q)?.map(f64::tanh);
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Identity-style projection for a concatenation of `m` layers:
    /// `[I/m; I/m; ...]`, so equal inputs map to themselves.
    pub fn default_projection(&self, m: usize) -> Tensor<f64> {
        let d = self.width;
        Tensor::from_fn(&[m * d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r % d == c {
                1.0 / m as f64
            } else {
                0.0
            }
        })
    }

    pub fn encode(&self, ids: &[usize], spec: &LayerSpec) -> Result<CondBundle<f32>> {
        let layers = match spec {
            LayerSpec::Single(k) => vec![*k],
            LayerSpec::Concat(ks) => ks.clone(),
        };
        let proj = self.default_projection(layers.len());
        self.encode_with(ids, &layers, &proj)
    }

    /// Concatenates the requested layers feature-wise, applies `projection`
    /// (`m·width × width`) and pools the final layer.
    pub fn encode_with(&self, ids: &[usize], layers: &[usize], projection: &Tensor<f64>) -> Result<CondBundle<f32>> {
        if layers.is_empty() {
            return Err(config_err!("layer list is empty"));
        }
        if let Some(&k) = layers.iter().find(|&&k| k == 0 || k > self.layers()) {
            return Err(config_err!("layer {k} outside 1..={}", self.layers()));
        }
        let (m, d) = (layers.len(), self.width);
        if projection.shape() != [m * d, d] {
            return Err(dim_err!("projection shape {:?}, expected [{}, {d}]", projection.shape(), m * d));
        }
        let hidden = self.hidden_states(ids)?;
        let l = ids.len();
        let concat = Tensor::from_fn(&[l, m * d], |i| {
            let (row, col) = (i / (m * d), i % (m * d));
            hidden[layers[col / d] - 1].row(row)[col % d]
        });
        let tokens = crate::numerics::matmul(&concat, projection)?;
        let pooled = pool(hidden.last().expect("at least one layer"), self.mode)?;
        CondBundle::new(tokens.cast(), pooled.cast())
    }
}

/// One prompt per non-empty line, whitespace-separated token ids.
pub fn parse_prompts(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| config_err!("prompt line {}: bad token {t:?}", i + 1))
                })
                .collect()
        })
        .collect()
}

/// Truncates or right-pads with `pad` to exactly `len` ids.
pub fn pad_ids(ids: &[usize], len: usize, pad: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ids.iter().copied().take(len).collect();
    out.resize(len, pad);
    out
}
