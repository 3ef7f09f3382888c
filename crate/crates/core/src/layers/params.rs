//! Parameter layout and storage.
//!
//! A [`Layout`] is the shape-only description of a model: one [`ParamSpec`]
//! per unique tensor, in canonical construction order. Layers refer to
//! parameters through [`ParamId`]s, so aliasing (parameter sharing) is just
//! two layers holding the same id. A [`ParamStore`] materializes a layout.

use crate::error::{dim_err, Result};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which row of the parameter accounting a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    AdaLn,
    SelfAttention,
    CrossAttention,
    Mlp,
    /// Patch, timestep, text and pooled-text embedders plus the null condition.
    Embedding,
    /// Final modulation and output projection.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Per-channel scales (QK-norm gains, residual gates).
    Gain,
    /// Learned embedding vectors.
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with std `sqrt(2 / (fan_in + fan_out))` for an `[in, out]` matrix.
    Xavier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    /// Whether the tensor is one of the block weight matrices tallied by the
    /// closed-form accounting (AdaLN, attention and MLP weights; no biases,
    /// gains, embedders or head).
    pub fn is_block_weight(&self) -> bool {
        self.kind == ParamKind::Weight
            && matches!(
                self.component,
                Component::AdaLn | Component::SelfAttention | Component::CrossAttention | Component::Mlp
            )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        component: Component,
        kind: ParamKind,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            component,
            kind,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn total_numel(&self) -> u64 {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

/// Materialized parameters. Each tensor is drawn from its own child stream
/// (`rng.child(index)`), so values do not depend on allocation order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    layout: Layout,
    values: Vec<Tensor<T>>,
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut Rng) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, T::one()),
        Init::Normal(std) => Tensor::randn(&spec.shape, std, rng),
        Init::Xavier => {
            let (fan_in, fan_out) = match spec.shape.as_slice() {
                [i, o] => (*i, *o),
                s => (s.iter().product::<usize>(), s.iter().product::<usize>()),
            };
            Tensor::randn(&spec.shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn materialize(layout: Layout, rng: &Rng) -> Self {
        let values = layout
            .specs
            .iter()
            .enumerate()
            .map(|(i, spec)| init_tensor(spec, &mut rng.child(i as u64)))
            .collect();
        Self { layout, values }
    }

    pub fn from_parts(layout: Layout, values: Vec<Tensor<T>>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(dim_err!("{} specs but {} tensors", layout.len(), values.len()));
        }
        for (spec, v) in layout.specs.iter().zip(&values) {
            if spec.shape != v.shape() {
                return Err(dim_err!(
                    "parameter {} expects shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    v.shape()
                ));
            }
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.find(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor<T>)> {
        self.layout.specs.iter().zip(&self.values)
    }

    /// Total number of scalars actually allocated.
    pub fn allocated_numel(&self) -> u64 {
        self.values.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Concatenation of every tensor, in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.values.iter().map(Tensor::numel).sum();
        if flat.len() != total {
            return Err(dim_err!("flat vector has {} entries, store holds {total}", flat.len()));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. A parameter used at several
/// sites receives the sum of the per-site gradients.
#[derive(Clone, Debug)]
pub struct Grads<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// `weight: [in, out]` and `bias: [out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn register(
        layout: &mut Layout,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        component: Component,
        init: Init,
    ) -> Self {
        let weight = layout.add(format!("{name}.weight"), &[fan_in, fan_out], component, ParamKind::Weight, init);
        let bias = layout.add(format!("{name}.bias"), &[fan_out], component, ParamKind::Bias, Init::Zeros);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::numerics::kernels::linear(x, store.get(self.weight), Some(store.get(self.bias)))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut dw = std::mem::replace(grads.get_mut(self.weight), Tensor::zeros(&[0]));
        let mut db = std::mem::replace(grads.get_mut(self.bias), Tensor::zeros(&[0]));
        let dx = crate::numerics::kernels::linear_backward(x, store.get(self.weight), dy, &mut dw, Some(&mut db));
        *grads.get_mut(self.weight) = dw;
        *grads.get_mut(self.bias) = db;
        dx
    }
}
