use super::config::{ModelConfig, Variant};
use super::model::{build_layout, Model};
use crate::error::{config_err, dim_err, Result};
use crate::layers::ParamStore;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharingMode {
    /// One block (QKVO and MLP) for every layer.
    Full,
    /// QKVO shared, MLPs per layer.
    Attention,
}

impl SharingMode {
    pub fn variant(self) -> Variant {
        match self {
            SharingMode::Full => Variant::DitAirLiteFull,
            SharingMode::Attention => Variant::DitAirLiteAttention,
        }
    }
}

/// Builds the `target` model taking each value from `source(name)`.
fn remap<T: Scalar>(config: &ModelConfig, source: impl Fn(&str) -> Option<Tensor<T>>) -> Result<Model<T>> {
    let (layout, _) = build_layout(config)?;
    let mut values = Vec::with_capacity(layout.len());
    for spec in layout.specs() {
        let t = source(&spec.name).ok_or_else(|| dim_err!("no source tensor for {}", spec.name))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(dim_err!("source tensor for {} has shape {:?}", spec.name, t.shape()));
        }
        values.push(t);
    }
    Model::from_store(config, ParamStore::from_parts(layout, values)?)
}

/// Converts a DiT-Air model into a Lite variant. Shared parameters take the
/// values of layer 0; every other layer's copies are dropped.
pub fn apply_sharing<T: Scalar>(model: &Model<T>, mode: SharingMode) -> Result<Model<T>> {
    if model.config().variant != Variant::DitAir {
        return Err(config_err!("sharing applies to dit_air models, got {}", model.config().variant));
    }
    let mut cfg = model.config().clone();
    cfg.variant = mode.variant();
    let store = model.store();
    remap(&cfg, |name| {
        let src = match name.strip_prefix("shared.") {
            Some(rest) => format!("blocks.0.{rest}"),
            None => name.to_string(),
        };
        store.by_name(&src).cloned()
    })
}

/// Converts a Lite model back into DiT-Air with every layer holding its own
/// copy of the shared values.
pub fn untie<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    if !matches!(
        model.config().variant,
        Variant::DitAirLiteFull | Variant::DitAirLiteAttention | Variant::DitAir
    ) {
        return Err(config_err!("untie expects a dit_air family model, got {}", model.config().variant));
    }
    let mut cfg = model.config().clone();
    cfg.variant = Variant::DitAir;
    let store = model.store();
    remap(&cfg, |name| {
        if let Some(t) = store.by_name(name) {
            return Some(t.clone());
        }
        let rest = name.strip_prefix("blocks.")?.split_once('.')?.1;
        store.by_name(&format!("shared.{rest}")).cloned()
    })
}
