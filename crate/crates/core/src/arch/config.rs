use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Image-only residual stream, text through cross-attention, one AdaLN set.
    Pixart,
    /// Dual-stream joint attention, AdaLN per layer.
    Mmdit,
    /// Dual-stream joint attention, one AdaLN set for all layers.
    MmditSharedAdaln,
    /// Single-stream joint attention over text and image, shared dual-stream AdaLN.
    DitAir,
    /// DiT-Air with one block parameter set reused by every layer.
    DitAirLiteFull,
    /// DiT-Air with QKVO shared across layers and per-layer MLPs.
    DitAirLiteAttention,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Pixart,
        Variant::Mmdit,
        Variant::MmditSharedAdaln,
        Variant::DitAir,
        Variant::DitAirLiteFull,
        Variant::DitAirLiteAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pixart => "pixart",
            Variant::Mmdit => "mmdit",
            Variant::MmditSharedAdaln => "mmdit_shared_adaln",
            Variant::DitAir => "dit_air",
            Variant::DitAirLiteFull => "dit_air_lite_full",
            Variant::DitAirLiteAttention => "dit_air_lite_attention",
        }
    }

    /// Text and image in one residual sequence.
    pub fn is_joint(self) -> bool {
        self != Variant::Pixart
    }

    /// Separate QKVO/MLP weights for text and image.
    pub fn is_dual_stream(self) -> bool {
        matches!(self, Variant::Mmdit | Variant::MmditSharedAdaln)
    }

    pub fn shares_adaln(self) -> bool {
        self != Variant::Mmdit
    }

    /// AdaLN streams: one per residual stream.
    pub fn adaln_streams(self) -> usize {
        if self.is_joint() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizePreset {
    S,
    B,
    L,
    XL,
    XXL,
}

impl SizePreset {
    pub const ALL: [SizePreset; 5] = [SizePreset::S, SizePreset::B, SizePreset::L, SizePreset::XL, SizePreset::XXL];

    pub fn layers(self) -> usize {
        match self {
            SizePreset::S => 12,
            SizePreset::B => 18,
            SizePreset::L => 24,
            SizePreset::XL => 30,
            SizePreset::XXL => 38,
        }
    }

    pub fn width(self) -> usize {
        64 * self.layers()
    }

    pub fn name(self) -> &'static str {
        match self {
            SizePreset::S => "S",
            SizePreset::B => "B",
            SizePreset::L => "L",
            SizePreset::XL => "XL",
            SizePreset::XXL => "XXL",
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SizePreset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err!("unknown size preset {s:?}"))
    }
}

pub const TIME_FREQ_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    pub patch: usize,
    pub latent_channels: usize,
    /// Square latent side, used for shape checks in sampling and training.
    pub latent_size: usize,
    pub text_len: usize,
    /// Width of incoming text embeddings before projection to `width`.
    pub cond_dim: usize,
    /// Feed the pooled text embedding into AdaLN (ablation switch).
    pub use_pooled: bool,
}

impl ModelConfig {
    pub fn preset(variant: Variant, size: SizePreset) -> Self {
        Self::explicit(variant, size.layers(), size.width())
    }

    pub fn explicit(variant: Variant, layers: usize, width: usize) -> Self {
        Self {
            variant,
            layers,
            width,
            patch: 2,
            latent_channels: 4,
            latent_size: 8,
            text_len: 8,
            cond_dim: 64,
            use_pooled: true,
        }
    }

    pub fn heads(&self) -> usize {
        self.layers
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(config_err!("layers and width must be positive"));
        }
        if self.width % self.heads() != 0 {
            return Err(config_err!("width {} not divisible by {} heads", self.width, self.heads()));
        }
        if self.head_dim() % 2 != 0 {
            return Err(config_err!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.patch == 0 || self.latent_channels == 0 || self.cond_dim == 0 {
            return Err(config_err!("patch, latent_channels and cond_dim must be positive"));
        }
        if self.latent_size % self.patch != 0 {
            return Err(config_err!("latent size {} not divisible by patch {}", self.latent_size, self.patch));
        }
        if self.text_len == 0 {
            return Err(config_err!("text_len must be positive"));
        }
        Ok(())
    }

    /// Reads the model keys of a config section. `size` and `layers`/`width`
    /// are alternatives; explicit values override the preset.
    pub fn from_section(section: &BTreeMap<String, String>) -> Result<Self> {
        let variant: Variant = section
            .get("variant")
            .ok_or_else(|| config_err!("missing key `variant`"))?
            .parse()?;
        let mut cfg = match section.get("size") {
            Some(s) => Self::preset(variant, s.parse()?),
            None => {
                let layers = parse_key(section, "layers")?.ok_or_else(|| config_err!("need `size` or `layers`"))?;
                Self::explicit(variant, layers, 64 * layers)
            }
        };
        if let Some(v) = parse_key(section, "layers")? {
            cfg.layers = v;
        }
        if let Some(v) = parse_key(section, "width")? {
            cfg.width = v;
        }
        if let Some(v) = parse_key(section, "patch")? {
            cfg.patch = v;
        }
        if let Some(v) = parse_key(section, "latent_channels")? {
            cfg.latent_channels = v;
        }
        if let Some(v) = parse_key(section, "latent_size")? {
            cfg.latent_size = v;
        }
        if let Some(v) = parse_key(section, "text_len")? {
            cfg.text_len = v;
        }
        if let Some(v) = parse_key(section, "cond_dim")? {
            cfg.cond_dim = v;
        }
        if let Some(v) = parse_key(section, "use_pooled")? {
            cfg.use_pooled = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_section(&self) -> BTreeMap<String, String> {
        [
            ("variant", self.variant.to_string()),
            ("layers", self.layers.to_string()),
            ("width", self.width.to_string()),
            ("patch", self.patch.to_string()),
            ("latent_channels", self.latent_channels.to_string()),
            ("latent_size", self.latent_size.to_string()),
            ("text_len", self.text_len.to_string()),
            ("cond_dim", self.cond_dim.to_string()),
            ("use_pooled", self.use_pooled.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "variant",
    "size",
    "layers",
    "width",
    "patch",
    "latent_channels",
    "latent_size",
    "text_len",
    "cond_dim",
    "use_pooled",
];

pub fn parse_key<V: FromStr>(section: &BTreeMap<String, String>, key: &str) -> Result<Option<V>> {
    section
        .get(key)
        .map(|v| v.parse().map_err(|_| config_err!("bad value {v:?} for `{key}`")))
        .transpose()
}

/// Flat `key = value` text with optional `[section]` headers. Keys before
/// the first header belong to the section named `""`. `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| config_err!("line {}: unterminated section header", i + 1))?;
                current = name.trim().to_string();
                out.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(config_err!("line {}: empty key", i + 1));
            }
            let sec = out.sections.entry(current.clone()).or_default();
            if sec.insert(k.to_string(), v.to_string()).is_some() {
                return Err(config_err!("line {}: duplicate key `{k}`", i + 1));
            }
        }
        Ok(out)
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    /// Rejects sections and keys outside the allowed sets.
    pub fn ensure_known(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (name, keys) in &self.sections {
            let Some((_, ok)) = allowed.iter().find(|(s, _)| s == name) else {
                return Err(config_err!("unknown section [{name}]"));
            };
            if let Some(k) = keys.keys().find(|k| !ok.contains(&k.as_str())) {
                return Err(config_err!("unknown key `{k}` in [{name}]"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ConfigFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, keys) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            if !name.is_empty() {
                writeln!(f, "[{name}]")?;
            }
            for (k, v) in keys {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}
