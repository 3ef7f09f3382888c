//! Layered run configuration: built-in defaults, then `--config`, then
//! positional `section.key=value` overrides, then dedicated flags.

use std::collections::BTreeMap;

use ditair_core::arch::{parse_key, ConfigFile, ModelConfig, MODEL_KEYS};
use ditair_core::flow::TimestepDist;
use ditair_core::sampler::SamplerConfig;
use ditair_core::scalinglab::{GridSpec, TaskConfig, TrainConfig, PROMPT_LEN};
use ditair_core::vaetoy::VaeConfig;
use ditair_core::{Error, Result};

pub const RUN_KEYS: &[&str] = &["seed", "checkpoint", "input", "grid", "stage"];
pub const TASK_KEYS: &[&str] = &["classes", "sigma", "mean_scale", "val_size", "seed", "t_mean", "t_std"];
pub const TRAIN_KEYS: &[&str] = &["steps", "batch", "lr", "cond_drop", "log_every", "eval_every"];
pub const GRID_KEYS: &[&str] = &["variants", "layers", "width_per_layer"];
pub const SAMPLER_KEYS: &[&str] = &["steps", "cfg", "churn", "per_class"];
pub const VAE_KEYS: &[&str] = &[
    "image_size",
    "hidden",
    "c1",
    "c2",
    "beta",
    "stage1_steps",
    "stage2_steps",
    "batch",
    "lr",
    "log_every",
    "data_size",
    "data_seed",
];

/// Section written by the tool itself; skipped when a manifest is reused as a config.
pub const MANIFEST_SECTION: &str = "manifest";

fn err(msg: String) -> Error {
    Error::Config(msg)
}

/// Sections each subcommand accepts.
pub fn allowed(command: &str) -> Vec<(&'static str, &'static [&'static str])> {
    match command {
        "audit" => vec![("model", MODEL_KEYS)],
        "train" => vec![
            ("run", RUN_KEYS),
            ("model", MODEL_KEYS),
            ("task", TASK_KEYS),
            ("train", TRAIN_KEYS),
            ("grid", GRID_KEYS),
        ],
        "sample" => vec![
            ("run", RUN_KEYS),
            ("model", MODEL_KEYS),
            ("task", TASK_KEYS),
            ("sampler", SAMPLER_KEYS),
        ],
        "fit-scaling" => vec![("run", RUN_KEYS)],
        "vae" => vec![("run", RUN_KEYS), ("vae", VAE_KEYS)],
        _ => Vec::new(),
    }
}

/// Defaults shown in every manifest, so a manifest fully pins a run.
pub fn defaults(command: &str) -> ConfigFile {
    let mut cfg = ConfigFile::default();
    if command != "audit" {
        cfg.set("run", "seed", "0");
    }
    match command {
        "train" | "sample" => {
            for (k, v) in toy_model().to_section() {
                cfg.set("model", &k, v);
            }
            let task = TaskConfig::default();
            cfg.set("task", "classes", task.classes.to_string());
            cfg.set("task", "sigma", task.sigma.to_string());
            cfg.set("task", "mean_scale", task.mean_scale.to_string());
            cfg.set("task", "val_size", task.val_size.to_string());
            cfg.set("task", "seed", task.seed.to_string());
            cfg.set("task", "t_mean", task.timesteps.m.to_string());
            cfg.set("task", "t_std", task.timesteps.s.to_string());
        }
        "vae" => {
            let v = VaeConfig::default();
            cfg.set("run", "stage", "1");
            for (k, val) in [
                ("image_size", v.image_size.to_string()),
                ("hidden", v.hidden.to_string()),
                ("c1", v.c1.to_string()),
                ("c2", v.c2.to_string()),
                ("beta", v.beta.to_string()),
                ("stage1_steps", v.stage1_steps.to_string()),
                ("stage2_steps", v.stage2_steps.to_string()),
                ("batch", v.batch.to_string()),
                ("lr", v.lr.to_string()),
                ("log_every", v.log_every.to_string()),
                ("data_size", "256".to_string()),
                ("data_seed", "100".to_string()),
            ] {
                cfg.set("vae", k, val);
            }
        }
        _ => {}
    }
    if command == "train" {
        let t = TrainConfig::default();
        cfg.set("run", "grid", "false");
        cfg.set("train", "steps", t.steps.to_string());
        cfg.set("train", "batch", t.batch.to_string());
        cfg.set("train", "lr", t.lr.to_string());
        cfg.set("train", "cond_drop", t.cond_drop.to_string());
        cfg.set("train", "log_every", t.log_every.to_string());
        cfg.set("train", "eval_every", t.eval_every.to_string());
        let g = GridSpec::default();
        let names: Vec<String> = g.variants.iter().map(|v| v.to_string()).collect();
        let layers: Vec<String> = g.layers.iter().map(|n| n.to_string()).collect();
        cfg.set("grid", "variants", names.join(","));
        cfg.set("grid", "layers", layers.join(","));
        cfg.set("grid", "width_per_layer", g.width_per_layer.to_string());
    }
    if command == "sample" {
        let s = SamplerConfig::default();
        cfg.set("sampler", "steps", s.steps.to_string());
        cfg.set("sampler", "cfg", s.guidance.to_string());
        cfg.set("sampler", "churn", s.churn.to_string());
        cfg.set("sampler", "per_class", "1");
    }
    cfg
}

/// Small DiT-Air sized for the synthetic task.
pub fn toy_model() -> ModelConfig {
    let task = TaskConfig::default();
    ModelConfig {
        latent_channels: task.latent_channels,
        latent_size: task.latent_size,
        patch: task.patch,
        text_len: PROMPT_LEN,
        cond_dim: task.cond_dim,
        ..ModelConfig::explicit(ditair_core::arch::Variant::DitAir, 2, 64)
    }
}

/// Applies one configuration layer on top of `base`. Choosing a `size`
/// preset or a bare `layers` count clears the inherited shape keys.
pub fn merge(base: &mut ConfigFile, layer: &ConfigFile) {
    for (name, keys) in &layer.sections {
        let target = base.sections.entry(name.clone()).or_default();
        if name == "model" {
            if keys.contains_key("size") {
                for k in ["size", "layers", "width"] {
                    target.remove(k);
                }
            } else if keys.contains_key("layers") && !keys.contains_key("width") {
                target.remove("size");
                target.remove("width");
            }
        }
        for (k, v) in keys {
            target.insert(k.clone(), v.clone());
        }
    }
}

/// Parses `section.key=value`.
pub fn parse_override(text: &str) -> Result<(String, String, String)> {
    let (path, value) = text
        .split_once('=')
        .ok_or_else(|| err(format!("override {text:?} is not section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| err(format!("override key {path:?} needs a section prefix")))?;
    if section.is_empty() || key.is_empty() {
        return Err(err(format!("override {text:?} is not section.key=value")));
    }
    Ok((section.to_string(), key.to_string(), value.trim().to_string()))
}

/// Drops the tool-written manifest section, checking it belongs to `command`.
pub fn strip_manifest(file: &mut ConfigFile, command: &str) -> Result<()> {
    if let Some(m) = file.sections.remove(MANIFEST_SECTION) {
        if let Some(c) = m.get("command") {
            if c != command {
                return Err(err(format!("manifest was written by `{c}`, not `{command}`")));
            }
        }
    }
    Ok(())
}

fn section<'a>(cfg: &'a ConfigFile, name: &str) -> &'a BTreeMap<String, String> {
    static EMPTY: BTreeMap<String, String> = BTreeMap::new();
    cfg.section(name).unwrap_or(&EMPTY)
}

fn required<V: std::str::FromStr>(cfg: &ConfigFile, sec: &str, key: &str) -> Result<V> {
    parse_key(section(cfg, sec), key)?.ok_or_else(|| err(format!("missing key `{key}` in [{sec}]")))
}

fn optional<V: std::str::FromStr>(cfg: &ConfigFile, sec: &str, key: &str) -> Result<Option<V>> {
    parse_key(section(cfg, sec), key)
}

fn list<V: std::str::FromStr>(cfg: &ConfigFile, sec: &str, key: &str) -> Result<Vec<V>> {
    let raw: String = required(cfg, sec, key)?;
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| err(format!("bad entry {s:?} in `{key}`"))))
        .collect()
}

pub fn seed(cfg: &ConfigFile) -> Result<u64> {
    required(cfg, "run", "seed")
}

pub fn run_path(cfg: &ConfigFile, key: &str) -> Result<Option<String>> {
    optional(cfg, "run", key)
}

pub fn flag(cfg: &ConfigFile, key: &str) -> Result<bool> {
    Ok(optional(cfg, "run", key)?.unwrap_or(false))
}

pub fn stage(cfg: &ConfigFile) -> Result<u8> {
    required(cfg, "run", "stage")
}

pub fn model(cfg: &ConfigFile) -> Result<ModelConfig> {
    ModelConfig::from_section(section(cfg, "model"))
}

/// Task whose latent geometry follows the model config.
pub fn task(cfg: &ConfigFile, model: &ModelConfig) -> Result<TaskConfig> {
    if model.text_len != PROMPT_LEN {
        return Err(err(format!(
            "the synthetic task uses {PROMPT_LEN}-token prompts; model.text_len is {}",
            model.text_len
        )));
    }
    let timesteps = TimestepDist {
        m: required(cfg, "task", "t_mean")?,
        s: required(cfg, "task", "t_std")?,
    };
    if !(timesteps.s > 0.0) {
        return Err(err("task.t_std must be positive".into()));
    }
    Ok(TaskConfig {
        classes: required(cfg, "task", "classes")?,
        sigma: required(cfg, "task", "sigma")?,
        mean_scale: required(cfg, "task", "mean_scale")?,
        latent_channels: model.latent_channels,
        latent_size: model.latent_size,
        patch: model.patch,
        cond_dim: model.cond_dim,
        val_size: required(cfg, "task", "val_size")?,
        timesteps,
        seed: required(cfg, "task", "seed")?,
    })
}

pub fn train(cfg: &ConfigFile) -> Result<TrainConfig> {
    let t = TrainConfig {
        steps: required(cfg, "train", "steps")?,
        batch: required(cfg, "train", "batch")?,
        lr: required(cfg, "train", "lr")?,
        cond_drop: required(cfg, "train", "cond_drop")?,
        log_every: required(cfg, "train", "log_every")?,
        eval_every: required(cfg, "train", "eval_every")?,
        stop_below: None,
    };
    if !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.cond_drop) {
        return Err(err("train.lr must be positive and train.cond_drop in [0, 1]".into()));
    }
    Ok(t)
}

pub fn grid(cfg: &ConfigFile) -> Result<GridSpec> {
    let g = GridSpec {
        variants: list(cfg, "grid", "variants")?,
        layers: list(cfg, "grid", "layers")?,
        width_per_layer: required(cfg, "grid", "width_per_layer")?,
    };
    if g.variants.is_empty() || g.layers.is_empty() {
        return Err(err("grid needs at least one variant and one depth".into()));
    }
    Ok(g)
}

pub fn sampler(cfg: &ConfigFile, seed: u64) -> Result<(SamplerConfig, usize)> {
    let s = SamplerConfig {
        steps: required(cfg, "sampler", "steps")?,
        guidance: required(cfg, "sampler", "cfg")?,
        churn: required(cfg, "sampler", "churn")?,
        seed,
    };
    s.validate()?;
    let per_class: usize = required(cfg, "sampler", "per_class")?;
    if per_class == 0 {
        return Err(err("sampler.per_class must be positive".into()));
    }
    Ok((s, per_class))
}

pub struct VaeSettings {
    pub config: VaeConfig,
    pub data_size: usize,
    pub data_seed: u64,
}

pub fn vae(cfg: &ConfigFile) -> Result<VaeSettings> {
    let config = VaeConfig {
        image_size: required(cfg, "vae", "image_size")?,
        hidden: required(cfg, "vae", "hidden")?,
        c1: required(cfg, "vae", "c1")?,
        c2: required(cfg, "vae", "c2")?,
        beta: required(cfg, "vae", "beta")?,
        stage1_steps: required(cfg, "vae", "stage1_steps")?,
        stage2_steps: required(cfg, "vae", "stage2_steps")?,
        batch: required(cfg, "vae", "batch")?,
        lr: required(cfg, "vae", "lr")?,
        log_every: required(cfg, "vae", "log_every")?,
    };
    config.validate()?;
    let data_size = required(cfg, "vae", "data_size")?;
    if data_size == 0 {
        return Err(err("vae.data_size must be positive".into()));
    }
    Ok(VaeSettings {
        config,
        data_size,
        data_seed: required(cfg, "vae", "data_seed")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_clears_inherited_shape() {
        let mut base = defaults("train");
        let mut layer = ConfigFile::default();
        layer.set("model", "size", "S");
        merge(&mut base, &layer);
        let m = model(&base).unwrap();
        assert_eq!((m.layers, m.width), (12, 768));
        assert_eq!(m.latent_size, 4);
    }

    #[test]
    fn layers_alone_rescales_width() {
        let mut base = defaults("train");
        let mut layer = ConfigFile::default();
        layer.set("model", "layers", "4");
        merge(&mut base, &layer);
        assert_eq!(model(&base).unwrap().width, 256);
    }

    #[test]
    fn defaults_resolve_and_are_known() {
        for cmd in ["train", "sample", "vae", "fit-scaling", "audit"] {
            let cfg = defaults(cmd);
            let allowed = allowed(cmd);
            cfg.ensure_known(&allowed).unwrap();
        }
        let cfg = defaults("train");
        let m = model(&cfg).unwrap();
        task(&cfg, &m).unwrap();
        train(&cfg).unwrap();
        grid(&cfg).unwrap();
        sampler(&defaults("sample"), 0).unwrap();
        vae(&defaults("vae")).unwrap();
    }

    #[test]
    fn overrides_parse() {
        assert_eq!(
            parse_override("train.lr = 3e-4").unwrap(),
            ("train".into(), "lr".into(), "3e-4".into())
        );
        assert!(parse_override("lr=1").is_err());
        assert!(parse_override("train.lr").is_err());
        assert!(parse_override(".lr=1").is_err());
    }

    #[test]
    fn manifest_from_other_command_rejected() {
        let mut f = ConfigFile::parse("[manifest]\ncommand = vae\n").unwrap();
        assert!(strip_manifest(&mut f, "train").is_err());
        let mut f = ConfigFile::parse("[manifest]\ncommand = train\n").unwrap();
        strip_manifest(&mut f, "train").unwrap();
        assert!(f.sections.is_empty());
    }
}
