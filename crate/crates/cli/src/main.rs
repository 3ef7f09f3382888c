mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ditair_core::arch::ConfigFile;
use ditair_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ditair", version, about = "Diffusion transformer architecture lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file with `[section]` headers and `key = value` lines; a manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `section.key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Count parameters per component and compare with the closed forms.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        size: Option<String>,
    },
    /// Train one model, or the architecture grid with --grid.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        grid: bool,
    },
    /// Draw class-conditional samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale.
        #[arg(long)]
        cfg: Option<f64>,
        /// Model checkpoint; without one the freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit L = a·S^b per variant from a runs CSV.
    FitScaling {
        #[command(flatten)]
        common: Common,
        /// CSV with columns variant,layers,d,params,val_loss.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the toy VAE; stage 2 widens a stage-1 checkpoint.
    Vae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        steps: Option<usize>,
        /// Stage-1 checkpoint for stage 2.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn path_str(p: &std::path::Path) -> Result<String> {
    p.to_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("path {p:?} is not valid UTF-8")))
}

/// Defaults, then the config file, then positional overrides, then flags.
fn resolve(name: &str, common: &Common, flags: &[(&str, &str, String)]) -> Result<ConfigFile> {
    let mut cfg = settings::defaults(name);
    if let Some(path) = &common.config {
        let mut file = ConfigFile::parse(&std::fs::read_to_string(path)?)?;
        settings::strip_manifest(&mut file, name)?;
        settings::merge(&mut cfg, &file);
    }
    let mut layer = ConfigFile::default();
    for o in &common.overrides {
        let (s, k, v) = settings::parse_override(o)?;
        layer.set(&s, &k, v);
    }
    settings::merge(&mut cfg, &layer);
    let mut layer = ConfigFile::default();
    if let Some(seed) = common.seed {
        layer.set("run", "seed", seed.to_string());
    }
    for (s, k, v) in flags {
        layer.set(s, k, v.clone());
    }
    settings::merge(&mut cfg, &layer);
    cfg.ensure_known(&settings::allowed(name))?;
    if cfg.section("model").is_some() && name != "audit" {
        let model = settings::model(&cfg)?;
        cfg.sections.insert("model".into(), model.to_section());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut flags: Vec<(&str, &str, String)> = Vec::new();
    let model_flags = |variant: &Option<String>, size: &Option<String>, flags: &mut Vec<_>| {
        if let Some(v) = variant {
            flags.push(("model", "variant", v.clone()));
        }
        if let Some(s) = size {
            flags.push(("model", "size", s.clone()));
        }
    };
    match &cli.command {
        Command::Audit { common, variant, size } => {
            model_flags(variant, size, &mut flags);
            let cfg = resolve("audit", common, &flags)?;
            commands::audit(&cfg, &common.out)
        }
        Command::Train {
            common,
            variant,
            size,
            steps,
            grid,
        } => {
            model_flags(variant, size, &mut flags);
            if let Some(n) = steps {
                flags.push(("train", "steps", n.to_string()));
            }
            if *grid {
                flags.push(("run", "grid", "true".into()));
            }
            let cfg = resolve("train", common, &flags)?;
            commands::train(&cfg, &common.out)
        }
        Command::Sample {
            common,
            variant,
            size,
            steps,
            cfg: guidance,
            checkpoint,
        } => {
            model_flags(variant, size, &mut flags);
            if let Some(n) = steps {
                flags.push(("sampler", "steps", n.to_string()));
            }
            if let Some(w) = guidance {
                flags.push(("sampler", "cfg", w.to_string()));
            }
            if let Some(p) = checkpoint {
                flags.push(("run", "checkpoint", path_str(p)?));
            }
            let cfg = resolve("sample", common, &flags)?;
            commands::sample(&cfg, &common.out)
        }
        Command::FitScaling { common, input } => {
            if let Some(p) = input {
                flags.push(("run", "input", path_str(p)?));
            }
            let cfg = resolve("fit-scaling", common, &flags)?;
            commands::fit_scaling(&cfg, &common.out)
        }
        Command::Vae {
            common,
            stage,
            steps,
            input,
        } => {
            if let Some(s) = stage {
                flags.push(("run", "stage", s.to_string()));
            }
            if let Some(p) = input {
                flags.push(("run", "input", path_str(p)?));
            }
            if let Some(n) = steps {
                let stage = match stage {
                    Some(s) => *s,
                    None => {
                        let base = resolve("vae", common, &flags)?;
                        settings::stage(&base)?
                    }
                };
                flags.push(("vae", if stage == 2 { "stage2_steps" } else { "stage1_steps" }, n.to_string()));
            }
            let cfg = resolve("vae", common, &flags)?;
            commands::vae(&cfg, &common.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
