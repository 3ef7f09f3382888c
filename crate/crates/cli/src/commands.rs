use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ditair_core::arch::{ConfigFile, Model, ModelConfig, SizePreset, Variant};
use ditair_core::audit::{audit_config, group, AuditReport};
use ditair_core::numerics::{write_checkpoint, Rng, Tensor};
use ditair_core::sampler::generate;
use ditair_core::scalinglab::{emit_report, fit_by_variant, read_runs, run_grid, train_model, RunRow, Task};
use ditair_core::vaetoy::{textures, train_vae, write_metrics, VaeModel};
use ditair_core::{Error, Result};

use crate::manifest::Manifest;
use crate::settings;

/// Worker count: available cores, capped by `DITAIR_THREADS`.
pub fn threads() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DITAIR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(cores)),
            _ => Err(Error::Config(format!("DITAIR_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cores),
    }
}

fn path_setting(cfg: &ConfigFile, key: &str, what: &str) -> Result<PathBuf> {
    settings::run_path(cfg, key)?
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("{what} requires --{key}")))
}

pub fn audit(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let section = cfg.section("model").cloned().unwrap_or_default();
    let variants: Vec<Variant> = match section.get("variant") {
        Some(v) => vec![v.parse()?],
        None => Variant::ALL.to_vec(),
    };
    let explicit_shape = section.contains_key("size") || section.contains_key("layers");
    let mut rows: Vec<(String, AuditReport)> = Vec::new();
    for v in variants {
        let mut s = section.clone();
        s.insert("variant".into(), v.to_string());
        if explicit_shape {
            let label = s.get("size").cloned().unwrap_or_else(|| "custom".into());
            rows.push((label, audit_config(&ModelConfig::from_section(&s)?)?));
        } else {
            for p in SizePreset::ALL {
                s.insert("size".into(), p.to_string());
                rows.push((p.to_string(), audit_config(&ModelConfig::from_section(&s)?)?));
            }
        }
    }

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (label, r) in &rows {
        writeln!(w, "size {label}")?;
        write!(w, "{}", r.render_table())?;
        writeln!(w, "formula total {}", group(r.expected.total()))?;
        writeln!(w)?;
    }
    fs::create_dir_all(out)?;
    let mut csv = csv::Writer::from_path(out.join("audit.csv"))?;
    csv.write_record(["variant", "size", "component", "expected", "actual", "overhead"])?;
    for (label, r) in &rows {
        let overhead = r.overhead.total().to_string();
        for ((name, e), (_, a)) in r.expected.rows().into_iter().zip(r.actual.rows()) {
            csv.write_record([r.variant.name(), label, name, &e.to_string(), &a.to_string(), &overhead])?;
        }
        csv.write_record([
            r.variant.name(),
            label,
            "total",
            &r.expected.total().to_string(),
            &r.actual.total().to_string(),
            &overhead,
        ])?;
    }
    csv.flush()?;
    let mut manifest = Manifest::new("audit", cfg);
    manifest.output(out, "audit.csv")?;
    manifest.write(out)?;
    match rows.iter().find_map(|(_, r)| r.mismatch()) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn train(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let seed = settings::seed(cfg)?;
    let train = settings::train(cfg)?;
    let model_cfg = settings::model(cfg)?;
    let task = Task::new(settings::task(cfg, &model_cfg)?)?;
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("train", cfg);

    if settings::flag(cfg, "grid")? {
        let grid = settings::grid(cfg)?;
        let records = run_grid(&grid, &task, &train, seed, threads()?)?;
        let rows: Vec<RunRow> = records.iter().map(RunRow::from).collect();
        println!("{:<10} {:>6} {:>6} {:>10} {:>12}", "variant", "layers", "d", "params", "val_loss");
        for r in &rows {
            println!("{:<10} {:>6} {:>6} {:>10} {:>12.6}", r.variant, r.layers, r.d, r.params, r.val_loss);
        }
        // a grid with one depth has nothing to fit; its runs are still reported
        let fits = fit_by_variant(&rows).unwrap_or_default();
        for (name, f) in &fits {
            println!("fit {name}: a={:.6} b={:.6} rms={:.3e}", f.a, f.b, f.rms);
        }
        emit_report(&rows, &fits, out)?;
        for f in ["runs.csv", "fits.csv", "scaling.svg"] {
            manifest.output(out, f)?;
        }
    } else {
        let (model, rec) = train_model(&model_cfg, &task, &train, seed)?;
        model.save(&out.join("model.dita"))?;
        let mut w = csv::Writer::from_path(out.join("train_loss.csv"))?;
        w.write_record(["step", "loss"])?;
        for (s, l) in &rec.train_loss {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out.join("val_loss.csv"))?;
        w.write_record(["step", "val_loss"])?;
        for (s, l) in &rec.val_curve {
            w.write_record([s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out.join("runs.csv"))?;
        w.serialize(RunRow::from(&rec))?;
        w.flush()?;
        let oracle = task.oracle_val_loss();
        println!(
            "{} layers={} d={} params={} steps={}",
            rec.variant,
            rec.layers,
            rec.width,
            group(rec.params),
            rec.steps_run
        );
        println!(
            "val_loss {:.6}  oracle {:.6}  ratio {:.4}",
            rec.val_loss,
            oracle,
            rec.val_loss / oracle
        );
        for f in ["model.dita", "train_loss.csv", "val_loss.csv", "runs.csv"] {
            manifest.output(out, f)?;
        }
    }
    manifest.write(out)
}

/// Fixed latent range mapped onto grey levels, so images compare across runs.
const LATENT_RANGE: f32 = 3.0;
const PIXEL_SCALE: usize = 8;

/// Channels side by side, one pixel apart, each latent cell drawn as a square block.
fn latent_pgm(sample: &[f32], channels: usize, side: usize) -> Vec<u8> {
    let cell = PIXEL_SCALE;
    let w = channels * side * cell + (channels - 1);
    let h = side * cell;
    let mut img = vec![0u8; w * h];
    for c in 0..channels {
        let x0 = c * (side * cell + 1);
        for y in 0..h {
            for x in 0..side * cell {
                let v = sample[(c * side + y / cell) * side + x / cell];
                let g = ((v / LATENT_RANGE).clamp(-1.0, 1.0) * 127.5 + 127.5).round();
                img[y * w + x0 + x] = g as u8;
            }
        }
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&img);
    bytes
}

pub fn sample(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let seed = settings::seed(cfg)?;
    let (sampler, per_class) = settings::sampler(cfg, seed)?;
    let model_cfg = settings::model(cfg)?;
    let task = Task::new(settings::task(cfg, &model_cfg)?)?;
    let mut manifest = Manifest::new("sample", cfg);
    let model = match settings::run_path(cfg, "checkpoint")? {
        Some(p) => {
            let p = PathBuf::from(p);
            manifest.input("checkpoint", &p)?;
            Model::<f32>::load(&model_cfg, &p)?
        }
        None => Model::<f32>::build(&model_cfg, &Rng::new(seed).child(2))?,
    };
    let classes = task.config.classes;
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let conds: Vec<_> = labels.iter().map(|&k| task.conds[k].clone()).collect();
    let z: Tensor<f32> = generate(&model, &conds, &sampler)?;

    fs::create_dir_all(out.join("images"))?;
    write_checkpoint(&out.join("latents.dita"), [("latents", &z)])?;
    manifest.output(out, "latents.dita")?;
    let per = task.dims();
    let (ch, side) = (model_cfg.latent_channels, model_cfg.latent_size);
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["sample", "class", "mean", "std", "min", "max", "class_rms_distance"])?;
    for (i, (row, &k)) in z.data().chunks_exact(per).zip(&labels).enumerate() {
        let name = format!("images/sample_{i:03}.pgm");
        fs::write(out.join(&name), latent_pgm(row, ch, side))?;
        manifest.output(out, &name)?;
        let n = per as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let min = row.iter().copied().fold(f32::INFINITY, f32::min);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let dist = row
            .iter()
            .zip(&task.means[k])
            .map(|(&v, &m)| ((v - m) as f64).powi(2))
            .sum::<f64>()
            / n;
        w.write_record([
            i.to_string(),
            k.to_string(),
            format!("{mean:.6}"),
            format!("{:.6}", var.sqrt()),
            format!("{min:.6}"),
            format!("{max:.6}"),
            format!("{:.6}", dist.sqrt()),
        ])?;
    }
    w.flush()?;
    manifest.output(out, "summary.csv")?;
    println!(
        "wrote {} samples ({} steps, cfg {}) to {}",
        labels.len(),
        sampler.steps,
        sampler.guidance,
        out.display()
    );
    manifest.write(out)
}

pub fn fit_scaling(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let input = path_setting(cfg, "input", "fit-scaling")?;
    let mut manifest = Manifest::new("fit-scaling", cfg);
    manifest.input("runs", &input)?;
    let rows = read_runs(&input)?;
    let fits = fit_by_variant(&rows)?;
    for (name, f) in &fits {
        println!("{name}: a={:.6} b={:.6} rms={:.3e} points={}", f.a, f.b, f.rms, f.points);
    }
    emit_report(&rows, &fits, out)?;
    for f in ["runs.csv", "fits.csv", "scaling.svg"] {
        manifest.output(out, f)?;
    }
    manifest.write(out)
}

pub fn vae(cfg: &ConfigFile, out: &Path) -> Result<()> {
    let seed = settings::seed(cfg)?;
    let stage = settings::stage(cfg)?;
    let s = settings::vae(cfg)?;
    let data = textures(s.data_size, s.config.image_size, &mut Rng::new(s.data_seed));
    let mut manifest = Manifest::new("vae", cfg);
    let previous = match stage {
        1 => None,
        2 => {
            let input = path_setting(cfg, "input", "vae stage 2")?;
            manifest.input("stage1", &input)?;
            Some(VaeModel::load(&input)?)
        }
        other => return Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
    };
    let (model, curve) = train_vae(&s.config, &data, stage, previous.as_ref(), &Rng::new(seed))?;
    fs::create_dir_all(out)?;
    let ckpt = format!("vae_stage{stage}.dita");
    model.save(&out.join(&ckpt))?;
    write_metrics(&out.join("metrics.csv"), &curve)?;
    if let Some(last) = curve.last() {
        println!(
            "stage {stage}: {} latent channels, step {} mse {:.6} kl {:.4}",
            model.channels(),
            last.step,
            last.mse,
            last.kl
        );
    }
    manifest.output(out, &ckpt)?;
    manifest.output(out, "metrics.csv")?;
    manifest.write(out)
}
