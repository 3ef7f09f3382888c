use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{PowerLawFit, RunRow};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub runs: PathBuf,
    pub fits: PathBuf,
    pub chart: PathBuf,
}

#[derive(Serialize)]
struct FitRow<'a> {
    variant: &'a str,
    a: f64,
    b: f64,
    rms: f64,
    points: usize,
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<RunRow>, _>>()?;
    Ok(rows)
}

/// Writes `runs.csv`, `fits.csv` and `scaling.svg` into `out_dir`.
pub fn emit_report(rows: &[RunRow], fits: &[(String, PowerLawFit)], out_dir: &Path) -> Result<ReportPaths> {
    if rows.is_empty() {
        return Err(config_err!("no runs to report"));
    }
    fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        runs: out_dir.join("runs.csv"),
        fits: out_dir.join("fits.csv"),
        chart: out_dir.join("scaling.svg"),
    };
    let mut w = csv::Writer::from_path(&paths.runs)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(&paths.fits)?;
    for (name, f) in fits {
        w.serialize(FitRow {
            variant: name,
            a: f.a,
            b: f.b,
            rms: f.rms,
            points: f.points,
        })?;
    }
    w.flush()?;
    fs::write(&paths.chart, render_svg(rows, fits))?;
    Ok(paths)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn log_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v.log10()), hi.max(v.log10())));
    let pad = ((hi - lo) * 0.08).max(0.05);
    (lo - pad, hi + pad)
}

fn render_svg(rows: &[RunRow], fits: &[(String, PowerLawFit)]) -> String {
    let (x0, x1) = log_range(rows.iter().map(|r| r.params as f64));
    let (y0, y1) = log_range(rows.iter().map(|r| r.val_loss));
    let px = |s: f64| LEFT + (s.log10() - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |l: f64| TOP + (y1 - l.log10()) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    for (name, _) in fits {
        if !names.contains(&name.as_str()) {
            names.push(name);
        }
    }
    let color = |name: &str| PALETTE[names.iter().position(|n| *n == name).unwrap_or(0) % PALETTE.len()];

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let (ax0, ax1, ay0, ay1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        s,
        r#"<path d="M{ax0},{ay0} L{ax0},{ay1} L{ax1},{ay1}" fill="none" stroke="black"/>"#
    );
    for e in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{ay1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, ay1 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">1e{e}</text>"#, ay1 + 16.0);
    }
    for (i, frac) in [0.0, 0.5, 1.0].iter().enumerate() {
        let l = 10f64.powf(y0 + frac * (y1 - y0));
        let y = py(l);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{ax0}" y2="{y:.1}" stroke="black"/>"#, ax0 - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" id="ytick{i}">{l:.3}</text>"#,
            ax0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">parameters (log scale)</text>"#,
        (ax0 + ax1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">validation loss (log scale)</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0
    );

    for (name, fit) in fits {
        let (lo, hi) = (10f64.powf(x0), 10f64.powf(x1));
        let pts: Vec<String> = (0..=20)
            .map(|i| {
                let sv = lo * (hi / lo).powf(i as f64 / 20.0);
                format!("{:.1},{:.1}", px(sv), py(fit.predict(sv)).clamp(ay0, ay1))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="fit" points="{}" fill="none" stroke="{}" stroke-dasharray="4 3"/>"#,
            pts.join(" "),
            color(name)
        );
    }
    let _ = writeln!(s, r#"<g class="points">"#);
    for r in rows {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"><title>{} L={} d={} S={} loss={:.4}</title></circle>"#,
            px(r.params as f64),
            py(r.val_loss),
            color(&r.variant),
            r.variant,
            r.layers,
            r.d,
            r.params,
            r.val_loss
        );
    }
    let _ = writeln!(s, "</g>");
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, color(name));
        let label = match fits.iter().find(|(n, _)| n == name) {
            Some((_, f)) => format!("{name} (b={:.3})", f.b),
            None => name.to_string(),
        };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{label}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}
