//! Summary tables over finished training runs and signal plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use vibra::dataset::Recording;
use vibra::dsp::{design_bandpass, filter_block, FilterSpec};
use vibra::train::{MeanStd, RunReport};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub split: String,
    pub gestures: String,
    pub folds: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub params: usize,
}

fn split_rank(split: &str) -> usize {
    match split.split(':').next().unwrap_or("") {
        "PS" => 0,
        "LOSO" => 1,
        "AOS" => 2,
        _ => 3,
    }
}

/// One row per `train/<run>/metrics.json`, ordered PS, LOSO, AOS, other;
/// six gestures before four.
pub fn collect(train_dir: &Path) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    if !train_dir.exists() {
        return Ok(rows);
    }
    let mut dirs: Vec<_> = fs::read_dir(train_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("metrics.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let run: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        rows.push(Row {
            split: run.split.clone(),
            gestures: run.gestures.clone(),
            folds: run.folds.len(),
            accuracy: run.accuracy,
            precision: run.macro_precision,
            params: run.folds.first().map_or(0, |f| f.metrics.param_count),
        });
    }
    rows.sort_by(|a, b| {
        split_rank(&a.split)
            .cmp(&split_rank(&b.split))
            .then(b.gestures.cmp(&a.gestures))
            .then(a.split.cmp(&b.split))
    });
    Ok(rows)
}

pub fn render_text(rows: &[Row]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>6} {:>15} {:>15} {:>8}",
        "split", "gestures", "folds", "accuracy", "precision", "params"
    );
    let _ = writeln!(out, "{}", "-".repeat(67));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>6} {:>15} {:>15} {:>8}",
            r.split,
            r.gestures,
            r.folds,
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.params
        );
    }
    if rows.is_empty() {
        let _ = writeln!(out, "(no finished training runs)");
    }
    out
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut out = String::from("split,gestures,folds,accuracy_mean,accuracy_std,precision_mean,precision_std,params\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.split, r.gestures, r.folds, r.accuracy.mean, r.accuracy.std, r.precision.mean, r.precision.std, r.params
        );
    }
    out
}

/// SVG with the first channel of `rec` raw (top) and band-passed (bottom),
/// onsets drawn as vertical lines.
pub fn signal_plot(rec: &Recording, band: [f64; 2], onsets: &[f64]) -> Result<String> {
    let fs = rec.sample_rate_hz as f64;
    let raw = rec.to_block();
    let filtered = filter_block(&design_bandpass(&FilterSpec::new(band[0], band[1], fs)?)?, &raw);
    let (w, h, pad) = (1200.0, 220.0, 30.0);
    let duration = rec.duration_sec();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#,
        2.0 * h
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let panels = [
        ("raw", raw.channel(0)),
        (&*format!("band-pass {}-{} Hz", band[0], band[1]), filtered.channel(0)),
    ];
    for (p, (title, row)) in panels.iter().enumerate() {
        let top = p as f64 * h;
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mid = top + h / 2.0;
        let x = |t: f64| pad + (w - 2.0 * pad) * t / duration;
        let y = |v: f64| mid - (h / 2.0 - pad) * v / peak;
        let _ = writeln!(svg, r#"<text x="{pad}" y="{}">{title}</text>"#, top + 18.0);
        for &t in onsets {
            let _ = writeln!(
                svg,
                r##"<line x1="{0:.1}" x2="{0:.1}" y1="{1:.1}" y2="{2:.1}" stroke="#d33" stroke-width="0.6"/>"##,
                x(t),
                top + pad,
                top + h - 8.0
            );
        }
        // min/max per pixel column keeps bursts visible at any length
        let columns = (w - 2.0 * pad) as usize;
        let per = row.len().div_ceil(columns).max(1);
        let mut points = String::new();
        for (c, chunk) in row.chunks(per).enumerate() {
            let t = (c * per) as f64 / fs;
            let (lo, hi) = chunk
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let _ = write!(points, "{:.1},{:.1} {:.1},{:.1} ", x(t), y(hi), x(t), y(lo));
        }
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="0.7" points="{}"/>"##,
            points.trim_end()
        );
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}
