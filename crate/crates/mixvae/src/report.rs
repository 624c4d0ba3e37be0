//! Run outputs: JSON-lines metrics, density-field CSV/PNG dumps, and
//! deterministic SVG figures (box plots and curves) rendered from stored
//! metrics only.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DensityField;
use crate::objectives::SampleBudget;
use crate::stats;

/// One metrics record; files are append-only JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub budget: SampleBudget,
}

pub struct MetricsWriter {
    file: std::fs::File,
    run_id: String,
    budget: SampleBudget,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str, budget: SampleBudget) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { file, run_id: run_id.to_string(), budget })
    }

    pub fn emit(&mut self, epoch: usize, metric: &str, value: f64) -> Result<()> {
        let record = MetricRecord {
            run_id: self.run_id.clone(),
            epoch,
            metric: metric.to_string(),
            value,
            budget: self.budget,
        };
        let line = serde_json::to_string(&record)?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read metrics {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Write a density field as a CSV grid (row-major) and a PNG heatmap.
pub fn save_density_field(field: &DensityField, csv_path: &Path, png_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let r = field.resolution;
    let mut text = String::new();
    if field.latent_dim == 2 {
        for i in 0..r {
            let row: Vec<String> =
                (0..r).map(|j| format!("{}", field.values[i * r + j])).collect();
            let _ = writeln!(text, "{}", row.join(","));
        }
    } else {
        for v in &field.values {
            let _ = writeln!(text, "{v}");
        }
    }
    std::fs::write(csv_path, text)?;

    // Heatmap: intensity scaled by the field maximum.
    let max = field.values.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let (w, h) = if field.latent_dim == 2 { (r, r) } else { (r, 32) };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if field.latent_dim == 2 {
                field.values[y * r + x] / max
            } else {
                field.values[x] / max
            };
            img.put_pixel(x as u32, y as u32, heat_color(v));
        }
    }
    img.save(png_path).map_err(|e| Error::Numeric(format!("png encode: {e}")))?;
    Ok(())
}

fn heat_color(v: f64) -> image::Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v.powf(0.5)) as u8;
    let g = (255.0 * v) as u8;
    let b = (64.0 + 191.0 * (1.0 - v)) as u8;
    image::Rgb([r, g, b])
}

/// A named series of values, one box per series.
pub struct BoxSeries {
    pub label: String,
    pub values: Vec<f64>,
}

/// Fig.-2-style panel: one box per method showing 1st/3rd quartiles, the
/// median (solid), the mean (dashed), and whiskers at the data range.
pub fn render_box_plot(series: &[BoxSeries], title: &str, path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.values.is_empty()) {
        return Err(Error::parameter("box plot needs non-empty series"));
    }
    let (w, h) = (120 + 90 * series.len(), 420usize);
    let lo = series.iter().flat_map(|s| s.values.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .flat_map(|s| s.values.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = (hi - lo).max(1e-9) * 0.1;
    let (lo, hi) = (lo - pad, hi + pad);
    let ymap = |v: f64| 360.0 - 320.0 * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2,
        xml_escape(title)
    );
    // Axis with min/max labels.
    let _ = writeln!(svg, r#"<line x1="60" y1="40" x2="60" y2="360" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="54" y="{:.1}" font-size="10" text-anchor="end">{hi:.2}</text>"#,
        ymap(hi) + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="54" y="{:.1}" font-size="10" text-anchor="end">{lo:.2}</text>"#,
        ymap(lo) + 4.0
    );
    for (i, s) in series.iter().enumerate() {
        let cx = 110.0 + 90.0 * i as f64;
        let q1 = stats::quantile(&s.values, 0.25);
        let q3 = stats::quantile(&s.values, 0.75);
        let med = stats::median(&s.values);
        let mean = stats::mean(&s.values);
        let vmin = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let vmax = s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (bw, x0) = (50.0, cx - 25.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#,
            ymap(vmin),
            ymap(vmax)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{:.1}" width="{bw}" height="{:.1}" fill="#9ecbe4" stroke="black"/>"##,
            ymap(q3),
            (ymap(q1) - ymap(q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            ymap(med),
            x0 + bw,
            ymap(med)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            ymap(mean),
            x0 + bw,
            ymap(mean)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="385" font-size="11" text-anchor="middle">{}</text>"#,
            xml_escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    write_text(path, &svg)
}

/// A labeled curve with optional per-point spread (drawn as a band).
pub struct Curve {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub spread: Option<Vec<f64>>,
}

const CURVE_COLORS: [&str; 7] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#17becf"];

/// Line panel for metric trajectories and control-study sweeps.
pub fn render_curves(curves: &[Curve], title: &str, x_label: &str, path: &Path) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|c| c.x.is_empty() || c.x.len() != c.y.len()) {
        return Err(Error::parameter("curve plot needs non-empty aligned series"));
    }
    let (w, h) = (640usize, 420usize);
    let xlo = curves.iter().flat_map(|c| c.x.iter()).cloned().fold(f64::INFINITY, f64::min);
    let xhi = curves.iter().flat_map(|c| c.x.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let ylo = curves
        .iter()
        .flat_map(|c| c.y.iter().zip(c.spread.as_deref().unwrap_or(&[]).iter().chain(std::iter::repeat(&0.0))))
        .map(|(y, s)| y - s)
        .fold(f64::INFINITY, f64::min);
    let yhi = curves
        .iter()
        .flat_map(|c| c.y.iter().zip(c.spread.as_deref().unwrap_or(&[]).iter().chain(std::iter::repeat(&0.0))))
        .map(|(y, s)| y + s)
        .fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xhi - xlo).max(1e-12);
    let ypad = (yhi - ylo).max(1e-12) * 0.08;
    let (ylo, yhi) = (ylo - ypad, yhi + ypad);
    let xmap = |v: f64| 70.0 + 540.0 * (v - xlo) / xspan;
    let ymap = |v: f64| 360.0 - 320.0 * (v - ylo) / (yhi - ylo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2,
        xml_escape(title)
    );
    let _ = writeln!(svg, r#"<line x1="70" y1="40" x2="70" y2="360" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="70" y1="360" x2="610" y2="360" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="340" y="405" font-size="11" text-anchor="middle">{}</text>"#,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="64" y="44" font-size="10" text-anchor="end">{yhi:.2}</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="64" y="360" font-size="10" text-anchor="end">{ylo:.2}</text>"#
    );
    for (ci, c) in curves.iter().enumerate() {
        let color = CURVE_COLORS[ci % CURVE_COLORS.len()];
        if let Some(spread) = &c.spread {
            let mut band = String::new();
            for (x, (y, s)) in c.x.iter().zip(c.y.iter().zip(spread.iter())) {
                let _ = write!(band, "{:.1},{:.1} ", xmap(*x), ymap(y + s));
            }
            for (x, (y, s)) in c.x.iter().zip(c.y.iter().zip(spread.iter())).rev() {
                let _ = write!(band, "{:.1},{:.1} ", xmap(*x), ymap(y - s));
            }
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" opacity="0.18"/>"#,
                band.trim()
            );
        }
        let pts: Vec<String> =
            c.x.iter().zip(c.y.iter()).map(|(x, y)| format!("{:.1},{:.1}", xmap(*x), ymap(*y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="615" y="{}" font-size="11" fill="{color}">{}</text>"#,
            52 + 16 * ci,
            xml_escape(&c.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    write_text(path, &svg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
