//! Rate-distortion curve files, BD tables and SVG plots.
//!
//! A curve file is CSV with `bpp` and `psnr` columns and an optional `curve`
//! column; without it the whole file is one curve named after the file stem.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use volcodec::analytics::{bd_psnr, bd_rate, BdInterp, RdCurve};

use crate::failure::{Context, Failure, Outcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    #[serde(default)]
    pub curve: String,
    pub bpp: f64,
    pub psnr: f64,
}

/// Named curves in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves(pub Vec<(String, Vec<(f64, f64)>)>);

impl Curves {
    pub fn push(&mut self, name: &str, bpp: f64, psnr: f64) {
        match self.0.iter_mut().find(|(n, _)| n == name) {
            Some((_, pts)) => pts.push((bpp, psnr)),
            None => self.0.push((name.to_string(), vec![(bpp, psnr)])),
        }
    }

    pub fn extend(&mut self, other: Curves) {
        for (name, pts) in other.0 {
            for (b, p) in pts {
                self.push(&name, b, p);
            }
        }
    }

    pub fn rows(&self) -> Vec<RdRow> {
        self.0
            .iter()
            .flat_map(|(n, pts)| pts.iter().map(move |&(bpp, psnr)| RdRow { curve: n.clone(), bpp, psnr }))
            .collect()
    }
}

pub fn read_curves(path: &Path) -> Outcome<Curves> {
    let fallback = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "curve".into());
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_failure(path, e))?;
    let mut curves = Curves::default();
    for row in r.deserialize::<RdRow>() {
        let row = row.map_err(|e| csv_failure(path, e))?;
        let name = if row.curve.is_empty() { fallback.as_str() } else { row.curve.as_str() };
        curves.push(name, row.bpp, row.psnr);
    }
    if curves.0.is_empty() {
        return Err(Failure::Data(format!("{}: no RD points", path.display())));
    }
    Ok(curves)
}

fn csv_failure(path: &Path, e: csv::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

pub fn write_rows(path: &Path, rows: &[RdRow]) -> Outcome<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_failure(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_failure(path, e))?;
    }
    w.flush().context(path.display())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BdRow {
    pub curve: String,
    /// Percent rate change at equal PSNR; negative saves bits.
    pub bd_rate: f64,
    /// dB gained at equal rate.
    pub bd_psnr: f64,
}

/// BD figures of every curve against `anchor`, anchor first.
pub fn bd_table(anchor: (&str, &[(f64, f64)]), tests: &Curves, interp: BdInterp) -> Outcome<Vec<BdRow>> {
    let a = RdCurve::from_pairs(anchor.1).data(format!("anchor {}", anchor.0))?;
    let row = |name: &str, pts: &[(f64, f64)]| -> Outcome<BdRow> {
        let t = RdCurve::from_pairs(pts).data(format!("curve {name}"))?;
        Ok(BdRow {
            curve: name.to_string(),
            bd_rate: bd_rate(&a, &t, interp).data(format!("curve {name}"))?,
            bd_psnr: bd_psnr(&a, &t, interp).data(format!("curve {name}"))?,
        })
    };
    let mut out = vec![row(anchor.0, anchor.1)?];
    for (name, pts) in &tests.0 {
        out.push(row(name, pts)?);
    }
    Ok(out)
}

pub fn write_bd(path: &Path, rows: &[BdRow]) -> Outcome<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_failure(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_failure(path, e))?;
    }
    w.flush().context(path.display())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Round step for about `target` ticks across `span`.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// An RD plot (bpp against PSNR) as a standalone SVG document.
pub fn render_svg(curves: &Curves) -> String {
    let (w, h) = (640.0, 440.0);
    let (left, right, top, bottom) = (64.0, 150.0, 20.0, 50.0);
    let pts = curves.0.iter().flat_map(|(_, p)| p.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| {
        let m = ((b - a) * 0.05).max(1e-3);
        (a - m, b + m)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for (lo, hi, vertical) in [(x0, x1, true), (y0, y1, false)] {
        let step = tick_step(hi - lo, 6.0);
        let mut t = (lo / step).ceil() * step;
        while t <= hi {
            let label = format!("{:.*}", if step < 1.0 { (-step.log10().floor()) as usize } else { 0 }, t);
            if vertical {
                let x = sx(t);
                let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, top + ph);
                let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#, top + ph + 16.0);
            } else {
                let y = sy(t);
                let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#, left - 6.0, y + 4.0);
            }
            t += step;
        }
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">bits per pixel</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">PSNR (dB)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (name, pts)) in curves.0.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = sorted.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        for &(x, y) in &sorted {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, curves: &Curves) -> Outcome<()> {
    fs::write(path, render_svg(curves)).context(path.display())
}
