//! CSV, JSON manifest and SVG writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::observables::IVRecord;
use crate::phasespace::PhaseGrid;
use crate::solve::WignerField;

/// Git-style object hash: SHA-256 over `"blob <len>\0" + content`.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `bias_V,J,Jdev,status,peak_flag`; points that failed outright carry
/// status `failed`.
pub fn iv_csv(records: &[IVRecord]) -> String {
    let mut s = String::from("bias_V,J,Jdev,status,peak_flag\n");
    for r in records {
        let status = if r.error.is_some() { "failed".to_string() } else { r.status.to_string() };
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{}",
            r.bias, r.current, r.current_deviation, status, r.peak_flag as u8
        );
    }
    s
}

pub fn density_csv(grid: &PhaseGrid, density: &[f64]) -> String {
    let mut s = String::from("x_nm,n_per_m2\n");
    for (i, n) in density.iter().enumerate() {
        let _ = writeln!(s, "{},{:e}", grid.x(i) * 1e9, n);
    }
    s
}

pub fn potential_csv(grid: &PhaseGrid, u: &[f64]) -> String {
    let mut s = String::from("x_nm,U_eV\n");
    for (i, v) in u.iter().enumerate() {
        let _ = writeln!(s, "{},{:e}", grid.x(i) * 1e9, v);
    }
    s
}

pub fn field_csv(grid: &PhaseGrid, field: &WignerField) -> String {
    let mut s = String::from("x_nm,k_per_nm,f\n");
    for i in 0..field.nx {
        for j in 0..field.nk {
            let _ = writeln!(s, "{},{},{:e}", grid.x(i) * 1e9, grid.k(j) * 1e-9, field.get(i, j));
        }
    }
    s
}

/// One `k_per_nm` column followed by one column per named profile.
pub fn profiles_csv(grid: &PhaseGrid, names: &[String], profiles: &[Vec<f64>]) -> String {
    let mut s = String::from("k_per_nm");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for j in 0..grid.nk {
        let _ = write!(s, "{}", grid.k(j) * 1e-9);
        for p in profiles {
            let _ = write!(s, ",{:e}", p[j]);
        }
        s.push('\n');
    }
    s
}

pub fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut s = String::from("name");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for v in row {
            let _ = write!(s, ",{v:.12}");
        }
        s.push('\n');
    }
    s
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: String,
    pub config_path: Option<PathBuf>,
    pub input_hash: String,
    pub seed: u64,
    pub config: C,
    pub solver: crate::solve::SolverOptions,
    pub runs: Vec<R>,
    pub checks: Vec<super::Check>,
}

pub fn write_manifest<C: Serialize, R: Serialize>(dir: &Path, manifest: &Manifest<C, R>) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&path, &(text + "\n"))?;
    Ok(path)
}

/// A named polyline for [`svg_plot`].
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal line chart. Non-finite points break the line.
pub fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 80.0, 150.0, 40.0, 50.0);
    let finite = series.iter().flat_map(|s| &s.points).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <rect x=\"{ml}\" y=\"{mt}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        (w - mr + ml) / 2.0,
        escape(title),
        w - ml - mr,
        h - mt - mb
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (w - mr + ml) / 2.0,
        h - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (v, anchor, x, y) in [
        (x0, "start", px(x0), h - mb + 16.0),
        (x1, "end", px(x1), h - mb + 16.0),
        (y0, "end", ml - 4.0, py(y0)),
        (y1, "end", ml - 4.0, py(y1) + 10.0),
    ] {
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{y}\" text-anchor=\"{anchor}\">{v:.3e}</text>");
    }
    for (n, ser) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let mut d = String::new();
        let mut pen_up = true;
        for &(x, y) in &ser.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_up { "M" } else { "L" }, px(x), py(y));
            pen_up = false;
        }
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>");
        let ly = mt + 16.0 * (n as f64 + 1.0);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            w - mr + 10.0,
            w - mr + 30.0,
            w - mr + 34.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn iv_series(name: &str, records: &[IVRecord]) -> Series {
    Series {
        name: name.to_string(),
        points: records.iter().map(|r| (r.bias, r.current)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_layout() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg_plot(
            "t",
            "x",
            "y",
            &[Series {
                name: "a<b".into(),
                points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        let path = s.lines().find(|l| l.starts_with("<path")).unwrap();
        assert_eq!(path.matches('M').count(), 2, "NaN should lift the pen");
    }
}
