use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::{CkaMatrix, GradNormProfile, HistogramSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Svg => "svg",
        }
    }
}

/// An analysis result that can be written as a table, JSON or a figure.
pub trait Report: Serialize {
    /// Header and data rows.
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>);
    /// Standalone SVG document.
    fn svg(&self) -> String;
}

pub fn render(report: &impl Report, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report)?;
            out.push(b'\n');
            out
        }
        ReportFormat::Svg => report.svg().into_bytes(),
        ReportFormat::Csv => {
            let (header, rows) = report.table();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.into_inner().map_err(|e| Error::Format(e.to_string()))?
        }
    })
}

pub fn emit_report(report: &impl Report, path: &Path, format: ReportFormat) -> Result<()> {
    write_atomic(path, &render(report, format)?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            body: String::new(),
            width,
            height,
        }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(s)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) {
        let _ = writeln!(
            self.body,
            r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#333" stroke-width="1"/>"##
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
             <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

impl Report for GradNormProfile {
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = vec!["layer".into(), "grad_norm".into()];
        let rows = self
            .layers
            .iter()
            .zip(&self.norms)
            .map(|(l, n)| vec![l.clone(), format!("{n:e}")])
            .collect();
        (header, rows)
    }

    fn svg(&self) -> String {
        let (w, h, margin) = (480.0, 300.0, 48.0);
        let mut svg = Svg::new(w, h);
        svg.text(w / 2.0, 20.0, 14.0, "middle", "gradient l2 norm per layer");
        svg.line(margin, h - margin, w - margin / 2.0, h - margin);
        svg.line(margin, margin / 2.0, margin, h - margin);
        let max = self.norms.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let n = self.norms.len().max(2) - 1;
        let points: Vec<(f64, f64)> = self
            .norms
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = margin + (w - 1.5 * margin) * i as f64 / n as f64;
                let y = h - margin - (h - 1.5 * margin) * v / max;
                (x, y)
            })
            .collect();
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            svg.body,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            path.join(" ")
        );
        for ((x, y), label) in points.iter().zip(&self.layers) {
            let _ = writeln!(svg.body, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#1f77b4"/>"##);
            svg.text(*x, h - margin + 16.0, 9.0, "middle", label);
        }
        svg.text(margin - 4.0, margin / 2.0 + 8.0, 9.0, "end", &format!("{max:.3e}"));
        svg.finish()
    }
}

/// White to dark blue over [0, 1].
fn heat(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - t)) as u8;
    let g = (255.0 - 180.0 * t) as u8;
    let b = (255.0 - 75.0 * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

impl Report for CkaMatrix {
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["layer".to_string()];
        header.extend(self.cols.iter().map(|c| c.to_string()));
        let rows = self
            .rows
            .iter()
            .zip(&self.values)
            .map(|(r, row)| {
                let mut out = vec![r.to_string()];
                out.extend(row.iter().map(|v| format!("{v:.9}")));
                out
            })
            .collect();
        (header, rows)
    }

    fn svg(&self) -> String {
        let cell = 24.0;
        let margin = 40.0;
        let w = margin + cell * self.cols.len() as f64 + 10.0;
        let h = margin + cell * self.rows.len() as f64 + 10.0;
        let mut svg = Svg::new(w, h);
        svg.text(w / 2.0, 14.0, 12.0, "middle", "linear CKA");
        for (i, row) in self.values.iter().enumerate() {
            let y = margin + cell * i as f64;
            svg.text(margin - 6.0, y + cell * 0.65, 9.0, "end", &self.rows[i].to_string());
            for (j, v) in row.iter().enumerate() {
                let x = margin + cell * j as f64;
                svg.rect(x, y, cell, cell, &heat(*v));
            }
        }
        for (j, c) in self.cols.iter().enumerate() {
            svg.text(margin + cell * (j as f64 + 0.5), margin - 6.0, 9.0, "middle", &c.to_string());
        }
        svg.finish()
    }
}

impl Report for HistogramSet {
    fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["layer", "bin_lo", "bin_hi", "count"].map(String::from).to_vec();
        let rows = self
            .layers
            .iter()
            .flat_map(|l| {
                l.counts.iter().enumerate().map(move |(i, c)| {
                    vec![
                        l.layer.to_string(),
                        format!("{}", l.edges[i]),
                        format!("{}", l.edges[i + 1]),
                        c.to_string(),
                    ]
                })
            })
            .collect();
        (header, rows)
    }

    fn svg(&self) -> String {
        let (w, panel, margin) = (480.0, 110.0, 30.0);
        let h = margin + panel * self.layers.len().max(1) as f64;
        let mut svg = Svg::new(w, h);
        svg.text(
            w / 2.0,
            16.0,
            12.0,
            "middle",
            &format!("activations in [{}, {}]", self.range[0], self.range[1]),
        );
        for (k, layer) in self.layers.iter().enumerate() {
            let top = margin + panel * k as f64;
            let base = top + panel - 20.0;
            let max = layer.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
            let bw = (w - 2.0 * margin) / layer.counts.len() as f64;
            for (i, &c) in layer.counts.iter().enumerate() {
                let bh = (panel - 30.0) * c as f64 / max;
                svg.rect(margin + bw * i as f64, base - bh, bw * 0.9, bh, "#ff7f0e");
            }
            svg.line(margin, base, w - margin, base);
            svg.text(margin, top + 8.0, 9.0, "start", &format!("layer {}", layer.layer));
        }
        svg.finish()
    }
}
