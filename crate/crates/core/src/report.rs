//! Report files: CSV tables, pretty JSON and small SVG plots.
//!
//! SVG output uses only these elements: `svg`, `g`, `rect`, `line`,
//! `polyline`, `text` and `title`. Numbers are written with Rust's shortest
//! round-trip formatting, so equal inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{Comparison, CompressionPlan, ConvergenceCurve, SensitivityCurves, SimilarityGrid};
use crate::error::{Error, Result};

/// Elements SVG output is limited to.
pub const SVG_ELEMENTS: &[&str] = &["svg", "g", "rect", "line", "polyline", "text", "title"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?} (csv, json, svg)"))),
        }
    }
}

/// Something that can be written as a report.
pub trait Report {
    fn csv(&self) -> String;
    fn json(&self) -> Result<String>;
    /// `None` when there is nothing to plot.
    fn svg(&self) -> Option<String>;

    fn render(&self, format: Format) -> Result<Option<String>> {
        Ok(match format {
            Format::Csv => Some(self.csv()),
            Format::Json => Some(self.json()?),
            Format::Svg => self.svg(),
        })
    }
}

fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(out: &mut String, fields: impl IntoIterator<Item = String>) {
    let fields: Vec<String> = fields.into_iter().map(|f| csv_field(&f)).collect();
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `stem.<ext>` under `dir` for each format that has content.
pub fn emit_report(dir: &Path, stem: &str, report: &dyn Report, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        if let Some(body) = report.render(f)? {
            let path = dir.join(format!("{stem}.{}", f.extension()));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Plain table of string cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

impl Report for Table {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(&mut out, self.columns.clone());
        for r in &self.rows {
            csv_line(&mut out, r.clone());
        }
        out
    }

    fn json(&self) -> Result<String> {
        let records: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|r| {
                self.columns
                    .iter()
                    .zip(r)
                    .map(|(c, v)| (c.clone(), serde_json::Value::String(v.clone())))
                    .collect()
            })
            .collect();
        to_json(&records)
    }

    fn svg(&self) -> Option<String> {
        None
    }
}

impl Report for SimilarityGrid {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(&mut out, std::iter::once("layer".to_string()).chain(self.cols.iter().cloned()));
        for (name, row) in self.rows.iter().zip(&self.values) {
            csv_line(&mut out, std::iter::once(name.clone()).chain(row.iter().map(|v| v.to_string())));
        }
        out
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }

    fn svg(&self) -> Option<String> {
        Some(heatmap(self))
    }
}

const CELL: f64 = 40.0;
const MARGIN: f64 = 90.0;

/// Grey level for a value in [0, 1]; 1 is black.
fn shade(v: f64) -> String {
    let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    format!("#{g:02x}{g:02x}{g:02x}")
}

fn heatmap(g: &SimilarityGrid) -> String {
    let w = MARGIN + CELL * g.cols.len() as f64 + 10.0;
    let h = MARGIN + CELL * g.rows.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let title = match (g.row_step, g.col_step) {
        (Some(a), Some(b)) => format!("step {a} vs step {b}"),
        _ => "similarity".to_string(),
    };
    let _ = writeln!(s, "<title>{}</title>", xml_escape(&title));
    let _ = writeln!(s, r#"<text x="4" y="16" font-size="12">{}</text>"#, xml_escape(&title));
    for (j, c) in g.cols.iter().enumerate() {
        let x = MARGIN + CELL * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            MARGIN - 6.0,
            xml_escape(c)
        );
    }
    let _ = writeln!(s, "<g>");
    for (i, (r, row)) in g.rows.iter().zip(&g.values).enumerate() {
        let y = MARGIN + CELL * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            y + CELL * 0.6,
            xml_escape(r)
        );
        for (j, v) in row.iter().enumerate() {
            let x = MARGIN + CELL * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{v:.4}</title></rect>"#,
                shade(*v)
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

/// Named series over a shared x axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

impl Report for LinePlot {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(
            &mut out,
            std::iter::once(self.x_label.clone()).chain(self.series.iter().map(|(n, _)| n.clone())),
        );
        for (i, x) in self.x.iter().enumerate() {
            csv_line(
                &mut out,
                std::iter::once(x.to_string()).chain(self.series.iter().map(|(_, v)| v[i].to_string())),
            );
        }
        out
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }

    fn svg(&self) -> Option<String> {
        if self.x.is_empty() {
            return None;
        }
        let (w, h, pad) = (480.0, 300.0, 40.0);
        let (x0, x1) = self.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let all = self.series.iter().flat_map(|(_, v)| v.iter().copied());
        let (y0, y1) = all.fold((0.0f64, 1.0f64), |(a, b), v| (a.min(v), b.max(v)));
        let sx = |v: f64| pad + (w - 2.0 * pad) * if x1 > x0 { (v - x0) / (x1 - x0) } else { 0.5 };
        let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v - y0) / (y1 - y0);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        let _ = writeln!(s, "<title>{}</title>", xml_escape(&self.title));
        let _ = writeln!(s, r#"<text x="4" y="16" font-size="12">{}</text>"#, xml_escape(&self.title));
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#, b = h - pad);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 8.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{y1:.3}</text>"#, pad + 4.0);
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{y0:.3}</text>"#, h - pad);
        let _ = writeln!(s, "<g>");
        for (k, (name, v)) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = self.x.iter().zip(v).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                xml_escape(name)
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
                w - pad + 4.0,
                pad + 12.0 * k as f64,
                xml_escape(name)
            );
        }
        let _ = writeln!(s, "</g>");
        s.push_str("</svg>\n");
        Some(s)
    }
}

/// Canonical correlations of one comparison, descending.
impl Report for Comparison {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(&mut out, ["index".to_string(), "rho".to_string()]);
        for (i, r) in self.correlations.iter().enumerate() {
            csv_line(&mut out, [i.to_string(), r.to_string()]);
        }
        out
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }

    fn svg(&self) -> Option<String> {
        LinePlot {
            title: format!("{} SVCCA, mean {:.4}", self.method, self.mean_similarity),
            x_label: "direction".into(),
            x: (0..self.correlations.len()).map(|i| i as f64).collect(),
            series: vec![("rho".into(), self.correlations.clone())],
        }
        .svg()
    }
}

/// One line per layer: ρ̄ with the final representation against step.
pub fn curves_plot(curves: &[ConvergenceCurve]) -> LinePlot {
    LinePlot {
        title: "similarity with final representation".into(),
        x_label: "step".into(),
        x: curves.first().map(|c| c.steps.iter().map(|&s| s as f64).collect()).unwrap_or_default(),
        series: curves.iter().map(|c| (c.layer.clone(), c.values.clone())).collect(),
    }
}

/// One line per class over layer index, plus the null baseline.
pub fn sensitivity_plot(s: &SensitivityCurves) -> LinePlot {
    let mut series: Vec<(String, Vec<f64>)> = s.classes.iter().cloned().zip(s.values.iter().cloned()).collect();
    series.push(("null-mean".into(), s.null_mean.clone()));
    series.push(("null-p95".into(), s.null_p95.clone()));
    LinePlot {
        title: "class sensitivity".into(),
        x_label: "layer".into(),
        x: (1..=s.layers.len()).map(|l| l as f64).collect(),
        series,
    }
}

impl Report for SensitivityCurves {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(
            &mut out,
            ["layer".to_string()]
                .into_iter()
                .chain(self.classes.iter().cloned())
                .chain(["null_mean".to_string(), "null_p95".to_string()]),
        );
        for (l, name) in self.layers.iter().enumerate() {
            csv_line(
                &mut out,
                std::iter::once(name.clone())
                    .chain(self.values.iter().map(|c| c[l].to_string()))
                    .chain([self.null_mean[l].to_string(), self.null_p95[l].to_string()]),
            );
        }
        out
    }

    fn json(&self) -> Result<String> {
        to_json(self)
    }

    fn svg(&self) -> Option<String> {
        sensitivity_plot(self).svg()
    }
}

/// Compression plans, summarised.
pub struct Plans<'a>(pub &'a [CompressionPlan]);

impl Report for Plans<'_> {
    fn csv(&self) -> String {
        let mut out = String::new();
        csv_line(
            &mut out,
            ["layer", "k", "n", "size_ratio", "params_folded", "params_original"].map(String::from),
        );
        for p in self.0 {
            csv_line(
                &mut out,
                [
                    p.layer.clone(),
                    p.k.to_string(),
                    p.n.to_string(),
                    p.size_ratio.to_string(),
                    p.params_folded.to_string(),
                    p.params_original.to_string(),
                ],
            );
        }
        out
    }

    fn json(&self) -> Result<String> {
        to_json(&self.0)
    }

    fn svg(&self) -> Option<String> {
        None
    }
}

/// Element names appearing in an SVG document, in order.
pub fn svg_element_names(svg: &str) -> Vec<String> {
    svg.split('<')
        .skip(1)
        .filter(|t| !t.starts_with('/') && !t.starts_with('?') && !t.starts_with('!'))
        .map(|t| t.chars().take_while(|c| c.is_ascii_alphanumeric()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svcca::Denominator;

    fn grid() -> SimilarityGrid {
        SimilarityGrid {
            rows: vec!["a".into(), "b".into()],
            cols: vec!["a".into(), "b,c".into()],
            row_step: Some(0),
            col_step: Some(5),
            threshold: 0.99,
            denominator: Denominator::Retained,
            values: vec![vec![1.0, 0.25], vec![0.5, 0.75]],
        }
    }

    #[test]
    fn grid_csv_shape() {
        let csv = grid().csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "layer,a,\"b,c\"");
        assert_eq!(lines[1], "a,1,0.25");
    }

    #[test]
    fn emitted_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let all = [Format::Csv, Format::Json, Format::Svg];
        let a = emit_report(&dir.path().join("a"), "grid", &grid(), &all).unwrap();
        let b = emit_report(&dir.path().join("b"), "grid", &grid(), &all).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&a[1]).unwrap()).unwrap();
        assert_eq!(json["values"][1][1], 0.75);
    }

    #[test]
    fn svg_uses_documented_elements() {
        let curves = vec![ConvergenceCurve {
            layer: "l<1>".into(),
            steps: vec![0, 10],
            values: vec![0.2, 1.0],
        }];
        for svg in [grid().svg().unwrap(), curves_plot(&curves).svg().unwrap()] {
            let names = svg_element_names(&svg);
            assert_eq!(names[0], "svg");
            assert!(names.iter().all(|n| SVG_ELEMENTS.contains(&n.as_str())), "{names:?}");
            assert_eq!(svg.matches("<svg").count(), 1);
        }
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(&["k", "loss"]);
        t.push(vec!["2".into(), "0.5".into()]);
        assert_eq!(t.csv(), "k,loss\n2,0.5\n");
        assert!(t.json().unwrap().contains("\"loss\": \"0.5\""));
        assert!(t.svg().is_none());
    }
}
