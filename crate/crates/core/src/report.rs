//! Report serialisation: CSV and JSON with shortest round-trip numbers, and
//! simple SVG line plots.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Shortest decimal that parses back to the same `f64`; non-finite values
/// become `inf`, `-inf`, `nan`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}
impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => fmt_float(*f),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// In-memory CSV table with a fixed header.
#[derive(Debug, Clone)]
pub struct Csv {
    columns: usize,
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { columns: header.len(), text: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        assert_eq!(cells.len(), self.columns, "CSV row width");
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Range(format!("JSON serialisation failed: {e}")))
}

/// JSON value of a float, with non-finite values as strings.
pub fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or_else(|| serde_json::Value::String(fmt_float(v)), serde_json::Value::Number)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLOURS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot; with `log_y` nonpositive values are dropped and the axis is
/// base-10 logarithmic.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|(x, y)| (*x, tf(*y)))
                .collect()
        })
        .collect();
    let all: Vec<(f64, f64)> = pts.iter().flatten().copied().collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    if all.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, w / 2.0, h / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
    let _ = writeln!(svg, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let ylab = if log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.3}</text>"#, sx(fx), h - mb + 16.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ylab}</text>"#, ml - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(&if log_y { format!("{y_label} (log10)") } else { y_label.to_string() })
    );
    for (k, (s, p)) in series.iter().zip(&pts).enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let path: Vec<String> = p.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            ml + 10.0,
            mt + 16.0 + 14.0 * k as f64,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0, 1e-7, 123456.789, -2.5e300, 5e-324] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_float(0.1), "0.1");
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn csv_quotes_text_with_commas() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(vec!["x,y".into(), Cell::Empty]);
        assert_eq!(c.finish(), "a,b\n\"x,y\",\n");
    }

    #[test]
    fn svg_handles_empty_and_log_data() {
        let s = svg_plot("t", "x", "y", &[Series { name: "s".into(), points: vec![(1.0, 0.0)] }], true);
        assert!(s.contains("no data"));
        let s = svg_plot("t", "x", "y", &[Series { name: "s".into(), points: vec![(1.0, 0.1), (2.0, 0.01)] }], true);
        assert!(s.contains("polyline"));
    }
}
