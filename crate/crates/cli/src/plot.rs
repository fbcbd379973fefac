//! Minimal deterministic SVG line plots of CSV columns.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::metrics::Table;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_Y: f64 = 40.0;
const COLORS: [&str; 8] = ["#1f77b4", "#2ca02c", "#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Series for columns `ys` (or every column but `x`) of `table`; rows with
/// an empty or non-finite cell in either column are left out.
pub fn series_from_table(table: &Table, x: &str, ys: Option<&[String]>) -> Result<Vec<Series>> {
    let xi = table.column(x).ok_or_else(|| CliError::Plot(format!("no column '{x}'")))?;
    let names: Vec<String> = match ys {
        Some(ys) => ys.to_vec(),
        None => table.columns.iter().filter(|c| *c != x).cloned().collect(),
    };
    let mut out = Vec::new();
    for name in names {
        let yi = table.column(&name).ok_or_else(|| CliError::Plot(format!("no column '{name}'")))?;
        let points: Vec<(f64, f64)> = table.rows.iter().filter_map(|r| Some((r[xi]?, r[yi]?))).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        if !points.is_empty() {
            out.push(Series { name, points });
        }
    }
    if out.is_empty() {
        return Err(CliError::Plot("nothing to draw".into()));
    }
    Ok(out)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|k| lo + (hi - lo) * k as f64 / 4.0).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(series: &[Series], x_label: &str, logy: bool) -> Result<String> {
    let fy = |y: f64| if logy { y.log10() } else { y };
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(CliError::Plot(format!("series '{}' has a non-finite value", s.name)));
            }
            if logy && y <= 0.0 {
                return Err(CliError::Plot(format!("series '{}' has a non-positive value on a log axis", s.name)));
            }
            pts.push((x, fy(y)));
        }
    }
    if pts.is_empty() {
        return Err(CliError::Plot("nothing to draw".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - 2.0 * MARGIN_Y);
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#).unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#, l = MARGIN_LEFT, t = MARGIN_Y, b = MARGIN_Y + ph, r = MARGIN_LEFT + pw).unwrap();
    for t in ticks(x0, x1) {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, sx(t), MARGIN_Y + ph + 16.0, format_tick(t)).unwrap();
    }
    for t in ticks(y0, y1) {
        let label = if logy { format!("1e{t:.2}") } else { format_tick(t) };
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{label}</text>"#, MARGIN_LEFT - 6.0, sy(t) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, MARGIN_LEFT + pw / 2.0, HEIGHT - 6.0, escape(x_label)).unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if ser.points.len() == 1 {
            let (x, y) = ser.points[0];
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(fy(y))).unwrap();
        } else {
            let coords: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(fy(y)))).collect();
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")).unwrap();
        }
        let ly = MARGIN_Y + 16.0 * i as f64;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{color}">{}</text>"#, MARGIN_LEFT + pw + 12.0, ly + 4.0, escape(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn plot_file(input: &Path, out: &Path, x: &str, ys: Option<&[String]>, logy: bool) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(CliError::io(input))?;
    let table = Table::parse(&text).map_err(|e| CliError::Plot(format!("{}: {e}", input.display())))?;
    let svg = render_svg(&series_from_table(&table, x, ys)?, x, logy)?;
    std::fs::write(out, svg).map_err(CliError::io(out))
}
