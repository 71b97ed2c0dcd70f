//! Static SVG line plots of metrics tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    /// Column whose values split rows into series.
    pub group: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
    pub title: Option<String>,
}

impl PlotSpec {
    pub fn log_log(x: &str, y: &str) -> Self {
        PlotSpec {
            x: x.into(),
            y: y.into(),
            group: None,
            log_x: true,
            log_y: true,
            title: None,
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

type Series = (String, Vec<(f64, f64)>);

fn read_series(csv_text: &str, spec: &PlotSpec) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Input(format!("column `{name}` not in the table")))
    };
    let xi = col(&spec.x)?;
    let yi = col(&spec.y)?;
    let gi = spec.group.as_deref().map(col).transpose()?;
    let mut series: Vec<Series> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| {
            record[i]
                .parse::<f64>()
                .map_err(|_| LabError::Input(format!("non-numeric value `{}` in column {i}", &record[i])))
        };
        let (x, y) = (parse(xi)?, parse(yi)?);
        if (spec.log_x && !(x > 0.0)) || (spec.log_y && !(y > 0.0)) || !x.is_finite() || !y.is_finite() {
            continue;
        }
        let key = gi.map(|i| record[i].to_string()).unwrap_or_default();
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((key, vec![(x, y)])),
        }
    }
    if series.is_empty() {
        return Err(LabError::Input("no plottable series".into()));
    }
    Ok(series)
}

fn decade_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let (a, b) = (lo.floor() as i32, hi.ceil() as i32);
    (a..=b).map(f64::from).filter(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9).collect()
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the table as SVG text; identical input gives identical bytes.
pub fn render_svg(csv_text: &str, spec: &PlotSpec) -> Result<String> {
    let series = read_series(csv_text, spec)?;
    let tx = |v: f64| if spec.log_x { v.log10() } else { v };
    let ty = |v: f64| if spec.log_y { v.log10() } else { v };
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad_y = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad_y, y1 + pad_y);
    let (left, right, top, bottom) = MARGIN;
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
    let px = |v: f64| left + (v - x0) / (x1 - x0) * pw;
    let py = |v: f64| top + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(title) = &spec.title {
        let _ = writeln!(w, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
    }
    let _ = writeln!(
        w,
        r#"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let xt = if spec.log_x { decade_ticks(x0, x1) } else { linear_ticks(x0, x1) };
    for v in xt {
        let x = px(v);
        let _ = writeln!(w, r##"<line x1="{x:.2}" y1="{top:.1}" x2="{x:.2}" y2="{:.1}" stroke="#dddddd"/>"##, top + ph);
        let _ = writeln!(w, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, top + ph + 16.0, label(v, spec.log_x));
    }
    let yt = if spec.log_y { decade_ticks(y0, y1) } else { linear_ticks(y0, y1) };
    for v in yt {
        let y = py(v);
        let _ = writeln!(w, r##"<line x1="{left:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(w, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, label(v, spec.log_y));
    }
    let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, HEIGHT - 12.0, escape(&spec.x));
    let _ = writeln!(
        w,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&spec.y)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(tx(x)), py(ty(y)))).collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        if !name.is_empty() {
            let ly = top + 14.0 + 14.0 * i as f64;
            let _ = writeln!(w, r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" fill="{color}">{}</text>"#, left + pw - 8.0, escape(name));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders `csv_path` and writes `out`; nothing is written on error.
pub fn emit_plot(csv_path: &Path, spec: &PlotSpec, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path)?;
    let svg = render_svg(&text, spec)?;
    std::fs::write(out, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "scheme,N,tv\nei,64,0.05\nei,128,0.025\nei,256,0.0125\nddim,64,0.03\nddim,128,0.015\nddim,256,0.0075\n";

    #[test]
    fn two_series_two_polylines() {
        let mut spec = PlotSpec::log_log("N", "tv");
        spec.group = Some("scheme".into());
        let svg = render_svg(TWO, &spec).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, render_svg(TWO, &spec).unwrap());
    }

    #[test]
    fn empty_series_is_an_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        std::fs::write(&csv_path, "N,tv\n").unwrap();
        let out = dir.path().join("plot.svg");
        assert!(emit_plot(&csv_path, &PlotSpec::log_log("N", "tv"), &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn missing_column_is_an_error() {
        assert!(render_svg(TWO, &PlotSpec::log_log("N", "nope")).is_err());
    }

    #[test]
    fn linear_axes() {
        let spec = PlotSpec {
            log_x: false,
            log_y: false,
            ..PlotSpec::log_log("N", "tv")
        };
        let svg = render_svg("N,tv\n1,-1\n2,0\n3,1\n", &spec).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
