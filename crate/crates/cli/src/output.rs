//! CSV writing and flat SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes a header row and then every record, RFC-4180 quoted.
pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One named polyline.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart over `[x0, x1] × [y0, y1]` with a legend, as an SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x_range: [f64; 2], y_range: [f64; 2], series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x_range[0]) / (x_range[1] - x_range[0]) * pw;
    let sy = |y: f64| top + ph - (y - y_range[0]) / (y_range[1] - y_range[0]) * ph;
    let mut s = String::new();
    let mut line = |t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    ));
    line(format!(r#"<rect width="{w}" height="{h}" fill="white"/>"#));
    line(format!(r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title)));
    line(format!(
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    ));
    for i in 0..=5 {
        let fx = x_range[0] + (x_range[1] - x_range[0]) * i as f64 / 5.0;
        let fy = y_range[0] + (y_range[1] - y_range[0]) * i as f64 / 5.0;
        line(format!(
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text>"#,
            sx(fx),
            top + ph + 16.0
        ));
        line(format!(r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.2}</text>"#, left - 6.0, sy(fy) + 4.0));
        line(format!(
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            left + pw,
            y = sy(fy)
        ));
    }
    line(format!(
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    ));
    line(format!(
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    ));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for (x, y) in &ser.points {
            write!(pts, "{:.2},{:.2} ", sx(*x), sy(*y)).expect("write to string");
        }
        line(format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.trim_end()
        ));
        let ly = top + 16.0 + 20.0 * i as f64;
        line(format!(
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        ));
        line(format!(r#"<text x="{:.1}" y="{:.1}">{}</text>"#, left + pw + 38.0, ly + 4.0, escape(&ser.name)));
    }
    line("</svg>".to_owned());
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Shortest round-trip decimal form of a float.
pub fn num(v: f64) -> String {
    format!("{v}")
}
