//! CSV, JSON and SVG writers. Output is a pure function of the data, so reruns
//! with the same seed produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::Scenario;
use super::HarnessError;

/// Provenance stamped on every report.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub scenario: String,
    pub kind: String,
    pub config_sha256: String,
}

impl Provenance {
    pub fn of(s: &Scenario) -> Self {
        Provenance {
            scenario: s.name().to_string(),
            kind: s.kind().name().to_string(),
            config_sha256: s.config_sha256.clone(),
        }
    }

    /// `scenario=... config_sha256=... seed=...`; several seeds are joined by
    /// commas.
    pub fn comment(&self, seeds: &[u64]) -> String {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        format!(
            "scenario={} config_sha256={} seed={}",
            self.scenario,
            self.config_sha256,
            seeds.join(",")
        )
    }
}

/// Collects written paths and maps I/O failures.
pub struct Writer<'a> {
    pub dir: &'a Path,
    pub prov: Provenance,
    pub files: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    pub fn new(dir: &'a Path, prov: Provenance) -> Self {
        Writer {
            dir,
            prov,
            files: Vec::new(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), HarnessError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::from_io(parent, e))?;
        }
        std::fs::write(&p, data).map_err(|e| HarnessError::from_io(&p, e))?;
        self.files.push(p);
        Ok(())
    }

    /// CSV with a leading provenance comment.
    pub fn csv(&mut self, name: &str, seeds: &[u64], header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
        let mut buf = format!("# {}\n", self.prov.comment(seeds)).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let io = |e: csv::Error| HarnessError::Io {
                path: self.dir.join(name),
                source: std::io::Error::other(e),
            };
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| HarnessError::from_io(&self.dir.join(name), e))?;
        }
        self.bytes(name, &buf)
    }

    /// Pretty JSON object: the provenance fields followed by `body`'s fields.
    pub fn json(&mut self, name: &str, seeds: &[u64], body: Value) -> Result<Value, HarnessError> {
        let mut v = json!({
            "scenario": self.prov.scenario,
            "kind": self.prov.kind,
            "config_sha256": self.prov.config_sha256,
        });
        let o = v.as_object_mut().expect("object");
        if seeds.len() == 1 {
            o.insert("seed".into(), json!(seeds[0]));
        } else {
            o.insert("seeds".into(), json!(seeds));
        }
        if let Value::Object(b) = body {
            o.extend(b);
        }
        let mut text = serde_json::to_string_pretty(&v).expect("serializable");
        text.push('\n');
        self.bytes(name, text.as_bytes())?;
        Ok(v)
    }
}

/// Formats an `f64` for CSV cells.
pub fn num(v: f64) -> String {
    v.to_string()
}

/// One polyline of a plot.
#[derive(Clone, Debug)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub width: f64,
    pub opacity: f64,
}

/// Colors cycled over chunk polylines.
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const W: f64 = 900.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Line plot as standalone SVG text. `legend` entries are (color, label).
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    legend: &[(&str, &str)],
    comment: &str,
) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{ML} {MT} V{} H{}" fill="none" stroke="black" stroke-width="1"/>"#,
        H - MB,
        W - MR
    );
    for x in ticks(x0, x1, 5) {
        let px = sx(x);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="#ccc"/><text x="{px:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{x:.2}</text>"##,
            MT,
            H - MB,
            H - MB + 16.0
        );
    }
    for y in ticks(y0, y1, 5) {
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{ML}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#ccc"/><text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.4}</text>"##,
            W - MR,
            ML - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (ML + W - MR) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        escape(y_label)
    );
    for ser in series {
        if ser.points.len() < 2 {
            continue;
        }
        let mut d = String::with_capacity(ser.points.len() * 16);
        for (i, &(x, y)) in ser.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if i == 0 { "" } else { " " }, sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{d}" fill="none" stroke="{}" stroke-width="{}" stroke-opacity="{}"/>"#,
            ser.color, ser.width, ser.opacity
        );
    }
    for (i, (color, label)) in legend.iter().enumerate() {
        let y = MT + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            W - MR - 150.0,
            W - MR - 130.0,
            W - MR - 125.0,
            y + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_every_series() {
        let s = [
            Series {
                points: vec![(0.0, 0.0), (1.0, 1.0)],
                color: "red".into(),
                width: 1.0,
                opacity: 1.0,
            },
            Series {
                points: vec![(0.0, 1.0), (1.0, 0.0), (2.0, 0.5)],
                color: "black".into(),
                width: 2.0,
                opacity: 1.0,
            },
        ];
        let svg = line_plot_svg("t <1>", "x", "y", &s, &[("black", "executed")], "seed=1");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("<!-- seed=1 -->"));
        assert!(svg.contains("t &lt;1&gt;"));
        assert_eq!(svg, line_plot_svg("t <1>", "x", "y", &s, &[("black", "executed")], "seed=1"));
    }

    #[test]
    fn comment_lists_seeds() {
        let p = Provenance {
            scenario: "a".into(),
            kind: "k".into(),
            config_sha256: "00".into(),
        };
        assert_eq!(p.comment(&[1, 2]), "scenario=a config_sha256=00 seed=1,2");
    }
}
