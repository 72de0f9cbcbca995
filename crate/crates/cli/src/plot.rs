//! Static SVG charts from the dumped tables: average cumulative IV curves
//! with the reference band, and loading profiles per maturity.
//!
//! Output depends only on the table contents, so identical inputs give
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{file}: expected columns `{expected}`, found `{found}`")]
    SchemaMismatch {
        file: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{file} line {line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{file}: {source}")]
    Csv {
        file: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub const CURVE_COLUMNS: [&str; 6] = ["minute", "pos_mean", "neg_mean", "ref_mean", "band_lo", "band_hi"];
pub const LOADING_COLUMNS: [&str; 4] = ["maturity", "component", "bin_lo", "loading"];

const POSITIVE: &str = "#1f5fbf";
const NEGATIVE: &str = "#c8261e";
const REFERENCE: &str = "#333333";
const BAND: &str = "#b8b8b8";
const PALETTE: [&str; 3] = ["#1f5fbf", "#c8261e", "#2b8a3e"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

/// One curve dump; `None` marks an empty cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveTable {
    pub minutes: Vec<f64>,
    pub positive: Vec<Option<f64>>,
    pub negative: Vec<Option<f64>>,
    pub reference: Vec<Option<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

fn open(path: &Path, expected: &[&str]) -> Result<csv::Reader<std::fs::File>, PlotError> {
    let csv_err = |source| PlotError::Csv {
        file: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(expected.iter().copied()) {
        return Err(PlotError::SchemaMismatch {
            file: path.to_path_buf(),
            expected: expected.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(reader)
}

fn cell(path: &Path, line: u64, field: &str) -> Result<Option<f64>, PlotError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| PlotError::Parse {
        file: path.to_path_buf(),
        line,
        message: format!("`{field}` is not a number"),
    })
}

pub fn read_curve_table(path: &Path) -> Result<CurveTable, PlotError> {
    let mut reader = open(path, &CURVE_COLUMNS)?;
    let mut t = CurveTable::default();
    for rec in reader.records() {
        let rec = rec.map_err(|source| PlotError::Csv {
            file: path.to_path_buf(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| cell(path, line, &rec[i]);
        t.minutes.push(get(0)?.ok_or_else(|| PlotError::Parse {
            file: path.to_path_buf(),
            line,
            message: "empty minute".into(),
        })?);
        t.positive.push(get(1)?);
        t.negative.push(get(2)?);
        t.reference.push(get(3)?);
        t.lower.push(get(4)?);
        t.upper.push(get(5)?);
    }
    Ok(t)
}

/// Loading profiles per maturity label: component number to `(bin_lo, loading)` points.
pub type LoadingTable = BTreeMap<String, BTreeMap<u32, Vec<(f64, f64)>>>;

pub fn read_loadings(path: &Path) -> Result<LoadingTable, PlotError> {
    let mut reader = open(path, &LOADING_COLUMNS)?;
    let mut out = LoadingTable::new();
    for rec in reader.records() {
        let rec = rec.map_err(|source| PlotError::Csv {
            file: path.to_path_buf(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| PlotError::Parse {
            file: path.to_path_buf(),
            line,
            message,
        };
        let component: u32 = rec[1].parse().map_err(|_| bad(format!("bad component `{}`", &rec[1])))?;
        let bin = cell(path, line, &rec[2])?.ok_or_else(|| bad("empty bin".into()))?;
        let loading = cell(path, line, &rec[3])?.ok_or_else(|| bad("empty loading".into()))?;
        out.entry(rec[0].to_string())
            .or_default()
            .entry(component)
            .or_default()
            .push((bin, loading));
    }
    Ok(out)
}

/// Linear map from data to pixel coordinates with padded y range.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let mut x = span(&mut xs.clone());
        let mut y = span(&mut ys.clone());
        if !(x.0.is_finite() && x.1.is_finite()) {
            x = (0.0, 1.0);
        }
        if !(y.0.is_finite() && y.1.is_finite()) {
            y = (-1.0, 1.0);
        }
        if x.1 <= x.0 {
            x.1 = x.0 + 1.0;
        }
        let pad = if y.1 > y.0 { 0.05 * (y.1 - y.0) } else { 0.5 * y.0.abs().max(1e-3) };
        Frame {
            x,
            y: (y.0 - pad, y.1 + pad),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

/// Round tick step giving about six intervals.
fn tick_step(lo: f64, hi: f64) -> f64 {
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = tick_step(lo, hi);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1) = (frame.px(frame.x.0), frame.px(frame.x.1));
    let (y0, y1) = (frame.py(frame.y.0), frame.py(frame.y.1));
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for t in ticks(frame.x.0, frame.x.1) {
        let x = frame.px(t);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 16.0,
            label(t)
        );
    }
    for t in ticks(frame.y.0, frame.y.1) {
        let y = frame.py(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#e6e6e6"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            x0 - 6.0,
            y + 4.0,
            label(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn polyline(out: &mut String, frame: &Frame, points: &[(f64, f64)], color: &str, dashed: bool) {
    if points.is_empty() {
        return;
    }
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
        .collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>"#,
        coords.join(" ")
    );
}

fn legend(out: &mut String, entries: &[(&str, &str, bool)]) {
    for (i, (name, color, dashed)) in entries.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let x = LEFT + 12.0;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.8"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 24.0,
            x + 30.0,
            y + 4.0,
            escape(name)
        );
    }
}

fn present(minutes: &[f64], values: &[Option<f64>]) -> Vec<(f64, f64)> {
    minutes
        .iter()
        .zip(values)
        .filter_map(|(m, v)| v.map(|v| (*m, v)))
        .collect()
}

/// Renders the three average curves and, when complete, the shaded band.
pub fn render_curves(title: &str, table: &CurveTable) -> String {
    let band_complete = !table.lower.is_empty()
        && table.lower.iter().chain(&table.upper).all(Option::is_some);
    if !band_complete {
        warn!("{title}: band columns incomplete, band omitted");
    }
    let curves = [
        ("positive jumps", POSITIVE, false, present(&table.minutes, &table.positive)),
        ("negative jumps", NEGATIVE, false, present(&table.minutes, &table.negative)),
        ("reference", REFERENCE, true, present(&table.minutes, &table.reference)),
    ];
    let mut ys: Vec<f64> = curves.iter().flat_map(|c| c.3.iter().map(|p| p.1)).collect();
    if band_complete {
        ys.extend(table.lower.iter().chain(&table.upper).flatten());
    }
    let frame = Frame::new(table.minutes.iter().copied(), ys.iter().copied());
    let mut out = String::new();
    open_svg(&mut out, title, &frame, "minutes after jump", "cumulative change");
    if band_complete {
        let mut pts: Vec<String> = table
            .minutes
            .iter()
            .zip(&table.upper)
            .map(|(m, v)| format!("{:.2},{:.2}", frame.px(*m), frame.py(v.unwrap_or_default())))
            .collect();
        pts.extend(
            table
                .minutes
                .iter()
                .zip(&table.lower)
                .rev()
                .map(|(m, v)| format!("{:.2},{:.2}", frame.px(*m), frame.py(v.unwrap_or_default()))),
        );
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{BAND}" fill-opacity="0.45" stroke="none"/>"#,
            pts.join(" ")
        );
    }
    for (name, color, dashed, pts) in &curves {
        if pts.is_empty() {
            warn!("{title}: no {name} curve");
        }
        polyline(&mut out, &frame, pts, color, *dashed);
    }
    legend(
        &mut out,
        &curves.iter().map(|c| (c.0, c.1, c.2)).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Renders the loading profiles of one maturity, components in order.
pub fn render_loadings(title: &str, components: &BTreeMap<u32, Vec<(f64, f64)>>) -> String {
    let xs = components.values().flatten().map(|p| p.0);
    let ys = components.values().flatten().map(|p| p.1).chain([0.0]);
    let frame = Frame::new(xs, ys);
    let mut out = String::new();
    open_svg(&mut out, title, &frame, "moneyness bin (lower edge)", "loading");
    let names: Vec<String> = components.keys().map(|c| format!("PC{c}")).collect();
    for (i, pts) in components.values().enumerate() {
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        polyline(&mut out, &frame, &pts, PALETTE[i % PALETTE.len()], false);
    }
    let entries: Vec<(&str, &str, bool)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), PALETTE[i % PALETTE.len()], false))
        .collect();
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(band: bool) -> CurveTable {
        let minutes: Vec<f64> = (0..=60).map(f64::from).collect();
        let f = |k: f64| minutes.iter().map(|m| Some(k * m / 60.0)).collect::<Vec<_>>();
        CurveTable {
            positive: f(-0.3),
            negative: f(0.4),
            reference: f(0.01),
            lower: if band { f(-0.05) } else { vec![None; 61] },
            upper: if band { f(0.05) } else { vec![None; 61] },
            minutes,
        }
    }

    #[test]
    fn curves_chart_has_three_lines_and_band() {
        let svg = render_curves("ATM-IV 3m", &table(true));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(svg.contains(POSITIVE) && svg.contains(NEGATIVE) && svg.contains("stroke-dasharray"));
        assert_eq!(svg, render_curves("ATM-IV 3m", &table(true)));
    }

    #[test]
    fn missing_band_is_omitted() {
        let svg = render_curves("t", &table(false));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(!svg.contains("<polygon"));
    }

    #[test]
    fn ticks_are_round() {
        assert_eq!(ticks(0.0, 60.0), vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        assert_eq!(tick_step(-0.013, 0.021), 0.01);
        assert_eq!(label(-0.0), "0");
        assert_eq!(label(0.25), "0.25");
    }

    #[test]
    fn wrong_header_is_a_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "minute,pos,neg\n0,1,2\n").unwrap();
        assert!(matches!(read_curve_table(&path), Err(PlotError::SchemaMismatch { .. })));
        std::fs::write(&path, "maturity,component,bin_lo,loading\n3m,1,0.80,0.5\n3m,1,0.85,x\n").unwrap();
        assert!(matches!(read_loadings(&path), Err(PlotError::Parse { line: 3, .. })));
    }
}
