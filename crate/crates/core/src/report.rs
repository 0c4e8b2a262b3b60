//! Plots and summaries.
//!
//! Reads the `steps.csv` and `summary.csv` tables under `adapt/` and writes
//! SVG line charts of accuracy against test-time steps (mean line with a
//! ±std band per series) plus an ablation table as CSV and Markdown.
//! Rendering is deterministic: fixed number formatting, sorted inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{hash_line, write_text};
use crate::train::Variant;

/// One curve of a line chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 150.0, 40.0, 55.0);

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render series as an SVG line chart with ±std bands.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let xs = series.iter().flat_map(|s| s.x.iter().copied());
    let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let ys = series.iter().flat_map(|s| s.mean.iter().zip(&s.std).flat_map(|(m, d)| [m - d, m + d]));
    let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (xmin, xmax) = if xmin.is_finite() { (xmin, xmax.max(xmin + 1.0)) } else { (0.0, 1.0) };
    let (ymin, ymax) = if ymin.is_finite() { nice_range(ymin, ymax) } else { (0.0, 1.0) };
    let px = |x: f64| ml + (x - xmin) / (xmax - xmin) * pw;
    let py = |y: f64| mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{ml:.2}" y="{mt:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let y = ymin + (ymax - ymin) * i as f64 / 5.0;
        let yy = py(y);
        let _ = writeln!(s, r##"<line x1="{ml:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##, ml + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, ml - 6.0, yy + 4.0, y);
    }
    let ticks = ((xmax - xmin).round() as usize).clamp(1, 10);
    for i in 0..=ticks {
        let x = xmin + (xmax - xmin) * i as f64 / ticks as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, px(x), mt + ph + 18.0, fmt_tick(x));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, ml + pw / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = ser.x.iter().zip(&ser.mean).zip(&ser.std).map(|((x, m), d)| format!("{:.2},{:.2}", px(*x), py(m + d))).collect();
        let lower: Vec<String> =
            ser.x.iter().zip(&ser.mean).zip(&ser.std).rev().map(|((x, m), d)| format!("{:.2},{:.2}", px(*x), py(m - d))).collect();
        let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = ser.x.iter().zip(&ser.mean).map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(*m))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = mt + 16.0 + 20.0 * i as f64;
        let lx = ml + pw + 14.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.1}")
    }
}

/// A parsed CSV table with its provenance hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub hash: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str, path: &Path, expected: &[&str]) -> Result<Table> {
        let mut hash = None;
        let mut header = None;
        let mut rows = Vec::new();
        let mut offset = 0;
        for line in text.lines() {
            let here = offset;
            offset += line.len() + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(h) = rest.trim().strip_prefix("config_hash=") {
                    hash = Some(h.to_string());
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cells: Vec<String> = line.split(',').map(str::to_string).collect();
            match &header {
                None => {
                    if cells != expected {
                        return Err(Error::Format {
                            offset: here as u64,
                            message: format!("{}: header {:?} does not match expected {:?}", path.display(), cells, expected),
                        });
                    }
                    header = Some(cells);
                }
                Some(h) => {
                    if cells.len() != h.len() {
                        return Err(Error::Format {
                            offset: here as u64,
                            message: format!("{}: row has {} fields, header has {}", path.display(), cells.len(), h.len()),
                        });
                    }
                    rows.push(cells);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Format { offset: 0, message: format!("{}: missing header", path.display()) })?;
        Ok(Table { hash, header, rows })
    }

    pub fn load(path: &Path, expected: &[&str]) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Table::parse(&text, path, expected)
    }

    fn column(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("column checked against expected header")
    }

    fn number(&self, row: usize, name: &str, path: &Path) -> Result<f64> {
        let cell = &self.rows[row][self.column(name)];
        cell.parse().map_err(|_| Error::Format { offset: 0, message: format!("{}: '{cell}' in column {name} is not a number", path.display()) })
    }
}

pub const STEPS_HEADER: [&str; 6] = ["variant", "k", "step", "accuracy", "accuracy_std", "seeds"];
pub const SUMMARY_HEADER: [&str; 9] =
    ["variant", "k", "corruption", "severity", "accuracy_before", "accuracy_before_std", "accuracy_after", "accuracy_after_std", "seeds"];

fn parse_dir_name(name: &str) -> Option<(Variant, usize)> {
    let (v, k) = name.rsplit_once("_k")?;
    Some((v.parse().ok()?, k.parse().ok()?))
}

#[derive(Debug, Default)]
struct Collected {
    steps: BTreeMap<(usize, Variant), Series>,
    /// `(k, variant)` → average-row (before mean, before std, after mean, after std).
    averages: BTreeMap<(usize, Variant), [f64; 4]>,
    hashes: Vec<String>,
}

fn collect(out: &Path) -> Result<Collected> {
    let root = out.join("adapt");
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut c = Collected::default();
    for dir in dirs {
        let Some((variant, k)) = dir.file_name().and_then(|n| n.to_str()).and_then(parse_dir_name) else {
            log::warn!("skipping unrecognised results directory {}", dir.display());
            continue;
        };
        let sp = dir.join("summary.csv");
        if sp.exists() {
            let t = Table::load(&sp, &SUMMARY_HEADER)?;
            c.hashes.extend(t.hash.clone());
            let ci = t.column("corruption");
            if let Some(r) = t.rows.iter().position(|r| r[ci] == "avg") {
                let v = [
                    t.number(r, "accuracy_before", &sp)?,
                    t.number(r, "accuracy_before_std", &sp)?,
                    t.number(r, "accuracy_after", &sp)?,
                    t.number(r, "accuracy_after_std", &sp)?,
                ];
                c.averages.insert((k, variant), v);
            }
        }
        let tp = dir.join("steps.csv");
        if tp.exists() {
            let t = Table::load(&tp, &STEPS_HEADER)?;
            c.hashes.extend(t.hash.clone());
            let mut s = Series { name: variant.name().to_string(), x: vec![], mean: vec![], std: vec![] };
            for r in 0..t.rows.len() {
                s.x.push(t.number(r, "step", &tp)?);
                s.mean.push(100.0 * t.number(r, "accuracy", &tp)?);
                s.std.push(100.0 * t.number(r, "accuracy_std", &tp)?);
            }
            c.steps.insert((k, variant), s);
        }
    }
    c.hashes.sort();
    c.hashes.dedup();
    Ok(c)
}

/// Ablation rows: corrupted-test accuracy of every variant without
/// adaptation, plus the adapted prototype variants.
pub fn summary_rows(averages: &BTreeMap<(usize, Variant), [f64; 4]>) -> Vec<(String, usize, f64, f64)> {
    let mut rows = Vec::new();
    for (&(k, v), a) in averages {
        rows.push((v.name().to_string(), k, a[0], a[1]));
        if v != Variant::Baseline {
            rows.push((format!("{}+tta", v.name()), k, a[2], a[3]));
        }
    }
    rows
}

/// Render every chart and table for the results under `out`. Returns the
/// written paths.
pub fn cmd_report(out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let c = collect(out)?;
    if c.steps.is_empty() && c.averages.is_empty() {
        return Err(Error::io(
            out.join("adapt"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no adaptation results found; run adapt first"),
        ));
    }
    if c.hashes.len() > 1 {
        log::warn!("results come from {} different configs: {:?}", c.hashes.len(), c.hashes);
    }
    let hash = c.hashes.join("+");
    let dir = out.join("report");
    if dir.join("summary.csv").exists() && !force {
        return Err(Error::io(
            dir.join("summary.csv"),
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists; pass --force to overwrite"),
        ));
    }
    let mut written = Vec::new();
    let mut ks: Vec<usize> = c.steps.keys().map(|(k, _)| *k).collect();
    ks.dedup();
    for &k in &ks {
        let mut series = Vec::new();
        for v in [Variant::Jt, Variant::JtEnt] {
            match c.steps.get(&(k, v)) {
                Some(s) => series.push(s.clone()),
                None => log::warn!("no step results for {v} at K={k}; series omitted"),
            }
        }
        let svg = line_chart(&format!("Accuracy vs. test-time steps (K={k})"), "gradient steps P", "accuracy (%)", &series);
        let path = dir.join(format!("steps_k{k}.svg"));
        write_text(&path, &format!("<!-- config_hash={hash} -->\n{svg}"))?;
        written.push(path);
    }
    let by_k: Vec<Series> = c
        .steps
        .iter()
        .filter(|((_, v), _)| *v == Variant::JtEnt)
        .map(|((k, _), s)| Series { name: format!("K={k}"), ..s.clone() })
        .collect();
    if by_k.len() > 1 {
        let svg = line_chart("jt-ent accuracy vs. steps by prototype count", "gradient steps P", "accuracy (%)", &by_k);
        let path = dir.join("prototypes.svg");
        write_text(&path, &format!("<!-- config_hash={hash} -->\n{svg}"))?;
        written.push(path);
    }

    let rows = summary_rows(&c.averages);
    let mut csv = hash_line(&hash);
    csv.push_str("method,k,accuracy,accuracy_std\n");
    let mut md = format!("Mean corrupted-test accuracy over seeds (config {hash}).\n\n| method | K | accuracy (%) |\n|---|---|---|\n");
    for (name, k, m, s) in &rows {
        let _ = writeln!(csv, "{name},{k},{m:.6},{s:.6}");
        let _ = writeln!(md, "| {name} | {k} | {:.2} ± {:.2} |", 100.0 * m, 100.0 * s);
    }
    let path = dir.join("summary.csv");
    write_text(&path, &csv)?;
    written.push(path);
    let path = dir.join("summary.md");
    write_text(&path, &md)?;
    written.push(path);
    Ok(written)
}
