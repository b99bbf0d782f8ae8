use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};
use crate::model::NoiseKind;

use super::run::{write_csv, ExperimentResult};

/// Quartiles of the finite errors of one `(noise, k, J, smoothed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub noise: NoiseKind,
    pub k: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub smoothed: bool,
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

pub fn summarize(result: &ExperimentResult) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(&str, usize, usize, bool), (NoiseKind, Vec<f64>)> = BTreeMap::new();
    for r in &result.rows {
        let entry = cells
            .entry((r.noise.as_str(), r.k, r.j, r.smoothed))
            .or_insert_with(|| (r.noise, Vec::new()));
        if r.error.is_finite() {
            entry.1.push(r.error);
        }
    }
    cells
        .into_iter()
        .map(|((_, k, j, smoothed), (noise, mut errs))| {
            errs.sort_by(f64::total_cmp);
            CellSummary {
                noise,
                k,
                j,
                smoothed,
                n: errs.len(),
                q1: quantile(&errs, 0.25),
                median: quantile(&errs, 0.5),
                q3: quantile(&errs, 0.75),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(ShapeError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn log_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(f64::log10)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders one panel per `(noise, smoothed)` pair: median error against `k`
/// on log-log axes, one polyline per `J`, interquartile whiskers.
pub fn render_svg(result: &ExperimentResult) -> Result<String> {
    if result.rows.is_empty() {
        return Err(ShapeError::EmptyResult);
    }
    let summary = summarize(result);
    let mut panels: BTreeMap<(&str, bool), Vec<&CellSummary>> = BTreeMap::new();
    for c in &summary {
        panels.entry((c.noise.as_str(), c.smoothed)).or_default().push(c);
    }
    let mut js: Vec<usize> = summary.iter().map(|c| c.j).collect();
    js.sort_unstable();
    js.dedup();

    let cols = 2usize;
    let rows = panels.len().div_ceil(cols);
    let width = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = rows as f64 * (PANEL_H + MARGIN) + MARGIN + 30.0;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, j) in js.iter().enumerate() {
        let x = MARGIN + i as f64 * 80.0;
        let colour = COLOURS[i % COLOURS.len()];
        writeln!(
            svg,
            r#"<g class="legend"><line x1="{x}" y1="15" x2="{}" y2="15" stroke="{colour}" stroke-width="2"/><text x="{}" y="19">J = {j}</text></g>"#,
            x + 20.0,
            x + 25.0
        )
        .unwrap();
    }

    for (p, ((noise, smoothed), cells)) in panels.iter().enumerate() {
        let ox = MARGIN + (p % cols) as f64 * (PANEL_W + MARGIN);
        let oy = 30.0 + MARGIN + (p / cols) as f64 * (PANEL_H + MARGIN);
        let (kx0, kx1) = log_range(cells.iter().map(|c| c.k as f64));
        let (ey0, ey1) = log_range(cells.iter().flat_map(|c| [c.q1, c.median, c.q3]));
        let sx = |k: f64| ox + (k.log10() - kx0) / (kx1 - kx0) * PANEL_W;
        let sy = |e: f64| {
            let v = if e > 0.0 { e.log10() } else { ey0 };
            oy + PANEL_H - (v - ey0) / (ey1 - ey0) * PANEL_H
        };
        let title = format!("{noise}, {}", if *smoothed { "smoothed" } else { "unsmoothed" });
        writeln!(svg, r#"<g class="panel">"#).unwrap();
        writeln!(
            svg,
            r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 6.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">k (log)</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 30.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">median error (log)</text>"#,
            ox - 35.0,
            oy + PANEL_H / 2.0,
            ox - 35.0,
            oy + PANEL_H / 2.0
        )
        .unwrap();
        let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            writeln!(
                svg,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{k}</text>"#,
                sx(k as f64),
                oy + PANEL_H + 14.0
            )
            .unwrap();
        }
        for (label, e) in [(ey0, ey0), (ey1, ey1)] {
            writeln!(
                svg,
                r#"<text x="{}" y="{:.2}" text-anchor="end">1e{:.1}</text>"#,
                ox - 4.0,
                sy(10f64.powf(e)) + 4.0,
                label
            )
            .unwrap();
        }
        for (i, j) in js.iter().enumerate() {
            let mut series: Vec<&&CellSummary> = cells.iter().filter(|c| c.j == *j && c.median.is_finite()).collect();
            if series.is_empty() {
                continue;
            }
            series.sort_by_key(|c| c.k);
            let colour = COLOURS[i % COLOURS.len()];
            let points: Vec<String> = series
                .iter()
                .map(|c| format!("{:.2},{:.2}", sx(c.k as f64), sy(c.median)))
                .collect();
            writeln!(
                svg,
                r#"<polyline class="series" data-j="{j}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            )
            .unwrap();
            for c in series {
                let x = sx(c.k as f64);
                writeln!(
                    svg,
                    r#"<line class="whisker" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{colour}"/>"#,
                    sy(c.q1),
                    sy(c.q3)
                )
                .unwrap();
                writeln!(
                    svg,
                    r#"<circle cx="{x:.2}" cy="{:.2}" r="2.5" fill="{colour}"/>"#,
                    sy(c.median)
                )
                .unwrap();
            }
        }
        writeln!(svg, "</g>").unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the report into `out_dir`; returns the files written.
pub fn write_report(result: &ExperimentResult, format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        return Err(ShapeError::EmptyResult);
    }
    std::fs::create_dir_all(out_dir)?;
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join("results.csv");
            write_csv(result, &path)?;
            let summary_path = out_dir.join("summary.csv");
            let mut w = csv::Writer::from_path(&summary_path)?;
            for c in summarize(result) {
                w.serialize(c)?;
            }
            w.flush()?;
            Ok(vec![path, summary_path])
        }
        ReportFormat::Svg => {
            let path = out_dir.join("summary.svg");
            std::fs::write(&path, render_svg(result)?)?;
            Ok(vec![path])
        }
    }
}
