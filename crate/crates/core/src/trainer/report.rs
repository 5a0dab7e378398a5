//! Renders metric CSV files as markdown tables and simple SVG line plots.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Header and rows of a comma-separated file without quoting.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty CSV".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let row: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn fmt_cell(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.contains('.') || s.contains('e') => format!("{v:.4}"),
        _ => s.to_string(),
    }
}

pub fn csv_to_markdown(text: &str) -> Result<String> {
    let (header, rows) = parse_csv(text)?;
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
    for r in rows {
        let cells: Vec<String> = r.iter().map(|c| fmt_cell(c)).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    Ok(out)
}

/// Numeric columns `x` and `ys` of a CSV as plot series.
pub fn csv_series(text: &str, x: &str, ys: &[&str]) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let (header, rows) = parse_csv(text)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidConfig(format!("CSV has no column {name}")))
    };
    let xi = col(x)?;
    let mut out = Vec::new();
    for &y in ys {
        let yi = col(y)?;
        let pts = rows
            .iter()
            .filter_map(|r| Some((r[xi].parse().ok()?, r[yi].parse().ok()?)))
            .collect();
        out.push((y.to_string(), pts));
    }
    Ok(out)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r##"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="#444"/>"##,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, pad - 4.0, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" text-anchor="middle">{x0}</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1}</text>"#, w - pad, h - pad + 14.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.1} {:.1}", if j == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#,
            w - pad - 80.0,
            pad + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
