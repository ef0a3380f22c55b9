//! Deterministic SVG line plots with shaded mean ± std bands.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<BandPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Aggregates runs point by point: `x` is the mean of the runs' x values at
/// that index, the band is mean ± population std of y. Runs are cut to the
/// shortest one.
pub fn band(runs: &[Vec<(f64, f64)>]) -> Result<Vec<BandPoint>> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::Contract("cannot aggregate empty runs".into()));
    }
    let n = runs.len() as f64;
    Ok((0..len)
        .map(|i| {
            let x = runs.iter().map(|r| r[i].0).sum::<f64>() / n;
            let mean = runs.iter().map(|r| r[i].1).sum::<f64>() / n;
            let var = runs.iter().map(|r| (r[i].1 - mean).powi(2)).sum::<f64>() / n;
            BandPoint { x, mean, std: var.sqrt() }
        })
        .collect())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 340.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".to_string() } else { s.to_string() }
    }
}

fn render_panel(out: &mut String, p: &Panel, ox: f64) -> Result<()> {
    let pts = || p.series.iter().flat_map(|s| s.points.iter());
    if pts().any(|b| !(b.x.is_finite() && b.mean.is_finite() && b.std.is_finite())) {
        return Err(Error::NonFinite(format!("plot data in panel `{}`", p.title)));
    }
    let (x0, x1) = extent(pts().map(|b| b.x));
    let (y0, y1) = extent(pts().flat_map(|b| [b.mean - b.std, b.mean + b.std]));
    let (left, top) = (ox + MARGIN_L, MARGIN_T);
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * h;

    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"##,
        left + w / 2.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"##,
            top + h,
            top + h + 4.0,
            top + h + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
            left - 4.0,
            left - 6.0,
            py + 3.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"##,
        left + w / 2.0,
        PANEL_H - 12.0,
        escape(&p.x_label)
    );
    let (lx, ly) = (ox + 16.0, top + h / 2.0);
    let _ = writeln!(
        out,
        r##"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"##,
        escape(&p.y_label)
    );

    for (k, s) in p.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.points.is_empty() {
            continue;
        }
        let mut upper: Vec<String> = s.points.iter().map(|b| format!("{:.2},{:.2}", sx(b.x), sy(b.mean + b.std))).collect();
        let lower = s.points.iter().rev().map(|b| format!("{:.2},{:.2}", sx(b.x), sy(b.mean - b.std)));
        upper.extend(lower);
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"##,
            upper.join(" ")
        );
        let line: Vec<String> = s.points.iter().map(|b| format!("{:.2},{:.2}", sx(b.x), sy(b.mean))).collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"##,
            line.join(" ")
        );
        if s.points.len() == 1 {
            let b = s.points[0];
            let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"##, sx(b.x), sy(b.mean));
        }
        let ly = top + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="10">{}</text>"##,
            left + 8.0,
            left + 24.0,
            left + 28.0,
            ly + 3.0,
            escape(&s.label)
        );
    }
    Ok(())
}

/// Renders panels side by side. Fails when there is nothing to draw.
pub fn render_svg(panels: &[Panel]) -> Result<String> {
    if panels.is_empty() || panels.iter().any(|p| p.series.iter().all(|s| s.points.is_empty())) {
        return Err(Error::Contract("nothing to plot: a panel has no data points".into()));
    }
    let width = PANEL_W * panels.len() as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{PANEL_H:.0}\" viewBox=\"0 0 {width:.0} {PANEL_H:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_W * i as f64)?;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_is_population_moments() {
        let b = band(&[vec![(0.0, 1.0)], vec![(0.0, 2.0)], vec![(0.0, 3.0)]]).unwrap();
        assert_eq!(b[0].mean, 2.0);
        assert!((b[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(band(&[]).is_err());
    }

    #[test]
    fn empty_panel_is_an_error() {
        let p = Panel {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![],
        };
        assert!(render_svg(&[p]).is_err());
    }

    #[test]
    fn ticks_are_compact() {
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(20000.0), "20000");
        assert_eq!(tick_label(-0.0), "0");
        assert_eq!(tick_label(2e-5), "2.00e-5");
    }
}
