//! Standalone SVG 1.1 charts for run reports: grouped bars and mean curves
//! with standard-deviation bands. Output depends only on the inputs, so
//! repeated runs are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const PALETTE: [&str; 6] = ["#c0392b", "#2471a3", "#d68910", "#1e8449", "#7d3c98", "#5d6d7e"];

/// One bar per label, drawn side by side with the other series.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePanel {
    pub title: String,
    pub curves: Vec<Curve>,
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{0}" height="{1}" viewBox="0 0 {0} {1}" font-family="sans-serif" font-size="11">"#,
        num(w),
        num(h)
    );
}

/// Round step for about `target` intervals across `span`.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Axis range padded out to whole ticks; degenerate ranges are widened.
fn axis(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi - lo > 0.0 {
        (lo, hi)
    } else {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.5 } else { 1.0 };
        (lo - pad, hi + pad)
    };
    let step = nice_step(hi - lo, 5.0);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h * (self.hi - v) / (self.hi - self.lo)
    }

    fn y_axis(&self, out: &mut String, step: f64, label: &str) {
        let mut v = self.lo;
        let mut guard = 0;
        while v <= self.hi + step * 1e-6 && guard < 100 {
            let y = self.y(v);
            let _ = writeln!(
                out,
                r##"<path d="M{} {}H{}" stroke="#dddddd" stroke-width="0.5"/>"##,
                num(self.x0),
                num(y),
                num(self.x0 + self.w)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                num(self.x0 - 4.0),
                num(y + 3.5),
                tick_label(v, step)
            );
            v += step;
            guard += 1;
        }
        let _ = writeln!(
            out,
            r##"<path d="M{0} {1}V{2}H{3}" fill="none" stroke="#000000"/>"##,
            num(self.x0),
            num(self.y0),
            num(self.y0 + self.h),
            num(self.x0 + self.w)
        );
        let cx = self.x0 - 42.0;
        let cy = self.y0 + self.h / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{0}" y="{1}" text-anchor="middle" transform="rotate(-90 {0} {1})">{2}</text>"#,
            num(cx),
            num(cy),
            escape(label)
        );
    }
}

fn legend(out: &mut String, names: &[&str], x: f64, y: f64) {
    for (i, name) in names.iter().enumerate() {
        let yy = y + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<path d="M{} {}h14" stroke="{}" stroke-width="6"/>"#,
            num(x),
            num(yy),
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, num(x + 18.0), num(yy + 4.0), escape(name));
    }
}

/// Grouped vertical bars; each label gets one bar per series.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], series: &[BarSeries]) -> Result<String> {
    if labels.is_empty() || series.is_empty() {
        return Err(Error::Data("bar chart needs at least one label and one series".into()));
    }
    for s in series {
        if s.values.len() != labels.len() {
            return Err(Error::Data(format!("series {} has {} values for {} labels", s.name, s.values.len(), labels.len())));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("series {} contains non-finite values", s.name)));
        }
    }
    let all = series.iter().flat_map(|s| s.values.iter().copied());
    let (mn, mx) = all.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi, step) = axis(mn, mx);
    let slot = 14.0 * series.len() as f64 + 10.0;
    let plot_w = (slot * labels.len() as f64).max(160.0);
    let legend_h = if series.len() > 1 { 14.0 * series.len() as f64 } else { 0.0 };
    let frame = Frame { x0: 70.0, y0: 30.0 + legend_h, w: plot_w, h: 220.0, lo, hi };
    let width = frame.x0 + plot_w + 20.0;
    let height = frame.y0 + frame.h + 80.0;

    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, num(width / 2.0), escape(title));
    if series.len() > 1 {
        let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
        legend(&mut out, &names, frame.x0 + 8.0, 34.0);
    }
    frame.y_axis(&mut out, step, y_label);
    let slot_w = plot_w / labels.len() as f64;
    let bar_w = (slot_w - 10.0) / series.len() as f64;
    let base = frame.y(0.0);
    for (i, label) in labels.iter().enumerate() {
        let sx = frame.x0 + slot_w * i as f64 + 5.0;
        for (k, s) in series.iter().enumerate() {
            let y = frame.y(s.values[i]);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                num(sx + bar_w * k as f64),
                num(y.min(base)),
                num(bar_w),
                num((y - base).abs()),
                PALETTE[k % PALETTE.len()]
            );
        }
        let lx = sx + (slot_w - 10.0) / 2.0;
        let ly = frame.y0 + frame.h + 8.0;
        let _ = writeln!(
            out,
            r#"<text x="{0}" y="{1}" text-anchor="end" transform="rotate(-60 {0} {1})">{2}</text>"#,
            num(lx),
            num(ly),
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Panels of mean curves against time with shaded ±1 std bands, laid out
/// `columns` wide.
pub fn curve_chart(title: &str, y_label: &str, fs: f64, panels: &[CurvePanel], columns: usize) -> Result<String> {
    if panels.is_empty() || columns == 0 || !(fs > 0.0) {
        return Err(Error::Data("curve chart needs panels, columns and a positive sample rate".into()));
    }
    for p in panels {
        if p.curves.is_empty() {
            return Err(Error::Data(format!("panel {} has no curves", p.title)));
        }
        for c in &p.curves {
            if c.mean.is_empty() || c.mean.len() != c.std.len() {
                return Err(Error::Data(format!("curve {} needs equal, nonzero mean and std lengths", c.name)));
            }
            if c.mean.iter().chain(&c.std).any(|v| !v.is_finite()) || c.std.iter().any(|&s| s < 0.0) {
                return Err(Error::Data(format!("curve {} has non-finite values or negative std", c.name)));
            }
        }
    }
    let (pw, ph) = (300.0, 180.0);
    let (gap_x, gap_y) = (90.0, 70.0);
    let rows = panels.len().div_ceil(columns);
    let cols = columns.min(panels.len());
    let names: Vec<&str> = panels[0].curves.iter().map(|c| c.name.as_str()).collect();
    let top = 30.0 + 14.0 * names.len() as f64;
    let width = 70.0 + cols as f64 * (pw + gap_x) - gap_x + 20.0;
    let height = top + rows as f64 * (ph + gap_y);

    let mut out = String::new();
    header(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, num(width / 2.0), escape(title));
    legend(&mut out, &names, 78.0, 34.0);
    for (pi, panel) in panels.iter().enumerate() {
        let (lo, hi) = panel.curves.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, c| {
            c.mean.iter().zip(&c.std).fold(acc, |(a, b), (m, s)| (a.min(m - s), b.max(m + s)))
        });
        let (lo, hi, step) = axis(lo, hi);
        let frame = Frame {
            x0: 70.0 + (pi % columns) as f64 * (pw + gap_x),
            y0: top + (pi / columns) as f64 * (ph + gap_y) + 16.0,
            w: pw,
            h: ph,
            lo,
            hi,
        };
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(frame.x0 + pw / 2.0),
            num(frame.y0 - 6.0),
            escape(&panel.title)
        );
        frame.y_axis(&mut out, step, y_label);
        let n_max = panel.curves.iter().map(|c| c.mean.len()).max().unwrap_or(1);
        let t_max = ((n_max - 1).max(1)) as f64 / fs;
        let x = |i: usize| frame.x0 + pw * (i as f64 / fs) / t_max;
        let t_step = nice_step(t_max, 4.0);
        let mut t = 0.0;
        while t <= t_max + 1e-9 {
            let xx = frame.x0 + pw * t / t_max;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                num(xx),
                num(frame.y0 + ph + 14.0),
                tick_label(t, t_step)
            );
            t += t_step;
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#,
            num(frame.x0 + pw / 2.0),
            num(frame.y0 + ph + 30.0)
        );
        for (k, c) in panel.curves.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut band = String::new();
            for i in 0..c.mean.len() {
                let _ = write!(band, "{},{} ", num(x(i)), num(frame.y(c.mean[i] + c.std[i])));
            }
            for i in (0..c.mean.len()).rev() {
                let _ = write!(band, "{},{} ", num(x(i)), num(frame.y(c.mean[i] - c.std[i])));
            }
            let _ = writeln!(out, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
            let line: Vec<String> = (0..c.mean.len()).map(|i| format!("{},{}", num(x(i)), num(frame.y(c.mean[i])))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Single-series bar chart written to `path`.
pub fn emit_svg_bar(values: &[f64], labels: &[String], path: impl AsRef<Path>) -> Result<()> {
    let series = [BarSeries { name: "value".into(), values: values.to_vec() }];
    write(path.as_ref(), &bar_chart("", "", labels, &series)?)
}

/// One mean curve with its std band; inputs in mol/L, plotted in μmol/L.
pub fn emit_svg_curves(mean: &[f64], std: &[f64], fs: f64, path: impl AsRef<Path>) -> Result<()> {
    let scale = |v: &[f64]| v.iter().map(|x| x * 1e6).collect::<Vec<_>>();
    let panel = CurvePanel {
        title: String::new(),
        curves: vec![Curve { name: "mean".into(), mean: scale(mean), std: scale(std) }],
    };
    write(path.as_ref(), &curve_chart("", "μmol/L", fs, &[panel], 1)?)
}
