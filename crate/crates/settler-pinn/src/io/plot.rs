//! Minimal vector-graphics emission: per-figure CSV plus an SVG line plot.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// Visual role of one line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesStyle {
    Truth,
    Member,
    EnsembleMean,
}

#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub style: SeriesStyle,
}

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag * if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-12 * span {
        out.push(t);
        t += step;
    }
    out
}

/// Writes `<stem>.svg` and `<stem>.csv` for a family of line series sharing
/// an x axis. Member series render translucent, the ensemble mean dashed,
/// and truth as a solid line, so overlaid trajectories stay readable.
pub fn plot_heights(
    stem: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> Result<()> {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &x in &s.xs {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
        for &y in &s.ys {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() || !y_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n",
    );
    let _ = write!(
        svg,
        "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        title
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    for tx in nice_ticks(x_min, x_max, 8) {
        let _ = write!(
            svg,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/>\n<text x=\"{x}\" y=\"{ty}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{tx}</text>\n",
            x = sx(tx),
            b = HEIGHT - MARGIN,
            b2 = HEIGHT - MARGIN + 5.0,
            ty = HEIGHT - MARGIN + 18.0,
        );
    }
    for ty in nice_ticks(y_min, y_max, 6) {
        let _ = write!(
            svg,
            "<line x1=\"{m2}\" y1=\"{y}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/>\n<text x=\"{tx}\" y=\"{y2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            m = MARGIN,
            m2 = MARGIN - 5.0,
            y = sy(ty),
            y2 = sy(ty) + 4.0,
            tx = MARGIN - 8.0,
            label = format_tick(ty),
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        WIDTH / 2.0,
        HEIGHT - 14.0,
        x_label
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {y})\">{label}</text>\n",
        HEIGHT / 2.0,
        y = HEIGHT / 2.0,
        label = y_label
    );

    for s in series {
        let (stroke, opacity, width, dash) = match s.style {
            SeriesStyle::Truth => ("#1a1a1a", 1.0, 1.8, ""),
            SeriesStyle::Member => ("#d62728", 0.18, 1.0, ""),
            SeriesStyle::EnsembleMean => ("#d62728", 1.0, 2.0, " stroke-dasharray=\"7 4\""),
        };
        let mut path = String::new();
        for (i, (&x, &y)) in s.xs.iter().zip(&s.ys).enumerate() {
            let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = write!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-opacity=\"{opacity}\" stroke-width=\"{width}\"{dash}/>\n",
            path.trim_end()
        );
    }
    let _ = write!(svg, "</svg>\n");

    let svg_path = stem.with_extension("svg");
    super::write_atomic(&svg_path, svg.as_bytes())?;

    // companion CSV: x column plus one column per series
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["x".to_string()];
    header.extend(series.iter().map(|s| s.label.clone()));
    w.write_record(&header)
        .map_err(|e| crate::error::Error::Numeric(e.to_string()))?;
    let n = series.iter().map(|s| s.xs.len()).max().unwrap_or(0);
    for i in 0..n {
        let mut rec: Vec<String> = Vec::with_capacity(series.len() + 1);
        let x = series
            .iter()
            .find(|s| i < s.xs.len())
            .map(|s| s.xs[i])
            .unwrap_or(f64::NAN);
        rec.push(format_float(x));
        for s in series {
            rec.push(if i < s.ys.len() { format_float(s.ys[i]) } else { String::new() });
        }
        w.write_record(&rec)
            .map_err(|e| crate::error::Error::Numeric(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::Numeric(e.to_string()))?;
    super::write_atomic(&stem.with_extension("csv"), &bytes)
}

// `to_string` on f64 uses shortest round-trip formatting.
fn format_float(v: f64) -> String {
    v.to_string()
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}
