//! Minimal SVG plots: histograms, line plots with error bars, and bar charts.
//!
//! Output is plain text with fixed-precision coordinates, so identical data gives
//! identical files.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data coordinates into the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    out: String,
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if (hi - lo).abs() < 1e-12 || !lo.is_finite() || !hi.is_finite() {
                let c = if lo.is_finite() { lo } else { 0.0 };
                (c - 1.0, c + 1.0)
            } else {
                (lo, hi)
            }
        };
        let mut f = Self {
            x: pad(x),
            y: pad(y),
            out: String::new(),
        };
        let _ = writeln!(
            f.out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(f.out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            f.out,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        f.axes(x_label, y_label);
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (MARGIN_L, WIDTH - MARGIN_R, MARGIN_T, HEIGHT - MARGIN_B);
        let _ = writeln!(
            self.out,
            r#"<path d="M{x0:.1},{y0:.1} L{x0:.1},{y1:.1} L{x1:.1},{y1:.1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let (px, py) = (self.px(fx), self.py(fy));
            let _ = writeln!(
                self.out,
                r#"<line x1="{px:.1}" y1="{y1:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                y1 + 4.0,
                y1 + 18.0,
                tick(fx)
            );
            let _ = writeln!(
                self.out,
                r#"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                py + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            self.out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 10.0,
            escape(x_label)
        );
        let _ = writeln!(
            self.out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }

    fn legend(&mut self, names: &[&str]) {
        if names.len() < 2 {
            return;
        }
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN_T + 6.0 + 16.0 * i as f64;
            let x = WIDTH - MARGIN_R - 150.0;
            let _ = writeln!(
                self.out,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                y - 9.0,
                color(i),
                x + 14.0,
                y,
                escape(name)
            );
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Overlaid density-normalized histograms on shared bins.
pub fn histogram(title: &str, x_label: &str, series: &[(&str, &[f64])], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = finite_range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let heights: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, values)| {
            let mut counts = vec![0.0; bins];
            for v in values.iter().filter(|v| v.is_finite()) {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1.0;
            }
            let norm = values.len().max(1) as f64 * width;
            counts.iter().map(|c| c / norm).collect()
        })
        .collect();
    let top = heights.iter().flatten().copied().fold(0.0, f64::max);
    let mut f = Frame::new(title, (lo, hi), (0.0, top * 1.05), x_label, "density");
    for (i, h) in heights.iter().enumerate() {
        let mut d = format!("M{:.1},{:.1}", f.px(lo), f.py(0.0));
        for (b, v) in h.iter().enumerate() {
            let (a, z) = (f.px(lo + width * b as f64), f.px(lo + width * (b + 1) as f64));
            let y = f.py(*v);
            let _ = write!(d, " L{a:.1},{y:.1} L{z:.1},{y:.1}");
        }
        let _ = write!(d, " L{:.1},{:.1}", f.px(hi), f.py(0.0));
        let _ = writeln!(
            f.out,
            r#"<path d="{d}" fill="{c}" fill-opacity="0.25" stroke="{c}"/>"#,
            c = color(i)
        );
    }
    f.legend(&series.iter().map(|s| s.0).collect::<Vec<_>>());
    f.finish()
}

/// One named curve with optional symmetric error bars.
pub struct Curve<'a> {
    pub name: &'a str,
    pub y: Vec<f64>,
    pub err: Option<Vec<f64>>,
}

/// Curves over shared x values, drawn with markers and error bars.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, x: &[f64], curves: &[Curve]) -> String {
    let xr = finite_range(x.iter().copied());
    let yr = finite_range(curves.iter().flat_map(|c| {
        c.y.iter().enumerate().flat_map(move |(i, y)| {
            let e = c.err.as_ref().map_or(0.0, |e| e[i]);
            [y - e, y + e]
        })
    }));
    let span = (yr.1 - yr.0).max(1e-9);
    let mut f = Frame::new(title, xr, (yr.0 - 0.05 * span, yr.1 + 0.05 * span), x_label, y_label);
    for (i, c) in curves.iter().enumerate() {
        let points: Vec<String> = x
            .iter()
            .zip(&c.y)
            .map(|(a, b)| format!("{:.1},{:.1}", f.px(*a), f.py(*b)))
            .collect();
        let _ = writeln!(
            f.out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.join(" "),
            color(i)
        );
        for (k, (a, b)) in x.iter().zip(&c.y).enumerate() {
            let (px, py) = (f.px(*a), f.py(*b));
            if let Some(e) = &c.err {
                let _ = writeln!(
                    f.out,
                    r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="{}"/>"#,
                    f.py(b - e[k]),
                    f.py(b + e[k]),
                    color(i)
                );
            }
            let _ = writeln!(
                f.out,
                r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{}"/>"#,
                color(i)
            );
        }
    }
    f.legend(&curves.iter().map(|c| c.name).collect::<Vec<_>>());
    f.finish()
}

/// Vertical bars, one per label, with optional error bars.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64], err: Option<&[f64]>) -> String {
    let n = labels.len().max(1);
    let (lo, hi) = finite_range(values.iter().enumerate().flat_map(|(i, v)| {
        let e = err.map_or(0.0, |e| e[i]);
        [v - e, v + e, 0.0]
    }));
    let span = (hi - lo).max(1e-9);
    let mut f = Frame::new(title, (0.0, n as f64), (lo.min(0.0), hi + 0.05 * span), "", y_label);
    // The numeric x ticks are meaningless for categories; cover them.
    let _ = writeln!(
        f.out,
        r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="24" fill="white"/>"#,
        MARGIN_L - 30.0,
        HEIGHT - MARGIN_B + 1.0,
        WIDTH - MARGIN_L - MARGIN_R + 60.0
    );
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let (a, z) = (f.px(i as f64 + 0.15), f.px(i as f64 + 0.85));
        let (top, base) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
        let _ = writeln!(
            f.out,
            r#"<rect x="{a:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            z - a,
            (base - top).max(0.5),
            color(i)
        );
        let mid = (a + z) / 2.0;
        if let Some(e) = err {
            let _ = writeln!(
                f.out,
                r#"<line x1="{mid:.1}" y1="{:.1}" x2="{mid:.1}" y2="{:.1}" stroke="black"/>"#,
                f.py(v - e[i]),
                f.py(v + e[i])
            );
        }
        let _ = writeln!(
            f.out,
            r#"<text x="{mid:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN_B + 16.0,
            escape(label)
        );
    }
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_deterministic_and_well_formed() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let h1 = histogram("h", "x", &[("a", &a), ("b", &a[..50])], 20);
        let h2 = histogram("h", "x", &[("a", &a), ("b", &a[..50])], 20);
        assert_eq!(h1, h2);
        assert!(h1.starts_with("<svg") && h1.ends_with("</svg>\n"));
        let l = line_plot(
            "sweep",
            "λ",
            "mean",
            &[-1.0, 0.0, 1.0],
            &[Curve {
                name: "x0",
                y: vec![-1.0, 0.0, 1.0],
                err: Some(vec![0.1; 3]),
            }],
        );
        assert_eq!(l.matches("<circle").count(), 3);
        let b = bar_chart("bars", "v", &["a<b".into(), "c".into()], &[1.0, -0.5], None);
        assert!(b.contains("a&lt;b"));
    }

    #[test]
    fn degenerate_ranges_do_not_produce_nan() {
        let h = histogram("flat", "x", &[("a", &[2.0, 2.0, 2.0])], 10);
        assert!(!h.contains("NaN") && !h.contains("inf"));
        let l = line_plot(
            "flat",
            "x",
            "y",
            &[1.0],
            &[Curve {
                name: "c",
                y: vec![0.0],
                err: None,
            }],
        );
        assert!(!l.contains("NaN"));
    }
}
