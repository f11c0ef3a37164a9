//! Minimal static SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers instead of a polyline.
    pub markers: bool,
    pub dashed: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, color: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            color: color.into(),
            points,
            markers: false,
            dashed: false,
        }
    }

    pub fn markers(mut self) -> Self {
        self.markers = true;
        self
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

struct Axis {
    scale: Scale,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, scale: Scale) -> Option<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = match scale {
                Scale::Log => v.log10(),
                Scale::Linear => v,
            };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return None;
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        if scale == Scale::Log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        Some(Self { scale, lo, hi })
    }

    fn frac(&self, v: f64) -> f64 {
        let v = match self.scale {
            Scale::Log => v.log10(),
            Scale::Linear => v,
        };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        match self.scale {
            Scale::Log => {
                let span = (self.hi - self.lo) as i64;
                let step = ((span as f64) / 8.0).ceil().max(1.0) as i64;
                (self.lo as i64..=self.hi as i64)
                    .step_by(step as usize)
                    .map(|e| (10f64.powi(e as i32), format!("1e{e}")))
                    .collect()
            }
            Scale::Linear => (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format!("{v:.3}"))
                })
                .collect(),
        }
    }
}

fn usable(p: &(f64, f64), xs: Scale, ys: Scale) -> bool {
    let ok = |v: f64, s: Scale| v.is_finite() && (s == Scale::Linear || v > 0.0);
    ok(p.0, xs) && ok(p.1, ys)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the series on shared axes. Points that cannot be drawn on the
/// chosen scale (non-finite, or nonpositive on a log axis) are dropped.
pub fn chart(title: &str, x_label: &str, y_label: &str, xs: Scale, ys: Scale, series: &[Series]) -> String {
    let kept: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().copied().filter(|p| usable(p, xs, ys)).collect())
        .collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    let x_axis = Axis::fit(kept.iter().flatten().map(|p| p.0), xs);
    let y_axis = Axis::fit(kept.iter().flatten().map(|p| p.1), ys);
    let (Some(x_axis), Some(y_axis)) = (x_axis, y_axis) else {
        let _ = writeln!(svg, r#"<text x="{}" y="{}">no drawable data</text>"#, LEFT, HEIGHT / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + pw * x_axis.frac(x);
    let py = |y: f64| TOP + ph * (1.0 - y_axis.frac(y));
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for (v, label) in x_axis.ticks() {
        let x = px(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            TOP + ph,
            TOP + ph + 16.0
        );
    }
    for (v, label) in y_axis.ticks() {
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    let mut legend_y = TOP + 10.0;
    let mut seen = Vec::new();
    for (s, pts) in series.iter().zip(&kept) {
        if s.markers {
            for p in pts {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
                    px(p.0),
                    py(p.1),
                    s.color
                );
            }
        } else if pts.len() > 1 {
            let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2" stroke-opacity="0.8"{dash} points="{}"/>"#,
                s.color,
                coords.join(" ")
            );
        }
        if !s.label.is_empty() && !seen.contains(&s.label) {
            seen.push(s.label.clone());
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{lx:.2}" y="{:.2}" width="12" height="3" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                legend_y - 4.0,
                s.color,
                lx + 18.0,
                legend_y,
                escape(&s.label)
            );
            legend_y += 18.0;
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Line of slope `-nu` in log-log coordinates through `(t0, y0)`, spanning
/// `[t0, t1]`.
pub fn reference_line(nu: f64, t0: f64, y0: f64, t1: f64) -> Vec<(f64, f64)> {
    vec![(t0, y0), (t1, y0 * (t1 / t0).powf(-nu))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_log_log_chart() {
        let pts: Vec<(f64, f64)> = (1..100).map(|t| (t as f64, 1.0 / t as f64)).collect();
        let s = [
            Series::line("J", PALETTE[0], pts),
            Series::line("slope -1", PALETTE[3], reference_line(1.0, 1.0, 1.0, 100.0)).dashed(),
        ];
        let svg = chart("test", "t", "J", Scale::Log, Scale::Log, &s);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("1e-2"));
        assert_eq!(svg, chart("test", "t", "J", Scale::Log, Scale::Log, &s));
    }

    #[test]
    fn empty_chart_is_valid() {
        let svg = chart("empty", "x", "y", Scale::Log, Scale::Log, &[Series::line("z", "red", vec![(0.0, 0.0)])]);
        assert!(svg.contains("no drawable data"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
