//! Minimal SVG line charts and heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 150.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// x positions drawn as ticks on the curve (e.g. injection steps).
    pub markers: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, Default)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    /// `values[row][col]`, row 0 drawn at the bottom.
    pub values: Vec<Vec<f64>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let (l, r, t, b) = MARGIN;
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (l + W - r) / 2.0, esc(title));
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + W - r) / 2.0, H - 12.0, esc(x_label));
    let _ = write!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        esc(y_label),
        y = (t + H - b) / 2.0
    );
}

fn fmt_tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let (l, r, t, b) = MARGIN;
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
        for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y1) = (0.0, 1.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| l + (x - x0) / (x1 - x0) * (W - l - r);
        let sy = |y: f64| H - b - (y - y0) / (y1 - y0) * (H - t - b);

        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label);
        let _ = write!(out, r#"<g stroke="black" fill="none"><line x1="{l}" y1="{}" x2="{}" y2="{}"/>"#, H - b, W - r, H - b);
        let _ = write!(out, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}"/></g>"#, H - b);
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), H - b + 16.0, fmt_tick(fx));
            let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 6.0, sy(fy) + 4.0, fmt_tick(fy));
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> =
                s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = write!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            for &(x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
                let _ = write!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2" fill="{color}"/>"#, sx(x), sy(y));
            }
            for &m in &s.markers {
                let _ = write!(
                    out,
                    r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="{color}" stroke-opacity="0.5"/>"#,
                    H - b,
                    H - b - 6.0,
                    x = sx(m)
                );
            }
            let ly = t + 16.0 * i as f64;
            let _ = write!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - r + 10.0, ly);
            let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, W - r + 24.0, ly + 9.0, esc(&s.name));
        }
        out.push_str("</svg>\n");
        out
    }

    /// Long-format table backing the chart: `series,x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,x,y\n");
        for s in &self.series {
            for &(x, y) in &s.points {
                let _ = writeln!(out, "{},{x},{y}", s.name);
            }
        }
        out
    }
}

impl Heatmap {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn to_svg(&self) -> String {
        let (l, r, t, b) = MARGIN;
        let (nr, nc) = (self.rows().max(1), self.cols().max(1));
        let (cw, ch) = ((W - l - r) / nc as f64, (H - t - b) / nr as f64);
        let vals = self.values.iter().flatten().copied().filter(|v| v.is_finite());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };

        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let z = if v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
                // white to dark blue
                let c = |a: f64, b: f64| (a + (b - a) * z).round() as u8;
                let _ = write!(
                    out,
                    r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#{:02x}{:02x}{:02x}"><title>{v}</title></rect>"##,
                    l + j as f64 * cw,
                    H - b - (i + 1) as f64 * ch,
                    cw,
                    ch,
                    c(255.0, 8.0),
                    c(255.0, 48.0),
                    c(255.0, 107.0)
                );
            }
        }
        for (j, s) in self.x_ticks.iter().enumerate() {
            let _ = write!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, l + (j as f64 + 0.5) * cw, H - b + 16.0, esc(s));
        }
        for (i, s) in self.y_ticks.iter().enumerate() {
            let _ = write!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, H - b - (i as f64 + 0.5) * ch + 4.0, esc(s));
        }
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, W - r + 10.0, t + 10.0, fmt_tick(hi));
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, W - r + 10.0, H - b, fmt_tick(lo));
        out.push_str("</svg>\n");
        out
    }

    /// `row,col,value` with the tick labels.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{},value\n", self.y_label.replace(',', ";"), self.x_label.replace(',', ";"));
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let y = self.y_ticks.get(i).cloned().unwrap_or_else(|| i.to_string());
                let x = self.x_ticks.get(j).cloned().unwrap_or_else(|| j.to_string());
                let _ = writeln!(out, "{y},{x},{v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_renders_every_point() {
        let c = LineChart {
            title: "a < b".into(),
            series: vec![Series { name: "s".into(), points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)], markers: vec![1.0] }],
            ..Default::default()
        };
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a &lt; b"));
        assert_eq!(c.to_csv().lines().count(), 4);
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let h = Heatmap { values: vec![vec![0.0, 0.5, 1.0], vec![0.2, 0.2, 0.2]], ..Default::default() };
        assert_eq!((h.rows(), h.cols()), (2, 3));
        assert_eq!(h.to_svg().matches("<rect x=").count(), 6);
        assert_eq!(h.to_csv().lines().count(), 7);
    }

    #[test]
    fn empty_chart_is_valid() {
        let svg = LineChart::default().to_svg();
        assert!(svg.contains("</svg>"));
        assert!(!svg.contains("NaN"));
    }
}
