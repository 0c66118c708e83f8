//! Minimal SVG plots: polylines and shaded bands.

use std::fmt::Write;

use nuvmpc::scenarios::ScenarioRun;

const PANEL_W: f64 = 720.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Maps data coordinates into one panel.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, top: f64, width: f64, height: f64) -> Self {
        let (x0, x1) = range(xs);
        let (y0, y1) = range(ys);
        Frame { x0, x1, y0, y1, top, width, height }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y0) / (self.y1 - self.y0) * self.height
    }

    fn point(&self, x: f64, y: f64) -> String {
        format!("{:.2},{:.2}", self.px(x), self.py(y))
    }
}

/// Finite range with a small margin; degenerate ranges are widened.
fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9 * (1.0 + lo.abs()));
    (lo - pad, hi + pad)
}

/// Splits a sampled curve at non-finite samples.
fn runs(pts: &[(f64, f64)]) -> Vec<Vec<(f64, f64)>> {
    let mut out = vec![Vec::new()];
    for &(x, y) in pts {
        if x.is_finite() && y.is_finite() {
            out.last_mut().expect("nonempty").push((x, y));
        } else if !out.last().expect("nonempty").is_empty() {
            out.push(Vec::new());
        }
    }
    out.retain(|r| !r.is_empty());
    out
}

fn polyline(svg: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str) {
    for r in runs(pts) {
        let p: Vec<String> = r.iter().map(|&(x, y)| f.point(x, y)).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, p.join(" "));
    }
}

fn axes(svg: &mut String, f: &Frame, title: &str) {
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#888"/>"##,
        f.top, f.width, f.height
    );
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.2}" font-size="12">{title}</text>"#, f.top - 6.0);
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.2}" font-size="10">{:.3}</text><text x="4" y="{:.2}" font-size="10">{:.3}</text>"#,
        f.top + 10.0,
        f.y1,
        f.top + f.height,
        f.y0
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Time-series panel of several channels with optional bands.
fn series_panel(svg: &mut String, top: f64, title: &str, channels: &[Vec<f64>], bands: &[(Vec<f64>, Vec<f64>)]) {
    let k = channels.iter().map(Vec::len).max().unwrap_or(0);
    let ys = channels.iter().flatten().chain(bands.iter().flat_map(|(l, u)| l.iter().chain(u))).copied();
    let f = Frame::new((0..k.max(2)).map(|i| i as f64), ys.collect::<Vec<_>>().into_iter(), top, PANEL_W, PANEL_H);
    axes(svg, &f, title);
    for (lower, upper) in bands {
        let pts: Vec<(f64, f64)> = lower.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        polyline(svg, &f, &pts, "#999");
        let pts: Vec<(f64, f64)> = upper.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        polyline(svg, &f, &pts, "#999");
    }
    for (c, ch) in channels.iter().enumerate() {
        let pts: Vec<(f64, f64)> = ch.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
        polyline(svg, &f, &pts, COLORS[c % COLORS.len()]);
    }
}

/// Outputs with their bands, then inputs, then the planar path if any.
pub fn render(run: &ScenarioRun) -> String {
    let mut body = String::new();
    let mut top = MARGIN;
    let ny = run.y.first().map_or(0, |v| v.len());
    let nu = run.u.first().map_or(0, |v| v.len());
    let column = |v: &[nalgebra::DVector<f64>], i: usize| v.iter().map(|x| x[i]).collect::<Vec<f64>>();

    let ys: Vec<Vec<f64>> = (0..ny).map(|i| column(&run.y, i)).collect();
    let bands: Vec<(Vec<f64>, Vec<f64>)> = run.bands.iter().map(|b| (b.lower.clone(), b.upper.clone())).collect();
    let ylabel = escape(&format!("{}: outputs {}", run.name, run.y_labels.join(", ")));
    series_panel(&mut body, top, &ylabel, &ys, &bands);
    top += PANEL_H + 2.0 * MARGIN;

    let us: Vec<Vec<f64>> = (0..nu).map(|i| column(&run.u, i)).collect();
    series_panel(&mut body, top, &escape(&format!("inputs {}", run.u_labels.join(", "))), &us, &[]);
    top += PANEL_H + 2.0 * MARGIN;

    if let Some(path) = &run.path {
        let all = path.iter().chain(run.shapes.iter().flatten());
        let (x0, x1) = range(all.clone().map(|p| p.0));
        let (y0, y1) = range(all.map(|p| p.1));
        // equal aspect: one scale for both axes
        let scale = (PANEL_W / (x1 - x0)).min(2.0 * PANEL_H / (y1 - y0));
        let f = Frame { x0, x1, y0, y1, top, width: (x1 - x0) * scale, height: (y1 - y0) * scale };
        axes(&mut body, &f, "path");
        for s in &run.shapes {
            let p: Vec<String> = s.iter().map(|&(x, y)| f.point(x, y)).collect();
            let _ = writeln!(body, r##"<polygon fill="#ccc" fill-opacity="0.35" stroke="#666" points="{}"/>"##, p.join(" "));
        }
        polyline(&mut body, &f, path, COLORS[0]);
        top += f.height + 2.0 * MARGIN;
    }

    let width = PANEL_W + 2.0 * MARGIN;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{top:.0}\" viewBox=\"0 0 {width} {top:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_break_at_missing_samples() {
        let pts = [(0.0, 1.0), (1.0, f64::NAN), (2.0, 2.0), (3.0, 3.0), (4.0, f64::INFINITY)];
        let r = runs(&pts);
        assert_eq!(r.len(), 2);
        assert_eq!(r[1], vec![(2.0, 2.0), (3.0, 3.0)]);
    }

    #[test]
    fn empty_range_falls_back_to_unit() {
        assert_eq!(range([f64::NAN].into_iter()), (0.0, 1.0));
        let (lo, hi) = range([2.0, 2.0].into_iter());
        assert!(lo < 2.0 && hi > 2.0);
    }
}
