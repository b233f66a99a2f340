//! Minimal static SVG charts: scatter with fit line, histograms, loss curves.

use std::fmt::Write as _;

use super::Histogram;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const MAX_POINTS: usize = 5000;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Frame {
        let pad = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = pad(x);
        let (y0, y1) = pad(y);
        Frame { x0, x1, y0, y1 }
    }
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(s: &mut String, title: &str, f: &Frame, xlabel: &str, ylabel: &str) {
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#).unwrap();
    for k in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, f.px(fx), b + 16.0, tick(fx)).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, f.py(fy) + 4.0, tick(fy)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(xlabel)).unwrap();
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, H / 2.0, H / 2.0, escape(ylabel)).unwrap();
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (k, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - MARGIN - 110.0, y - 9.0, COLORS[k % COLORS.len()]).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, W - MARGIN - 95.0, escape(n)).unwrap();
    }
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

/// Predicted against reference heights, with the 1:1 line and an optional fit line.
pub fn scatter(title: &str, reference: &[f64], pred: &[f64], fit: Option<(f64, f64)>) -> String {
    let step = reference.len().div_ceil(MAX_POINTS).max(1);
    let (lo, hi) = range(reference.iter().chain(pred).copied());
    let f = Frame::new((lo, hi), (lo, hi));
    let mut s = String::new();
    header(&mut s, title, &f, "reference height (m)", "predicted height (m)");
    for (r, p) in reference.iter().zip(pred).step_by(step) {
        writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="{}" fill-opacity="0.4"/>"#, f.px(*r), f.py(*p), COLORS[0]).unwrap();
    }
    writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 3"/>"#, f.px(f.x0), f.py(f.x0), f.px(f.x1), f.py(f.x1)).unwrap();
    if let Some((slope, icpt)) = fit {
        let (a, b) = (f.x0, f.x1);
        let (ya, yb) = (slope * a + icpt, slope * b + icpt);
        writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/>"#, f.px(a), f.py(ya), f.px(b), f.py(yb), COLORS[1]).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">y = {slope:.3} x + {icpt:.2}</text>"#, MARGIN + 10.0, MARGIN + 10.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Step outlines, one per series.
pub fn histogram(title: &str, h: &Histogram, names: &[&str]) -> String {
    let xr = (h.edges[0], *h.edges.last().unwrap());
    let ymax = h.counts.iter().flatten().copied().max().unwrap_or(1) as f64;
    let f = Frame::new(xr, (0.0, ymax));
    let mut s = String::new();
    header(&mut s, title, &f, "height (m)", "pixels");
    for (k, counts) in h.counts.iter().enumerate() {
        let mut d = format!("M{:.1} {:.1}", f.px(h.edges[0]), f.py(0.0));
        for (i, &c) in counts.iter().enumerate() {
            write!(d, " L{:.1} {:.1} L{:.1} {:.1}", f.px(h.edges[i]), f.py(c as f64), f.px(h.edges[i + 1]), f.py(c as f64)).unwrap();
        }
        write!(d, " L{:.1} {:.1}", f.px(xr.1), f.py(0.0)).unwrap();
        writeln!(s, r#"<path d="{d}" stroke="{}" fill="none" stroke-width="1.5"/>"#, COLORS[k % COLORS.len()]).unwrap();
    }
    legend(&mut s, names);
    s.push_str("</svg>\n");
    s
}

/// Named `(epoch, loss)` series, with an optional marker at the best epoch.
pub fn loss_curves(title: &str, series: &[(&str, Vec<(f64, f64)>)], best: Option<(f64, f64)>) -> String {
    let xr = range(series.iter().flat_map(|(_, v)| v.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|(_, v)| v.iter().map(|p| p.1)));
    let f = Frame::new(xr, (0.0f64.min(yr.0), yr.1));
    let mut s = String::new();
    header(&mut s, title, &f, "epoch", "MSE (m²)");
    for (k, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| format!("{}{:.1} {:.1}", if i == 0 { "M" } else { "L" }, f.px(*x), f.py(*y)))
            .collect();
        writeln!(s, r#"<path d="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#, d.join(" "), COLORS[k % COLORS.len()]).unwrap();
    }
    if let Some((x, y)) = best {
        writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="none" stroke="black" stroke-width="1.5"/>"#, f.px(x), f.py(y)).unwrap();
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}
