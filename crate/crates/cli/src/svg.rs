//! Minimal standalone SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 70.0;
const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

pub struct Bar {
    pub label: String,
    pub value: f64,
    /// Half-width of the error bar, if any.
    pub spread: Option<f64>,
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn header(title: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        WIDTH / 2.0,
        escape(title),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

/// Value range padded so that bars and lines do not touch the frame.
fn y_range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    let pad = if hi > lo {
        0.08 * (hi - lo)
    } else {
        0.5 * hi.abs().max(1e-3)
    };
    (
        if include_zero && lo == 0.0 {
            0.0
        } else {
            lo - pad
        },
        hi + pad,
    )
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn plot_h() -> f64 {
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    }

    fn plot_w() -> f64 {
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    }

    fn y(&self, v: f64) -> f64 {
        MARGIN_TOP + Self::plot_h() * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn axes(&self, s: &mut String) {
        let (x0, y0, y1) = (MARGIN_LEFT, MARGIN_TOP, MARGIN_TOP + Self::plot_h());
        let x1 = MARGIN_LEFT + Self::plot_w();
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * f64::from(i) / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            );
        }
    }
}

/// Vertical bars with optional ± error whiskers.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut s = header(title, y_label);
    let frame = {
        let (lo, hi) = y_range(
            bars.iter().flat_map(|b| {
                [
                    b.value - b.spread.unwrap_or(0.0),
                    b.value + b.spread.unwrap_or(0.0),
                ]
            }),
            true,
        );
        Frame { lo, hi }
    };
    frame.axes(&mut s);
    let slot = Frame::plot_w() / bars.len().max(1) as f64;
    let base = frame.y(0.0f64.clamp(frame.lo, frame.hi));
    for (i, b) in bars.iter().enumerate() {
        let x = MARGIN_LEFT + slot * (i as f64 + 0.2);
        let w = slot * 0.6;
        let top = frame.y(b.value);
        let (y, h) = if top < base {
            (top, base - top)
        } else {
            (base, top - base)
        };
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}"><title>{}: {}</title></rect>"#,
            escape(&b.label),
            b.value
        );
        if let Some(d) = b.spread.filter(|d| d.is_finite() && *d > 0.0) {
            let cx = x + w / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                frame.y(b.value - d),
                frame.y(b.value + d)
            );
        }
        let lx = x + w / 2.0;
        let ly = MARGIN_TOP + Frame::plot_h() + 16.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="end" transform="rotate(-25 {lx:.2} {ly:.2})">{}</text>"#,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series over a shared numeric x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = header(title, y_label);
    let frame = {
        let (lo, hi) = y_range(
            series.iter().flat_map(|se| se.points.iter().map(|p| p.1)),
            false,
        );
        Frame { lo, hi }
    };
    frame.axes(&mut s);
    let xs = series.iter().flat_map(|se| se.points.iter().map(|p| p.0));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (x_lo, x_hi) = if x_lo.is_finite() && x_hi > x_lo {
        (x_lo, x_hi)
    } else {
        (0.0, 1.0)
    };
    let px = |x: f64| MARGIN_LEFT + Frame::plot_w() * (x - x_lo) / (x_hi - x_lo);
    let y_axis = MARGIN_TOP + Frame::plot_h();
    for i in 0..=4 {
        let v = x_lo + (x_hi - x_lo) * f64::from(i) / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
            px(v),
            y_axis + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + Frame::plot_w() / 2.0,
        y_axis + 40.0,
        escape(x_label)
    );
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = se
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), frame.y(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&se.label)
        );
        let ly = MARGIN_TOP + 16.0 * (i as f64 + 1.0);
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&se.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
