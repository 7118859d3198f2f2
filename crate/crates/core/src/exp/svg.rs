//! Hand-written SVG line charts with shaded interval bands.

use std::fmt::Write as _;

use super::aggregate::{Aggregate, SeriesPoint};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const LEGEND_H: f64 = 28.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: &'a [SeriesPoint],
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for p in series.iter().flat_map(|s| s.points) {
        x = (x.0.min(p.timestep as f64), x.1.max(p.timestep as f64));
        y = (y.0.min(p.low), y.1.max(p.high));
    }
    if !x.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x.1 <= x.0 {
        x.1 = x.0 + 1.0;
    }
    if y.1 - y.0 < 1e-12 {
        y = (y.0 - 0.5, y.1 + 0.5);
    }
    (x.0, x.1, y.0, y.1)
}

fn panel(doc: &mut String, ox: f64, oy: f64, title: &str, series: &[Series]) {
    let (x0, x1, y0, y1) = bounds(series);
    let (w, h) = (PANEL_W - MARGIN - 12.0, PANEL_H - MARGIN - 24.0);
    let (left, top) = (ox + MARGIN, oy + 24.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| top + h - (y - y0) / (y1 - y0) * h;
    let _ = writeln!(
        doc,
        r##"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{title}</text>"##,
        left + w / 2.0,
        oy + 16.0
    );
    let _ = writeln!(
        doc,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            doc,
            r##"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
            left - 4.0,
            y + 3.0,
            fmt_tick(v)
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            doc,
            r##"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"##,
            top + h + 14.0,
            fmt_tick(v)
        );
    }
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let banded = s.points.iter().any(|p| p.high > p.low);
        if banded {
            let mut poly = String::new();
            for p in s.points {
                let _ = write!(poly, "{:.2},{:.2} ", sx(p.timestep as f64), sy(p.high));
            }
            for p in s.points.iter().rev() {
                let _ = write!(poly, "{:.2},{:.2} ", sx(p.timestep as f64), sy(p.low));
            }
            let _ = writeln!(
                doc,
                r##"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"##,
                poly.trim_end(),
                s.color
            );
        }
        let mut path = String::new();
        for (i, p) in s.points.iter().enumerate() {
            let _ = write!(
                path,
                "{}{:.2},{:.2} ",
                if i == 0 { "M" } else { "L" },
                sx(p.timestep as f64),
                sy(p.point)
            );
        }
        let _ = writeln!(
            doc,
            r##"<path d="{}" fill="none" stroke="{}" stroke-width="1.6"><title>{}</title></path>"##,
            path.trim_end(),
            s.color,
            escape(s.label)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(doc: &mut String, y: f64, labels: &[(&str, &str)]) {
    let mut x = MARGIN;
    for (label, color) in labels {
        let _ = writeln!(
            doc,
            r##"<rect x="{x:.1}" y="{:.1}" width="14" height="4" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            y - 4.0,
            x + 18.0,
            y,
            escape(label)
        );
        x += 24.0 + 7.0 * label.len() as f64;
    }
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

fn colors(agg: &Aggregate) -> Vec<(&str, &str)> {
    agg.treatments
        .iter()
        .enumerate()
        .map(|(i, t)| (t.label.as_str(), PALETTE[i % PALETTE.len()]))
        .collect()
}

pub fn learning_curve(agg: &Aggregate) -> String {
    let cols = colors(agg);
    let series: Vec<Series> = agg
        .treatments
        .iter()
        .zip(&cols)
        .map(|(t, &(label, color))| Series { label, color, points: &t.eval })
        .collect();
    let mut body = String::new();
    panel(&mut body, 0.0, 0.0, "Normalized IQM", &series);
    legend(&mut body, PANEL_H + LEGEND_H / 2.0, &cols);
    document(PANEL_W.max(MARGIN + 120.0 * cols.len() as f64), PANEL_H + LEGEND_H, &body)
}

/// Fisher trace, effective rank, actor and critic dormant percentages.
pub fn plasticity_panels(agg: &Aggregate) -> String {
    let cols = colors(agg);
    let panels = [
        ("fisher_trace", "Fisher Trace"),
        ("effective_rank", "Effective Rank"),
        ("dormant_actor_pct", "Actor Dormant %"),
        ("dormant_critic_pct", "Critic Dormant %"),
    ];
    let mut body = String::new();
    for (i, (key, title)) in panels.iter().enumerate() {
        let series: Vec<Series> = agg
            .treatments
            .iter()
            .zip(&cols)
            .map(|(t, &(label, color))| Series {
                label,
                color,
                points: t.metrics.get(*key).map(Vec::as_slice).unwrap_or(&[]),
            })
            .collect();
        panel(&mut body, i as f64 * PANEL_W, 0.0, title, &series);
    }
    legend(&mut body, PANEL_H + LEGEND_H / 2.0, &cols);
    document(4.0 * PANEL_W, PANEL_H + LEGEND_H, &body)
}
