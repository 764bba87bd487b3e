//! Static SVG renderings of routes and logit traces.

use std::fmt::Write;

use asap_core::baselines::Solution;
use asap_core::instance::Instance;

use crate::trace::LogitTrace;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Route map: depot as a square, customers as circles sized by demand and
/// labelled with their end-time, one coloured polyline per tour.
pub fn route_svg(inst: &Instance, solution: &Solution) -> String {
    let size = 640.0;
    let margin = 50.0;
    let span = size - 2.0 * margin;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for [x, y] in &inst.coords {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    let scale = span / (x1 - x0).max(y1 - y0).max(1e-9);
    let px = |i: usize| {
        let [x, y] = inst.coords[i];
        (margin + (x - x0) * scale, size - margin - (y - y0) * scale)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-family="sans-serif" font-size="18">{} | total distance {:.3} | {} tours</text>"#,
        size / 2.0,
        escape(&solution.producer),
        solution.total_distance,
        solution.tours.len()
    );
    for (t, tour) in solution.tours.iter().enumerate() {
        let points: Vec<String> = tour
            .iter()
            .map(|&n| {
                let (x, y) = px(n);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="tour" data-tour="{t}" points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            points.join(" "),
            PALETTE[t % PALETTE.len()]
        );
    }
    for i in 1..inst.num_nodes() {
        let (x, y) = px(i);
        let r = 3.0 + 12.0 * inst.demand[i];
        let _ = writeln!(
            s,
            r##"<circle class="customer" cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="#cccccc" stroke="black"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{:.0}</text>"#,
            x + r + 2.0,
            y - 2.0,
            inst.end_times[i]
        );
    }
    let (dx, dy) = px(0);
    let _ = writeln!(
        s,
        r#"<rect class="depot" x="{:.2}" y="{:.2}" width="14" height="14" fill="black"/>"#,
        dx - 7.0,
        dy - 7.0
    );
    s.push_str("</svg>\n");
    s
}

/// Linear blue-to-yellow ramp for `t` in `[0, 1]`.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(48.0, 253.0), lerp(18.0, 231.0), lerp(120.0, 37.0))
}

/// Step by node grid of logits; masked cells are hatched grey and the chosen
/// node of each step is outlined.
pub fn heatmap_svg(trace: &LogitTrace) -> String {
    let cell = 28.0;
    let left = 60.0;
    let top = 60.0;
    let n = trace.num_nodes;
    let width = left + cell * n as f64 + 20.0;
    let height = top + cell * trace.rows.len() as f64 + 20.0;
    let finite = trace.rows.iter().flat_map(|r| r.logits.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(1e-12);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="22" font-family="sans-serif" font-size="14">pointer logits per step (rows) and node (columns)</text>"#
    );
    for j in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="10">{j}</text>"#,
            left + cell * (j as f64 + 0.5),
            top - 6.0
        );
    }
    for (i, row) in trace.rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
            left - 6.0,
            y + cell * 0.65,
            row.step
        );
        for (j, &v) in row.logits.iter().enumerate() {
            let x = left + cell * j as f64;
            let (class, fill) = if v.is_finite() {
                ("cell", ramp((v - lo) / range))
            } else {
                ("cell masked", "#e0e0e0".to_string())
            };
            let _ = writeln!(
                s,
                r#"<rect class="{class}" x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{fill}"><title>step {} node {j}: {v:.4}</title></rect>"#,
                row.step
            );
        }
        let _ = writeln!(
            s,
            r#"<rect class="chosen" x="{:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="none" stroke="red" stroke-width="2"/>"#,
            left + cell * row.chosen as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceRow;
    use asap_core::instance::{generate_instance, GenerationConfig};

    #[test]
    fn empty_solution_draws_nodes_and_zero_distance() {
        let inst = generate_instance(4, 1, &GenerationConfig::default()).unwrap();
        let svg = route_svg(&inst, &Solution::empty("greedy"));
        assert!(svg.contains("total distance 0.000"));
        assert_eq!(svg.matches(r#"class="customer""#).count(), 4);
        assert_eq!(svg.matches(r#"class="depot""#).count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn one_polyline_per_tour() {
        let inst = generate_instance(5, 2, &GenerationConfig::default()).unwrap();
        let sol = Solution::from_tours("t", vec![vec![0, 1, 2, 0], vec![0, 3, 0]], &inst, 10.0).unwrap();
        assert_eq!(route_svg(&inst, &sol).matches("<polyline").count(), 2);
    }

    #[test]
    fn heatmap_marks_masked_and_chosen_cells() {
        let trace = LogitTrace {
            num_nodes: 3,
            rows: vec![TraceRow {
                step: 1,
                chosen: 1,
                logits: vec![f64::NEG_INFINITY, 2.0, 1.0],
            }],
        };
        let svg = heatmap_svg(&trace);
        assert_eq!(svg.matches(r#"class="cell"#).count(), 3);
        assert_eq!(svg.matches("cell masked").count(), 1);
        assert_eq!(svg.matches(r#"class="chosen""#).count(), 1);
    }
}
