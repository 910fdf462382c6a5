//! Minimal self-contained SVG plots of one episode.

use std::fmt::Write;

use livenet_core::sim::{ScenarioSpec, TrajectoryLog};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn color(i: usize) -> &'static str {
    COLORS[i % COLORS.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Affine map from data to pixel coordinates.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    /// `equal` widens one range so both axes share a scale.
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Self {
        let lo_hi = |it: &mut dyn Iterator<Item = f64>| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in it.filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = lo_hi(&mut xs.clone());
        let (y0, y1) = lo_hi(&mut ys.clone());
        let mut f = Self { x0, x1, y0, y1 };
        if equal {
            let sx = (W - 2.0 * PAD) / (x1 - x0);
            let sy = (H - 2.0 * PAD) / (y1 - y0);
            if sx < sy {
                let c = 0.5 * (y0 + y1);
                let half = 0.5 * (H - 2.0 * PAD) / sx;
                f.y0 = c - half;
                f.y1 = c + half;
            } else {
                let c = 0.5 * (x0 + x1);
                let half = 0.5 * (W - 2.0 * PAD) / sy;
                f.x0 = c - half;
                f.x1 = c + half;
            }
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn len(&self, d: f64) -> f64 {
        d / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            body,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        )
        .unwrap();
        Self { body }
    }

    fn axes(&mut self, f: &Frame, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (PAD, W - PAD, PAD, H - PAD);
        writeln!(
            self.body,
            r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            r - l,
            b - t
        )
        .unwrap();
        for (v, x) in [(f.x0, l), (f.x1, r)] {
            writeln!(
                self.body,
                r#"<text x="{x}" y="{}" text-anchor="middle">{v:.2}</text>"#,
                b + 16.0
            )
            .unwrap();
        }
        for (v, y) in [(f.y0, b), (f.y1, t)] {
            writeln!(
                self.body,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
                l - 4.0,
                y + 4.0
            )
            .unwrap();
        }
        writeln!(
            self.body,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 8.0,
            escape(xlabel)
        )
        .unwrap();
        writeln!(
            self.body,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        )
        .unwrap();
    }

    fn polyline(&mut self, f: &Frame, pts: &[(f64, f64)], color: &str, label: &str) {
        let mut d = String::new();
        for (x, y) in pts {
            write!(d, "{:.2},{:.2} ", f.px(*x), f.py(*y)).unwrap();
        }
        writeln!(
            self.body,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(label),
            d.trim_end()
        )
        .unwrap();
    }

    fn legend(&mut self, labels: &[String]) {
        for (i, l) in labels.iter().enumerate() {
            let y = PAD + 14.0 + 16.0 * i as f64;
            writeln!(
                self.body,
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                W - PAD - 120.0,
                W - PAD - 100.0,
                color(i),
                W - PAD - 95.0,
                y + 4.0,
                escape(l)
            )
            .unwrap();
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn labels(log: &TrajectoryLog) -> Vec<String> {
    log.controllers
        .iter()
        .enumerate()
        .map(|(i, c)| format!("agent {i} ({c})"))
        .collect()
}

/// Walls as circles and one polyline per agent.
pub fn trajectory_svg(spec: &ScenarioSpec, log: &TrajectoryLog) -> String {
    let n = log.num_agents();
    let paths: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| log.positions(i).iter().map(|p| (p.x, p.y)).collect())
        .collect();
    let goals: Vec<(f64, f64)> = spec.agents.iter().map(|a| (a.goal.x, a.goal.y)).collect();
    let xs = paths.iter().flatten().chain(&goals).map(|p| p.0);
    let ys = paths.iter().flatten().chain(&goals).map(|p| p.1);
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for x in xs.clone() {
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
    }
    for y in ys.clone() {
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    let m = 0.4;
    let f = Frame::new([lo_x - m, hi_x + m].into_iter(), [lo_y - m, hi_y + m].into_iter(), true);
    let mut svg = Svg::new(&format!("{}: trajectories", spec.name));
    svg.axes(&f, "x (m)", "y (m)");
    for c in &spec.obstacles {
        let inside = c.x >= f.x0 && c.x <= f.x1 && c.y >= f.y0 && c.y <= f.y1;
        if inside {
            writeln!(
                svg.body,
                r##"<circle class="wall" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#bbb" stroke="none"/>"##,
                f.px(c.x),
                f.py(c.y),
                f.len(c.radius)
            )
            .unwrap();
        }
    }
    let names = labels(log);
    for (i, p) in paths.iter().enumerate() {
        svg.polyline(&f, p, color(i), &names[i]);
        let g = goals[i];
        writeln!(
            svg.body,
            r#"<circle class="goal" cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="{}"/>"#,
            f.px(g.0),
            f.py(g.1),
            color(i)
        )
        .unwrap();
    }
    svg.legend(&names);
    svg.finish()
}

/// Speed of every agent over time.
pub fn velocity_svg(log: &TrajectoryLog, v_max: f64) -> String {
    let n = log.num_agents();
    let series: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            log.speeds(i)
                .iter()
                .enumerate()
                .map(|(k, v)| (k as f64 * log.dt, *v))
                .collect()
        })
        .collect();
    let t_end = series
        .iter()
        .map(|s| s.last().map_or(0.0, |p| p.0))
        .fold(log.dt, f64::max);
    let f = Frame::new([0.0, t_end].into_iter(), [0.0, v_max * 1.1].into_iter(), false);
    let mut svg = Svg::new(&format!("{}: speed profile", log.scenario));
    svg.axes(&f, "t (s)", "v (m/s)");
    let names = labels(log);
    for (i, s) in series.iter().enumerate() {
        svg.polyline(&f, s, color(i), &names[i]);
    }
    svg.legend(&names);
    svg.finish()
}

/// Minimum obstacle barrier of every agent over time, with the overall
/// minimum annotated.
pub fn barrier_svg(log: &TrajectoryLog) -> String {
    let n = log.num_agents();
    let series: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            let mut s: Vec<(f64, f64)> = log.steps.iter().map(|st| (st.t, st.agents[i].min_barrier)).collect();
            s.push((log.steps.len() as f64 * log.dt, log.terminal_min_barrier[i]));
            s
        })
        .collect();
    let vals = series.iter().flatten().map(|p| p.1);
    let min = vals.clone().fold(f64::INFINITY, f64::min);
    let f = Frame::new(series.iter().flatten().map(|p| p.0), vals.chain([0.0]), false);
    let mut svg = Svg::new(&format!("{}: minimum barrier value", log.scenario));
    svg.axes(&f, "t (s)", "min b");
    writeln!(
        svg.body,
        r##"<line x1="{PAD}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        W - PAD,
        y = f.py(0.0)
    )
    .unwrap();
    let names = labels(log);
    for (i, s) in series.iter().enumerate() {
        svg.polyline(&f, s, color(i), &names[i]);
    }
    let note = if min >= 0.0 {
        format!("min b = {min:.4} ≥ 0 (safe)")
    } else {
        format!("min b = {min:.4} &lt; 0 (collision)")
    };
    writeln!(
        svg.body,
        r#"<text class="annotation" x="{}" y="{}">{note}</text>"#,
        PAD + 6.0,
        PAD + 16.0
    )
    .unwrap();
    svg.legend(&names);
    svg.finish()
}
