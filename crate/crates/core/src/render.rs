//! Zero-level curves of neurons over 2D grids, and deterministic SVG output
//! for boundary plots, bound curves and probe arrays.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::capacity::BoundReport;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::interpret::ProbeArray;
use crate::nn::{forward, MlpParams};
use crate::states::GridSpec;

/// Which preactivation a contour follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    /// 1-based hidden layer and neuron index.
    Neuron { layer: usize, index: usize },
    /// The decision boundary.
    Output,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Neuron { layer, index } => write!(f, "L{layer}N{index}"),
            Target::Output => f.write_str("DB"),
        }
    }
}

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct NsbPolyline {
    pub target: Target,
    pub polylines: Vec<Vec<Point>>,
}

impl NsbPolyline {
    pub fn vertex_count(&self) -> usize {
        self.polylines.iter().map(Vec::len).sum()
    }
}

fn preactivation(params: &MlpParams, target: Target, x: &[f64]) -> f64 {
    let tr = forward(params, x).expect("2D grid matches the network");
    match target {
        Target::Neuron { layer, index } => tr.preactivations[layer - 1][index],
        Target::Output => tr.output,
    }
}

fn check_target(params: &MlpParams, target: Target) -> Result<()> {
    if let Target::Neuron { layer, index } = target {
        let widths = &params.arch().hidden_widths;
        if layer == 0 || layer > widths.len() || index >= widths[layer - 1] {
            return Err(Error::input(format!("no neuron {target} in {}", params.arch())));
        }
    }
    Ok(())
}

fn check_plane(params: &MlpParams, grid: &GridSpec) -> Result<(usize, usize)> {
    if params.input_dim() != 2 || grid.dim() != 2 {
        return Err(Error::input("boundary extraction needs a 2D input space"));
    }
    let r = grid.resolution();
    if r[0] < 2 || r[1] < 2 {
        return Err(Error::input("boundary extraction needs at least 2 points per axis"));
    }
    Ok((r[0], r[1]))
}

/// Marching-squares zero level of `target` over `grid`. Crossings are
/// located by bisection along each cell edge, so every vertex has
/// `|preactivation| <= 1e-6`.
pub fn extract_nsb(params: &MlpParams, grid: &GridSpec, target: Target) -> Result<NsbPolyline> {
    check_target(params, target)?;
    let (nx, ny) = check_plane(params, grid)?;
    let vals: Vec<f64> = (0..(nx * ny) as u64)
        .into_par_iter()
        .map(|i| preactivation(params, target, &grid.point(i)))
        .collect();
    Ok(NsbPolyline {
        target,
        polylines: contour(grid, nx, ny, &vals, |x| preactivation(params, target, x)),
    })
}

/// Contours of every hidden neuron and of the output, from one pass of
/// forward evaluations over the grid.
pub fn extract_all(params: &MlpParams, grid: &GridSpec) -> Result<Vec<NsbPolyline>> {
    let (nx, ny) = check_plane(params, grid)?;
    let mut targets: Vec<Target> = Vec::new();
    for (l, &w) in params.arch().hidden_widths.iter().enumerate() {
        targets.extend((0..w).map(|index| Target::Neuron { layer: l + 1, index }));
    }
    targets.push(Target::Output);
    let fields: Vec<Vec<f64>> = (0..(nx * ny) as u64)
        .into_par_iter()
        .map(|i| {
            let tr = forward(params, &grid.point(i)).expect("2D grid");
            tr.preactivations.into_iter().flatten().collect()
        })
        .collect();
    Ok(targets
        .par_iter()
        .enumerate()
        .map(|(t, &target)| {
            let vals: Vec<f64> = fields.iter().map(|f| f[t]).collect();
            NsbPolyline {
                target,
                polylines: contour(grid, nx, ny, &vals, |x| preactivation(params, target, x)),
            }
        })
        .collect())
}

fn bisect_edge(f: &impl Fn(&[f64]) -> f64, a: Point, b: Point, va: f64) -> Point {
    let pos = va >= 0.0;
    let (mut lo, mut hi) = (a, b);
    for _ in 0..60 {
        let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        if (f(&mid) >= 0.0) == pos {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(&lo).abs() <= f(&hi).abs() {
        lo
    } else {
        hi
    }
}

fn contour(grid: &GridSpec, nx: usize, ny: usize, vals: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<Vec<Point>> {
    let at = |i: usize, j: usize| -> Point { [grid.coordinate(0, i), grid.coordinate(1, j)] };
    let v = |i: usize, j: usize| vals[j * nx + i];
    let pos = |i: usize, j: usize| v(i, j) >= 0.0;
    // Horizontal edge (i,j)-(i+1,j) is 2(j nx + i); vertical (i,j)-(i,j+1) is that plus one.
    let h = |i: usize, j: usize| 2 * (j * nx + i);
    let vert = |i: usize, j: usize| 2 * (j * nx + i) + 1;
    let mut points: HashMap<usize, Point> = HashMap::new();
    let mut crossing = |e: usize| -> usize {
        points.entry(e).or_insert_with(|| {
            let (i, j) = ((e / 2) % nx, (e / 2) / nx);
            let (a, b) = if e % 2 == 0 { (at(i, j), at(i + 1, j)) } else { (at(i, j), at(i, j + 1)) };
            bisect_edge(&f, a, b, v(i, j))
        });
        e
    };
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = [pos(i, j), pos(i + 1, j), pos(i + 1, j + 1), pos(i, j + 1)];
            let edges = [h(i, j), vert(i + 1, j), h(i, j + 1), vert(i, j)];
            let crossed: Vec<usize> = (0..4).filter(|&k| c[k] != c[(k + 1) % 4]).collect();
            match crossed.len() {
                2 => segments.push((crossing(edges[crossed[0]]), crossing(edges[crossed[1]]))),
                4 => {
                    let centre = [
                        (at(i, j)[0] + at(i + 1, j)[0]) / 2.0,
                        (at(i, j)[1] + at(i, j + 1)[1]) / 2.0,
                    ];
                    let centre_pos = f(&centre) >= 0.0;
                    // Corners matching the centre connect through it; the others are cut off.
                    let pairs = if c[0] == centre_pos { [(0, 1), (2, 3)] } else { [(3, 0), (1, 2)] };
                    for (a, b) in pairs {
                        segments.push((crossing(edges[a]), crossing(edges[b])));
                    }
                }
                _ => {}
            }
        }
    }
    chain(&segments, &points)
}

fn chain(segments: &[(usize, usize)], points: &HashMap<usize, Point>) -> Vec<Vec<Point>> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        adj.entry(a).or_default().push(s);
        adj.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let walk = |start_seg: usize, from: usize, used: &mut Vec<bool>| -> Vec<usize> {
        let mut path = vec![from];
        let (mut seg, mut cur) = (start_seg, from);
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            cur = if a == cur { b } else { a };
            path.push(cur);
            match adj[&cur].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        path
    };
    // Open chains start at edges used once; closed loops afterwards.
    for pass in 0..2 {
        for s in 0..segments.len() {
            if used[s] {
                continue;
            }
            let (a, b) = segments[s];
            let start = if adj[&a].len() == 1 {
                a
            } else if adj[&b].len() == 1 {
                b
            } else if pass == 1 {
                a
            } else {
                continue;
            };
            let edges = walk(s, start, &mut used);
            out.push(edges.iter().map(|e| points[e]).collect());
        }
    }
    out
}

/// Stroke style of one figure layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub stroke: String,
    pub width: f64,
    pub dash: Option<String>,
}

impl Style {
    pub fn solid(stroke: &str, width: f64) -> Self {
        Self {
            stroke: stroke.to_string(),
            width,
            dash: None,
        }
    }

    pub fn dashed(stroke: &str, width: f64, dash: &str) -> Self {
        Self {
            dash: Some(dash.to_string()),
            ..Self::solid(stroke, width)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotLayer {
    pub label: String,
    pub style: Style,
    pub polylines: Vec<Vec<Point>>,
    pub points: Vec<Point>,
}

impl PlotLayer {
    pub fn lines(label: impl Into<String>, style: Style, polylines: Vec<Vec<Point>>) -> Self {
        Self {
            label: label.into(),
            style,
            polylines,
            points: Vec::new(),
        }
    }

    pub fn scatter(label: impl Into<String>, color: &str, points: Vec<Point>) -> Self {
        Self {
            label: label.into(),
            style: Style::solid(color, 0.0),
            polylines: Vec::new(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// `None` fits the data.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub log_y: bool,
    pub layers: Vec<PlotLayer>,
}

impl Figure {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: String::new(),
            y_label: String::new(),
            x_range: None,
            y_range: None,
            log_y: false,
            layers: Vec::new(),
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn extent(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo, hi))
}

/// Renders `fig` as a standalone SVG document. Output depends only on the
/// figure, element order follows layer order, and coordinates are printed
/// with two decimals.
pub fn render_figure(fig: &Figure) -> String {
    let ty = |y: f64| if fig.log_y { y.log10() } else { y };
    let all = || {
        fig.layers
            .iter()
            .flat_map(|l| l.polylines.iter().flatten().chain(&l.points))
    };
    let (x0, x1) = fig
        .x_range
        .or_else(|| extent(all().map(|p| p[0])))
        .unwrap_or((0.0, 1.0));
    let (y0, y1) = fig
        .y_range
        .map(|(a, b)| (ty(a), ty(b)))
        .or_else(|| extent(all().map(|p| ty(p[1]))))
        .unwrap_or((0.0, 1.0));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (ty(y) - y0) / (y1 - y0) * ph;
    let inside = |p: &Point| p[0].is_finite() && ty(p[1]).is_finite();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&fig.title)
    );
    let _ = writeln!(
        s,
        r#"<defs><clipPath id="plot"><rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/></clipPath></defs>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let px = LEFT + pw * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            tick_label(fx)
        );
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let py = TOP + ph - ph * k as f64 / 4.0;
        let label = if fig.log_y { tick_label(10f64.powf(fy)) } else { tick_label(fy) };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        esc(&fig.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&fig.y_label)
    );
    let _ = writeln!(s, r#"<g clip-path="url(#plot)">"#);
    for layer in &fig.layers {
        let st = &layer.style;
        let dash = st
            .dash
            .as_ref()
            .map(|d| format!(r#" stroke-dasharray="{d}""#))
            .unwrap_or_default();
        for line in &layer.polylines {
            // Non-finite values split a line into runs.
            for run in line.split(|p| !inside(p)).filter(|r| r.len() >= 2) {
                let pts: Vec<String> = run.iter().map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1]))).collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}"{dash}/>"#,
                    pts.join(" "),
                    st.stroke,
                    st.width
                );
            }
        }
        for p in layer.points.iter().filter(|p| inside(p)) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
                sx(p[0]),
                sy(p[1]),
                st.stroke
            );
        }
    }
    let _ = writeln!(s, "</g>");
    for (i, layer) in fig.layers.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let st = &layer.style;
        if layer.points.is_empty() {
            let dash = st
                .dash
                .as_ref()
                .map(|d| format!(r#" stroke-dasharray="{d}""#))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="{}"{dash}/>"#,
                lx + 20.0,
                st.stroke,
                st.width.max(1.0)
            );
        } else {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{y:.2}" r="3" fill="{}"/>"#, lx + 10.0, st.stroke);
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, y + 4.0, esc(&layer.label));
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
];

/// Neuron boundaries coloured by layer, the decision boundary dotted, and
/// the data on top.
pub fn boundary_figure(title: &str, params: &MlpParams, grid: &GridSpec, data: Option<&Dataset>) -> Result<Figure> {
    let curves = extract_all(params, grid)?;
    let mut fig = Figure::new(title);
    fig.x_label = "x0".into();
    fig.y_label = "x1".into();
    fig.x_range = Some((grid.lower()[0], grid.upper()[0]));
    fig.y_range = Some((grid.lower()[1], grid.upper()[1]));
    for l in 1..=params.depth() {
        let lines: Vec<Vec<Point>> = curves
            .iter()
            .filter(|c| matches!(c.target, Target::Neuron { layer, .. } if layer == l))
            .flat_map(|c| c.polylines.iter().cloned())
            .collect();
        fig.layers.push(PlotLayer::lines(
            format!("layer {l}"),
            Style::solid(PALETTE[(l - 1) % PALETTE.len()], 1.0),
            lines,
        ));
    }
    let db = curves.iter().find(|c| c.target == Target::Output).expect("output contour");
    fig.layers.push(PlotLayer::lines(
        "decision boundary",
        Style::dashed("black", 2.5, "2,3"),
        db.polylines.clone(),
    ));
    if let Some(d) = data {
        for (label, color, want) in [("True", "#d62728", true), ("False", "#1f3b73", false)] {
            let pts = d
                .iter()
                .filter(|(_, y)| *y == want)
                .map(|(x, _)| [x[0], x[1]])
                .collect();
            fig.layers.push(PlotLayer::scatter(label, color, pts));
        }
    }
    Ok(fig)
}

/// Norm bounds and the Boolean bound against training step, log scale.
pub fn bounds_figure(title: &str, report: &BoundReport) -> Figure {
    let mut fig = Figure::new(title);
    fig.x_label = "training step".into();
    fig.y_label = "bound".into();
    fig.log_y = true;
    let series: [(&str, fn(&crate::capacity::BoundRow) -> f64, Style); 4] = [
        ("Frobenius", |r| r.norms.frobenius, Style::solid(PALETTE[0], 1.5)),
        ("spec-l1,2", |r| r.norms.spec_l12, Style::solid(PALETTE[1], 1.5)),
        ("spec-fro", |r| r.norms.spec_fro, Style::solid(PALETTE[2], 1.5)),
        ("Gamma-Bool", |r| r.gamma_bool, Style::solid("black", 2.5)),
    ];
    for (name, get, style) in series {
        let line = report
            .rows
            .iter()
            .map(|r| {
                let v = get(r);
                [r.step as f64, if v > 0.0 { v } else { f64::NAN }]
            })
            .collect();
        fig.layers.push(PlotLayer::lines(name, style, vec![line]));
    }
    fig
}

/// One line per named series of `(x, y)` points.
pub fn line_figure(title: &str, x_label: &str, y_label: &str, log_y: bool, series: &[(String, Vec<Point>)]) -> Figure {
    let mut fig = Figure::new(title);
    fig.x_label = x_label.into();
    fig.y_label = y_label.into();
    fig.log_y = log_y;
    for (i, (name, pts)) in series.iter().enumerate() {
        fig.layers.push(PlotLayer {
            label: name.clone(),
            style: Style::solid(PALETTE[i % PALETTE.len()], 1.5),
            polylines: vec![pts.clone()],
            points: pts.clone(),
        });
    }
    fig
}

/// A 2x10 array per split: top row the True fraction per digit, bottom row
/// the False fraction, shaded by value.
pub fn probe_svg(title: &str, arrays: &[ProbeArray]) -> String {
    const CELL: f64 = 36.0;
    let w = 80.0 + 10.0 * CELL + 20.0;
    let h = 40.0 + arrays.len() as f64 * (2.0 * CELL + 40.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, esc(title));
    for (k, a) in arrays.iter().enumerate() {
        let top = 40.0 + k as f64 * (2.0 * CELL + 40.0);
        let _ = writeln!(s, r#"<text x="6" y="{:.2}">{} ({})</text>"#, top - 4.0, esc(&a.split), esc(&a.node));
        for (row, (name, fr)) in [("True", &a.true_frac), ("False", &a.false_frac)].iter().enumerate() {
            let y = top + row as f64 * CELL;
            let _ = writeln!(s, r#"<text x="6" y="{:.2}">{name}</text>"#, y + CELL / 2.0 + 4.0);
            for d in 0..10 {
                let x = 80.0 + d as f64 * CELL;
                let v = if a.counts[d] > 0 { fr[d] } else { 0.0 };
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{:.0}%</text>"#,
                    x + CELL / 2.0,
                    y + CELL / 2.0 + 4.0,
                    100.0 * v
                );
            }
        }
        for d in 0..10 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{d}</text>"#,
                80.0 + d as f64 * CELL + CELL / 2.0,
                top + 2.0 * CELL + 14.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
