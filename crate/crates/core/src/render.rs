//! Top-down SVG drawing of a trajectory and its correction.
//!
//! Steps of the recorded trajectory are "success" while the walk is still a
//! prefix of the shortest path to the target and "error" afterwards; nodes
//! appended by a return correction are "return".

use std::fmt::Write as _;
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::navgraph::{NavGraph, Path};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

const STYLE: &str = "line.edge{stroke:#d0d0d0;stroke-width:1}\
circle.node{fill:#9a9a9a}\
polyline{fill:none;stroke-width:3;stroke-linejoin:round;stroke-linecap:round}\
polyline.success{stroke:#e6b800}\
polyline.error{stroke:#d62728}\
polyline.return{stroke:#2ca02c}\
circle.start{fill:#1f77b4}\
circle.target{fill:none;stroke:#000;stroke-width:2}";

/// Node sequences of the three segment classes. Consecutive classes share
/// their boundary node so the drawn lines connect.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segments {
    pub success: Vec<usize>,
    pub error: Vec<usize>,
    pub back: Vec<usize>,
}

pub fn classify(g: &NavGraph, baseline: &Path, corrected: &Path, target: usize) -> Result<Segments> {
    if baseline.is_empty() || corrected.is_empty() {
        return Err(Error::EmptyPath);
    }
    let reference = g.shortest_path(baseline.start(), target)?;
    let matched = baseline
        .nodes
        .iter()
        .zip(&reference.nodes)
        .take_while(|(a, b)| a == b)
        .count();
    let mut seg = Segments::default();
    if matched >= 2 {
        seg.success = baseline.nodes[..matched].to_vec();
    }
    if matched < baseline.len() {
        seg.error = baseline.nodes[matched.saturating_sub(1)..].to_vec();
    }
    let n = baseline.len();
    if corrected.len() > n && corrected.nodes[..n] == baseline.nodes[..] {
        seg.back = corrected.nodes[n - 1..].to_vec();
    }
    Ok(seg)
}

struct Projection {
    min: [f64; 2],
    scale: f64,
}

impl Projection {
    fn of(g: &NavGraph) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for n in 0..g.node_count() {
            let p = g.position(n);
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        Projection {
            min,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn xy(&self, g: &NavGraph, n: usize) -> (f64, f64) {
        let p = g.position(n);
        let x = MARGIN + (p[0] - self.min[0]) * self.scale;
        let y = SIZE - MARGIN - (p[1] - self.min[1]) * self.scale;
        (x, y)
    }
}

/// SVG document showing the graph, the recorded trajectory by segment class,
/// the appended return path and the target. Output bytes depend only on the
/// inputs.
pub fn render_trajectory_svg(g: &NavGraph, baseline: &Path, corrected: &Path, target: usize) -> Result<String> {
    let seg = classify(g, baseline, corrected, target)?;
    let proj = Projection::of(g);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, "<style>{STYLE}</style>");
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (a, b, _) in g.edges() {
        let ((x1, y1), (x2, y2)) = (proj.xy(g, a), proj.xy(g, b));
        let _ = writeln!(s, r#"<line class="edge" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#);
    }
    for n in 0..g.node_count() {
        let (x, y) = proj.xy(g, n);
        let _ = writeln!(s, r#"<circle class="node" cx="{x:.2}" cy="{y:.2}" r="2.5"/>"#);
    }
    for (class, nodes) in [("success", &seg.success), ("error", &seg.error), ("return", &seg.back)] {
        if nodes.len() < 2 {
            continue;
        }
        let points: Vec<String> = nodes
            .iter()
            .map(|&n| {
                let (x, y) = proj.xy(g, n);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline class="{class}" points="{}"/>"#, points.join(" "));
    }
    let (x, y) = proj.xy(g, baseline.start());
    let _ = writeln!(s, r#"<circle class="start" cx="{x:.2}" cy="{y:.2}" r="5"/>"#);
    let (x, y) = proj.xy(g, target);
    let _ = writeln!(s, r#"<circle class="target" cx="{x:.2}" cy="{y:.2}" r="8"/>"#);
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_trajectory_svg(g: &NavGraph, baseline: &Path, corrected: &Path, target: usize, out: &FsPath) -> Result<()> {
    let svg = render_trajectory_svg(g, baseline, corrected, target)?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> NavGraph {
        let nodes = (0..n).map(|i| (format!("n{i}"), [i as f64, 0.0, 0.0])).collect();
        let edges: Vec<(String, String)> = (1..n).map(|i| (format!("n{}", i - 1), format!("n{i}"))).collect();
        NavGraph::new(nodes, &edges).unwrap()
    }

    #[test]
    fn overshoot_and_return_classes() {
        let g = chain(6);
        let base = g.path_from_nodes(vec![0, 1, 2, 3, 4, 5]).unwrap();
        let fixed = g.path_from_nodes(vec![0, 1, 2, 3, 4, 5, 4, 3]).unwrap();
        let seg = classify(&g, &base, &fixed, 3).unwrap();
        assert_eq!(seg.success, vec![0, 1, 2, 3]);
        assert_eq!(seg.error, vec![3, 4, 5]);
        assert_eq!(seg.back, vec![5, 4, 3]);
        let svg = render_trajectory_svg(&g, &base, &fixed, 3).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg, render_trajectory_svg(&g, &base, &fixed, 3).unwrap());
    }

    #[test]
    fn identity_correction_draws_no_return() {
        let g = chain(4);
        let base = g.path_from_nodes(vec![0, 1, 2]).unwrap();
        let svg = render_trajectory_svg(&g, &base, &base, 2).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(r#"class="success""#));
        assert!(svg.contains(r#"class="target""#));
    }

    #[test]
    fn empty_path_is_rejected() {
        let g = chain(3);
        let empty = Path {
            nodes: vec![],
            length: 0.0,
        };
        let ok = Path::single(0);
        assert!(matches!(render_trajectory_svg(&g, &empty, &ok, 1), Err(Error::EmptyPath)));
    }
}
