//! Navigation graph: viewpoints with 3D positions joined by undirected,
//! Euclidean-weighted edges.
//!
//! Nodes are addressed by dense indices (`usize`) internally and by string ids
//! at file and API boundaries. The graph is immutable after construction; all
//! pairwise geodesic distances are computed once on first use and cached.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::path::Path as FsPath;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two path costs closer than this are treated as equal when breaking ties.
const COST_EPS: f64 = 1e-9;

pub type Position = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Shortest-path distance along graph edges.
    #[default]
    Geodesic,
    /// Straight-line distance between node positions.
    Euclidean,
}

#[derive(Debug)]
pub struct NavGraph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    positions: Vec<Position>,
    /// Neighbors of each node as `(node, weight)`, sorted by neighbor id.
    adjacency: Vec<Vec<(usize, f64)>>,
    edge_count: usize,
    all_pairs: OnceLock<Vec<Vec<f64>>>,
}

/// A walk through the graph. `length` is the summed edge weight in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<usize>,
    pub length: f64,
}

impl Path {
    pub fn single(node: usize) -> Self {
        Path {
            nodes: vec![node],
            length: 0.0,
        }
    }

    pub fn start(&self) -> usize {
        self.nodes[0]
    }

    pub fn end(&self) -> usize {
        *self.nodes.last().expect("paths are nonempty")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn euclidean(a: &Position, b: &Position) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NavGraph {
    /// Builds a graph from `(id, position)` nodes and id-pair edges.
    /// Edge weights are the Euclidean distance between endpoints.
    pub fn new<S: AsRef<str>>(nodes: Vec<(String, Position)>, edges: &[(S, S)]) -> Result<Self> {
        let mut ids = Vec::with_capacity(nodes.len());
        let mut index = HashMap::with_capacity(nodes.len());
        let mut positions = Vec::with_capacity(nodes.len());
        for (id, pos) in nodes {
            if pos.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvariantViolation(format!("node `{id}` has a non-finite position")));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateNode(id));
            }
            ids.push(id);
            positions.push(pos);
        }

        let mut adjacency = vec![Vec::new(); ids.len()];
        let mut seen = HashSet::new();
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ia = *index.get(a).ok_or_else(|| Error::UnknownEndpoint(a.to_string()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownEndpoint(b.to_string()))?;
            if ia == ib {
                return Err(Error::SelfLoop(a.to_string()));
            }
            if !seen.insert((ia.min(ib), ia.max(ib))) {
                return Err(Error::DuplicateEdge(a.to_string(), b.to_string()));
            }
            let w = euclidean(&positions[ia], &positions[ib]);
            if w <= 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "edge `{a}`-`{b}` has zero length"
                )));
            }
            adjacency[ia].push((ib, w));
            adjacency[ib].push((ia, w));
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| ids[x.0].cmp(&ids[y.0]));
        }

        Ok(NavGraph {
            ids,
            index,
            positions,
            adjacency,
            edge_count: seen.len(),
            all_pairs: OnceLock::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, node: usize) -> &Position {
        &self.positions[node]
    }

    pub fn node(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    fn check(&self, node: usize) -> Result<()> {
        if node < self.ids.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(format!("#{node}")))
        }
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn edge_weight(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|(n, _)| *n == b)
            .map(|(_, w)| *w)
    }

    /// Edges as `(a, b, weight)` with `a < b`, in index order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<_> = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |(b, _)| a < *b).map(move |&(b, w)| (a, b, w)))
            .collect();
        out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        out
    }

    /// Single-source Dijkstra. Unreachable nodes get `f64::INFINITY`.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.ids.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Frontier { cost: 0.0, node: source });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(next, w) in &self.adjacency[node] {
                let c = cost + w;
                if c < dist[next] {
                    dist[next] = c;
                    heap.push(Frontier { cost: c, node: next });
                }
            }
        }
        dist
    }

    fn all_pairs(&self) -> &Vec<Vec<f64>> {
        self.all_pairs
            .get_or_init(|| (0..self.ids.len()).map(|s| self.distances_from(s)).collect())
    }

    pub fn geodesic(&self, a: usize, b: usize) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        let d = self.all_pairs()[a][b];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(self.no_path(a, b))
        }
    }

    fn no_path(&self, a: usize, b: usize) -> Error {
        Error::NoPath {
            from: self.ids[a].clone(),
            to: self.ids[b].clone(),
        }
    }

    pub fn distance(&self, a: usize, b: usize, metric: DistanceMetric) -> Result<f64> {
        match metric {
            DistanceMetric::Geodesic => self.geodesic(a, b),
            DistanceMetric::Euclidean => {
                self.check(a)?;
                self.check(b)?;
                Ok(euclidean(&self.positions[a], &self.positions[b]))
            }
        }
    }

    /// Minimum-weight path from `a` to `b`. Among equal-cost paths the
    /// lexicographically smallest id sequence is returned.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<Path> {
        self.check(a)?;
        self.check(b)?;
        let to_b = &self.all_pairs()[b];
        if !to_b[a].is_finite() {
            return Err(self.no_path(a, b));
        }
        let mut nodes = vec![a];
        let mut length = 0.0;
        let mut cur = a;
        while cur != b {
            // Neighbors are sorted by id, so the first one on a shortest path
            // is the lexicographically smallest continuation.
            let &(next, w) = self.adjacency[cur]
                .iter()
                .find(|&&(n, w)| (w + to_b[n] - to_b[cur]).abs() <= COST_EPS)
                .expect("a finite distance implies a shortest-path successor");
            nodes.push(next);
            length += w;
            cur = next;
        }
        Ok(Path { nodes, length })
    }

    /// Nodes whose distance to `center` is at most `radius` (always contains `center`).
    pub fn nodes_within(&self, center: usize, radius: f64, metric: DistanceMetric) -> Result<BTreeSet<usize>> {
        self.check(center)?;
        if radius < 0.0 || radius.is_nan() {
            return Err(Error::NegativeRadius(radius));
        }
        let mut out = BTreeSet::new();
        out.insert(center);
        for u in 0..self.ids.len() {
            let d = match metric {
                DistanceMetric::Geodesic => self.all_pairs()[center][u],
                DistanceMetric::Euclidean => euclidean(&self.positions[center], &self.positions[u]),
            };
            if d <= radius {
                out.insert(u);
            }
        }
        Ok(out)
    }

    pub fn is_connected(&self) -> bool {
        if self.ids.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.ids.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Builds a path from a node sequence, checking adjacency.
    pub fn path_from_nodes(&self, nodes: Vec<usize>) -> Result<Path> {
        if nodes.is_empty() {
            return Err(Error::EmptyPath);
        }
        let mut length = 0.0;
        for &n in &nodes {
            self.check(n)?;
        }
        for pair in nodes.windows(2) {
            let w = self.edge_weight(pair[0], pair[1]).ok_or_else(|| {
                Error::InvariantViolation(format!(
                    "`{}` and `{}` are not adjacent",
                    self.ids[pair[0]], self.ids[pair[1]]
                ))
            })?;
            length += w;
        }
        Ok(Path { nodes, length })
    }

    pub fn path_from_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<Path> {
        let nodes = ids.iter().map(|s| self.node(s.as_ref())).collect::<Result<Vec<_>>>()?;
        self.path_from_nodes(nodes)
    }

    pub fn path_ids(&self, path: &Path) -> Vec<String> {
        path.nodes.iter().map(|&n| self.ids[n].clone()).collect()
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            nodes: self
                .ids
                .iter()
                .zip(&self.positions)
                .map(|(id, p)| NodeRecord {
                    id: id.clone(),
                    x: p[0],
                    y: p[1],
                    z: p[2],
                })
                .collect(),
            edges: self
                .edges()
                .into_iter()
                .map(|(a, b, _)| [self.ids[a].clone(), self.ids[b].clone()])
                .collect(),
        }
    }

    pub fn from_file(file: &GraphFile) -> Result<Self> {
        let nodes = file
            .nodes
            .iter()
            .map(|n| (n.id.clone(), [n.x, n.y, n.z]))
            .collect();
        let edges: Vec<(&str, &str)> = file.edges.iter().map(|[a, b]| (a.as_str(), b.as_str())).collect();
        NavGraph::new(nodes, &edges)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_str(&text)?;
        NavGraph::from_file(&file)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// On-disk graph: `{"nodes": [{id, x, y, z}], "edges": [[id, id]]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GraphFile {
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<[String; 2]>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn chain(n: usize, spacing: f64) -> NavGraph {
        let nodes = (0..n)
            .map(|i| (((b'a' + i as u8) as char).to_string(), [i as f64 * spacing, 0.0, 0.0]))
            .collect();
        let edges: Vec<(String, String)> = (1..n)
            .map(|i| (((b'a' + i as u8 - 1) as char).to_string(), ((b'a' + i as u8) as char).to_string()))
            .collect();
        NavGraph::new(nodes, &edges).unwrap()
    }

    fn triangle() -> NavGraph {
        NavGraph::new(
            vec![
                ("a".into(), [0.0, 0.0, 0.0]),
                ("b".into(), [1.0, 0.0, 0.0]),
                ("c".into(), [0.0, 1.0, 0.0]),
            ],
            &[("a", "b"), ("b", "c"), ("a", "c")],
        )
        .unwrap()
    }

    #[test]
    fn isolated_nodes() {
        let g = NavGraph::new(
            vec![("a".into(), [0.0; 3]), ("b".into(), [1.0, 0.0, 0.0]), ("c".into(), [2.0, 0.0, 0.0])],
            &Vec::<(&str, &str)>::new(),
        )
        .unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 0);
        assert!(!g.is_connected());
    }

    #[test]
    fn rejects_bad_edges() {
        let nodes = || vec![("a".to_string(), [0.0; 3]), ("b".to_string(), [1.0, 0.0, 0.0])];
        assert!(matches!(NavGraph::new(nodes(), &[("a", "a")]), Err(Error::SelfLoop(_))));
        assert!(matches!(NavGraph::new(nodes(), &[("a", "z")]), Err(Error::UnknownEndpoint(_))));
        assert!(matches!(
            NavGraph::new(nodes(), &[("a", "b"), ("b", "a")]),
            Err(Error::DuplicateEdge(..))
        ));
    }

    #[test]
    fn triangle_weights() {
        let g = triangle();
        let mut w: Vec<f64> = g.edges().iter().map(|e| e.2).collect();
        w.sort_by(f64::total_cmp);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 1.0);
        assert!((w[2] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn chain_paths() {
        let g = chain(4, 1.0);
        let (a, c, d) = (g.node("a").unwrap(), g.node("c").unwrap(), g.node("d").unwrap());
        let p = g.shortest_path(a, d).unwrap();
        assert_eq!(g.path_ids(&p), ["a", "b", "c", "d"]);
        assert_eq!(p.length, 3.0);
        assert_eq!(g.shortest_path(a, a).unwrap(), Path::single(a));
        assert_eq!(g.geodesic(a, c).unwrap(), 2.0);
        assert_eq!(g.geodesic(a, a).unwrap(), 0.0);
    }

    #[test]
    fn disconnected_is_no_path() {
        let g = NavGraph::new(
            vec![("a".into(), [0.0; 3]), ("b".into(), [1.0, 0.0, 0.0]), ("c".into(), [5.0, 0.0, 0.0])],
            &[("a", "b")],
        )
        .unwrap();
        assert!(matches!(g.shortest_path(0, 2), Err(Error::NoPath { .. })));
        assert!(matches!(g.geodesic(2, 0), Err(Error::NoPath { .. })));
        assert!(matches!(g.geodesic(0, 9), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn ties_prefer_smallest_sequence() {
        // square a-b-d and a-c-d, equal cost
        let g = NavGraph::new(
            vec![
                ("a".into(), [0.0, 0.0, 0.0]),
                ("c".into(), [1.0, 0.0, 0.0]),
                ("b".into(), [0.0, 1.0, 0.0]),
                ("d".into(), [1.0, 1.0, 0.0]),
            ],
            &[("a", "c"), ("c", "d"), ("a", "b"), ("b", "d")],
        )
        .unwrap();
        let p = g.shortest_path(g.node("a").unwrap(), g.node("d").unwrap()).unwrap();
        assert_eq!(g.path_ids(&p), ["a", "b", "d"]);
    }

    #[test]
    fn radius_queries() {
        let g = chain(5, 2.0);
        let c = g.node("c").unwrap();
        let within = g.nodes_within(c, 3.0, DistanceMetric::Geodesic).unwrap();
        let ids: Vec<_> = within.iter().map(|&n| g.id(n)).collect();
        assert_eq!(ids, ["b", "c", "d"]);
        assert_eq!(g.nodes_within(c, 0.0, DistanceMetric::Geodesic).unwrap().len(), 1);
        assert!(matches!(
            g.nodes_within(c, -1.0, DistanceMetric::Geodesic),
            Err(Error::NegativeRadius(_))
        ));
    }

    #[test]
    fn euclidean_metric_differs_from_geodesic() {
        // U-shaped chain: a and e are close in space but far along the graph
        let g = NavGraph::new(
            vec![
                ("a".into(), [0.0, 0.0, 0.0]),
                ("b".into(), [0.0, 4.0, 0.0]),
                ("c".into(), [2.0, 4.0, 0.0]),
                ("d".into(), [2.0, 0.0, 0.0]),
            ],
            &[("a", "b"), ("b", "c"), ("c", "d")],
        )
        .unwrap();
        let geo = g.nodes_within(0, 2.5, DistanceMetric::Geodesic).unwrap();
        let euc = g.nodes_within(0, 2.5, DistanceMetric::Euclidean).unwrap();
        assert_eq!(geo.len(), 1);
        assert!(euc.contains(&3));
    }

    #[test]
    fn file_round_trip() {
        let g = triangle();
        let f = g.to_file();
        let json = serde_json::to_string(&f).unwrap();
        let back: GraphFile = serde_json::from_str(&json).unwrap();
        let g2 = NavGraph::from_file(&back).unwrap();
        assert_eq!(g2.to_file(), f);
    }
}
