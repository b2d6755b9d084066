//! Synthetic worlds: a random geometric navigation graph, landmarks with
//! latent appearance vectors, instruction embeddings, panorama view features,
//! and a scripted baseline agent that overshoots its goal.
//!
//! Views are indexed `0..36`; `view % 12` is the heading sector (30 degrees
//! each, counter-clockwise from +x) and `view / 12` the elevation
//! (down, level, up).

use std::f64::consts::PI;
use std::path::Path as FsPath;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{euclidean, GraphFile, NavGraph, Path, Position};
use crate::rng::{rng_for, stream};

pub const VIEWS: usize = 36;
pub const HEADINGS: usize = 12;
pub const ELEVATIONS: usize = 3;

/// Signal gain per elevation (down, level, up).
pub const ELEVATION_WEIGHTS: [f64; ELEVATIONS] = [0.6, 1.0, 0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub node_count: usize,
    pub area_side: f64,
    pub connect_radius: f64,
    pub landmark_count: usize,
    pub feature_dim: usize,
    pub signal_strength: f64,
    pub noise_scale: f64,
    /// Landmarks farther than this (straight line) are invisible.
    pub visibility_radius: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            node_count: 60,
            area_side: 20.0,
            connect_radius: 3.6,
            landmark_count: 12,
            feature_dim: 32,
            signal_strength: 1.0,
            noise_scale: 0.3,
            visibility_radius: 8.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleSpec(m.to_string()));
        if self.node_count < 2 {
            return bad("node_count must be at least 2");
        }
        if !(self.connect_radius > 0.0) {
            return bad("connect_radius must be positive");
        }
        if !(self.area_side > 0.0) {
            return bad("area_side must be positive");
        }
        if self.feature_dim < 4 {
            return bad("feature_dim must be at least 4");
        }
        if self.landmark_count == 0 || self.landmark_count > self.node_count {
            return bad("landmark_count must be in [1, node_count]");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must be in [0, 1]");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be nonnegative");
        }
        if !(self.visibility_radius > 0.0) {
            return bad("visibility_radius must be positive");
        }
        Ok(())
    }
}

/// A landmark seen from a node: which heading sector faces it and how strongly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sighting {
    pub landmark: usize,
    pub heading: usize,
    /// Distance falloff in `(0, 1]`.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatents {
    /// Unit-norm appearance vector per landmark.
    pub latents: Vec<Vec<f64>>,
    pub positions: Vec<Position>,
    /// Node each landmark is placed beside; episode targets are anchors.
    pub anchors: Vec<usize>,
    /// Per node, the landmarks visible from it.
    pub visibility: Vec<Vec<Sighting>>,
}

impl SceneLatents {
    pub fn landmark_at(&self, node: usize) -> Option<usize> {
        self.anchors.iter().position(|&a| a == node)
    }
}

#[derive(Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub seed: u64,
    pub graph: NavGraph,
    pub scene: SceneLatents,
}

fn gaussian_vec(rng: &mut crate::rng::Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Heading sector (0..12) containing the bearing from `from` to `to`.
pub fn heading_sector(from: &Position, to: &Position) -> usize {
    let bearing = (to[1] - from[1]).atan2(to[0] - from[0]).rem_euclid(2.0 * PI);
    ((bearing / (2.0 * PI / HEADINGS as f64)) as usize).min(HEADINGS - 1)
}

fn compute_visibility(graph: &NavGraph, positions: &[Position], radius: f64) -> Vec<Vec<Sighting>> {
    (0..graph.node_count())
        .map(|n| {
            let p = graph.position(n);
            positions
                .iter()
                .enumerate()
                .filter_map(|(l, lp)| {
                    let d = euclidean(p, lp);
                    (d <= radius).then(|| Sighting {
                        landmark: l,
                        heading: heading_sector(p, lp),
                        gain: (1.0 - d / radius).powi(2),
                    })
                })
                .collect()
        })
        .collect()
}

fn node_id(i: usize) -> String {
    format!("v{i:03}")
}

/// Generates a connected random geometric graph with landmarks.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let n = spec.node_count;
    let mut rng = rng_for(seed, &[stream::WORLD_NODES]);
    let positions: Vec<Position> = (0..n)
        .map(|_| {
            let x: f64 = rng.random::<f64>() * spec.area_side;
            let y: f64 = rng.random::<f64>() * spec.area_side;
            [x, y, 0.0]
        })
        .collect();

    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let d = euclidean(&positions[a], &positions[b]);
            if d < spec.connect_radius && d > 0.0 {
                edges.push((a, b));
            }
        }
    }
    bridge_components(&positions, &mut edges);

    let ids: Vec<String> = (0..n).map(node_id).collect();
    let graph = NavGraph::new(
        ids.iter().cloned().zip(positions.iter().copied()).collect(),
        &edges.iter().map(|&(a, b)| (ids[a].as_str(), ids[b].as_str())).collect::<Vec<_>>(),
    )?;

    // Landmarks sit 0.5-1.5 m from distinct anchor nodes.
    let mut lrng = rng_for(seed, &[stream::WORLD_LANDMARKS]);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = lrng.random_range(0..=i);
        order.swap(i, j);
    }
    let anchors: Vec<usize> = order[..spec.landmark_count].to_vec();
    let lpositions: Vec<Position> = anchors
        .iter()
        .map(|&a| {
            let angle = lrng.random::<f64>() * 2.0 * PI;
            let r = 0.5 + lrng.random::<f64>();
            let p = positions[a];
            [p[0] + r * angle.cos(), p[1] + r * angle.sin(), 0.0]
        })
        .collect();

    let mut vrng = rng_for(seed, &[stream::WORLD_LATENTS]);
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(spec.landmark_count);
    for _ in 0..spec.landmark_count {
        let mut v = gaussian_vec(&mut vrng, spec.feature_dim, 1.0);
        // Orthogonalize against earlier latents while there is room.
        if latents.len() < spec.feature_dim {
            for u in &latents {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        normalize(&mut v);
        latents.push(v);
    }

    let visibility = compute_visibility(&graph, &lpositions, spec.visibility_radius);
    Ok(World {
        spec: spec.clone(),
        seed,
        graph,
        scene: SceneLatents {
            latents,
            positions: lpositions,
            anchors,
            visibility,
        },
    })
}

/// Adds the shortest straight-line edge between the component containing
/// node 0 and the rest until the graph is connected.
fn bridge_components(positions: &[Position], edges: &mut Vec<(usize, usize)>) {
    let n = positions.len();
    loop {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges.iter() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            return;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| seen[a]) {
            for b in (0..n).filter(|&b| !seen[b]) {
                let d = euclidean(&positions[a], &positions[b]);
                if d > 0.0 && best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("distinct positions");
        edges.push((a.min(b), a.max(b)));
    }
}

impl World {
    pub fn dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Instruction embedding for `target_landmark`: its latent plus isotropic
    /// Gaussian noise of expected norm `noise_scale`, renormalized.
    pub fn synth_instruction(&self, target_landmark: usize, seed: u64) -> Result<Vec<f64>> {
        let count = self.scene.latents.len();
        if target_landmark >= count {
            return Err(Error::BadLandmarkIndex {
                index: target_landmark,
                count,
            });
        }
        let d = self.dim();
        let mut rng = rng_for(seed, &[stream::INSTRUCTION, target_landmark as u64]);
        let noise = gaussian_vec(&mut rng, d, self.spec.noise_scale / (d as f64).sqrt());
        let mut t: Vec<f64> = self.scene.latents[target_landmark]
            .iter()
            .zip(&noise)
            .map(|(l, e)| l + e)
            .collect();
        normalize(&mut t);
        Ok(t)
    }

    /// Feature of one panorama view: Gaussian background plus the latents of
    /// landmarks faced by this view's heading, scaled by signal strength,
    /// elevation gain and distance falloff.
    pub fn synth_view_features(&self, node: usize, view: usize) -> Result<Vec<f64>> {
        if view >= VIEWS {
            return Err(Error::BadViewIndex(view));
        }
        if node >= self.graph.node_count() {
            return Err(Error::UnknownNode(format!("#{node}")));
        }
        let d = self.dim();
        let mut rng = rng_for(self.seed, &[stream::VIEW, node as u64, view as u64]);
        let mut o = gaussian_vec(&mut rng, d, self.spec.noise_scale / (d as f64).sqrt());
        let heading = view % HEADINGS;
        let elevation_gain = ELEVATION_WEIGHTS[view / HEADINGS];
        for s in self.scene.visibility[node].iter().filter(|s| s.heading == heading) {
            let g = self.spec.signal_strength * elevation_gain * s.gain;
            o.iter_mut()
                .zip(&self.scene.latents[s.landmark])
                .for_each(|(x, l)| *x += g * l);
        }
        Ok(o)
    }

    /// All 36 view features of every node, row-major `[node][view * d + k]`.
    pub fn feature_bank(&self) -> FeatureBank {
        let d = self.dim();
        let panoramas = (0..self.graph.node_count())
            .map(|n| {
                (0..VIEWS)
                    .flat_map(|v| self.synth_view_features(n, v).expect("valid node and view"))
                    .collect::<Vec<f64>>()
            })
            .collect();
        FeatureBank { dim: d, panoramas }
    }

    /// Scripted agent: follows the shortest path, then with probability
    /// `p_overshoot` keeps walking `k_extra` steps past the target, or with
    /// probability `p_undershoot` stops one or two nodes early.
    pub fn baseline_rollout(
        &self,
        episode_seed: u64,
        start: usize,
        target: usize,
        p_overshoot: f64,
        p_undershoot: f64,
        k_extra: usize,
    ) -> Result<Path> {
        let g = &self.graph;
        let mut path = g.shortest_path(start, target)?;
        let mut rng = rng_for(episode_seed, &[stream::ROLLOUT]);
        let u: f64 = rng.random();
        if u < p_overshoot {
            let mut nodes = path.nodes.clone();
            for _ in 0..k_extra {
                let cur = *nodes.last().unwrap();
                let prev = nodes.len().checked_sub(2).map(|i| nodes[i]);
                let nbrs = g.neighbors(cur);
                if nbrs.is_empty() {
                    break;
                }
                let fresh: Vec<usize> = nbrs.iter().map(|n| n.0).filter(|n| !nodes.contains(n)).collect();
                let not_back: Vec<usize> = nbrs.iter().map(|n| n.0).filter(|&n| Some(n) != prev).collect();
                let pool = if !fresh.is_empty() {
                    fresh
                } else if !not_back.is_empty() {
                    not_back
                } else {
                    nbrs.iter().map(|n| n.0).collect()
                };
                nodes.push(pool[rng.random_range(0..pool.len())]);
            }
            path = g.path_from_nodes(nodes)?;
        } else if u < p_overshoot + p_undershoot && path.len() > 1 {
            let cut = rng.random_range(1..=2usize).min(path.len() - 1);
            let keep = path.nodes[..path.len() - cut].to_vec();
            path = g.path_from_nodes(keep)?;
        }
        Ok(path)
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile {
            seed: self.seed,
            spec: self.spec.clone(),
            graph: self.graph.to_file(),
            landmarks: self
                .scene
                .latents
                .iter()
                .zip(&self.scene.positions)
                .zip(&self.scene.anchors)
                .map(|((latent, p), &a)| LandmarkRecord {
                    anchor: self.graph.id(a).to_string(),
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    latent: latent.clone(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &WorldFile) -> Result<Self> {
        file.spec.validate()?;
        let graph = NavGraph::from_file(&file.graph)?;
        let d = file.spec.feature_dim;
        let mut latents = Vec::new();
        let mut positions = Vec::new();
        let mut anchors = Vec::new();
        for (i, l) in file.landmarks.iter().enumerate() {
            let norm = l.latent.iter().map(|x| x * x).sum::<f64>().sqrt();
            if l.latent.len() != d || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvariantViolation(format!(
                    "landmark {i} latent must be a unit vector of length {d}"
                )));
            }
            latents.push(l.latent.clone());
            positions.push([l.x, l.y, l.z]);
            anchors.push(graph.node(&l.anchor)?);
        }
        let visibility = compute_visibility(&graph, &positions, file.spec.visibility_radius);
        Ok(World {
            spec: file.spec.clone(),
            seed: file.seed,
            graph,
            scene: SceneLatents {
                latents,
                positions,
                anchors,
                visibility,
            },
        })
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WorldFile = serde_json::from_str(&text)?;
        World::from_file(&file)
    }
}

/// Precomputed panorama features for every node of a world.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub dim: usize,
    pub panoramas: Vec<Vec<f64>>,
}

impl FeatureBank {
    /// `[T * 36 * d]` features for a node sequence.
    pub fn trajectory(&self, nodes: &[usize]) -> Vec<f64> {
        nodes.iter().flat_map(|&n| self.panoramas[n].iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub anchor: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub latent: Vec<f64>,
}

/// World JSON: graph nodes/edges plus generation spec, seed and landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub seed: u64,
    pub spec: WorldSpec,
    #[serde(flatten)]
    pub graph: GraphFile,
    pub landmarks: Vec<LandmarkRecord>,
}
