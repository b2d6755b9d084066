//! Episode construction and persistence.
//!
//! Training trajectories are spliced so the destination is not always the
//! final step: one or two positives are drawn from the set of viewpoints
//! within the success radius of the target, the start is joined to the first
//! by a shortest path, the first to the second, and a short random walk is
//! appended after the second.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{DistanceMetric, NavGraph};
use crate::rng::{derive_seed, rng_for, stream, Rng};
use crate::synthworld::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeenLike,
    ValUnseenLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub episode_id: String,
    pub world_id: String,
    pub start: String,
    pub target: String,
    pub path: Vec<String>,
    pub positive_steps: Vec<usize>,
    pub instruction_seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub eval_count: usize,
    /// Success radius used for positive mining (meters).
    pub radius: f64,
    pub metric: DistanceMetric,
    /// Length budget of the walk appended after the second positive (meters).
    pub expand_budget: f64,
    pub max_steps: usize,
    pub max_attempts: usize,
    /// Baseline agent used for validation and evaluation trajectories.
    pub p_overshoot: f64,
    pub p_undershoot: f64,
    pub k_extra: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 500,
            val_count: 100,
            eval_count: 100,
            radius: 3.0,
            metric: DistanceMetric::Geodesic,
            expand_budget: 6.0,
            max_steps: 15,
            max_attempts: 200,
            p_overshoot: 0.5,
            p_undershoot: 0.1,
            k_extra: 3,
        }
    }
}

/// Viewpoints within `radius` of `target`.
pub fn find_positive_set(g: &NavGraph, target: usize, radius: f64, metric: DistanceMetric) -> Result<BTreeSet<usize>> {
    g.nodes_within(target, radius, metric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrajectory {
    pub path: Vec<usize>,
    pub positive_steps: Vec<usize>,
    /// The sampled positives in visiting order.
    pub positives: Vec<usize>,
    /// Length added by the walk after the second positive.
    pub expansion_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Trajectory(TrainingTrajectory),
    /// The draw produced a trajectory that needs no navigation; sample again.
    Restart,
}

/// Splices a training trajectory from `start` through one or two positives
/// drawn from `positives`.
pub fn construct_training_trajectory(
    g: &NavGraph,
    start: usize,
    positives: &BTreeSet<usize>,
    expand_budget: f64,
    rng: &mut Rng,
) -> Result<Construction> {
    if positives.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    if positives.len() == 1 && positives.contains(&start) {
        return Ok(Construction::Restart);
    }
    let pool: Vec<usize> = positives.iter().copied().collect();
    let two = pool.len() >= 2 && rng.random::<bool>();
    let first = pool[rng.random_range(0..pool.len())];
    let second = two.then(|| {
        let mut j = rng.random_range(0..pool.len() - 1);
        if pool[j] == first {
            j = pool.len() - 1;
        }
        pool[j]
    });

    let mut path = g.shortest_path(start, first)?.nodes;
    let mut expansion_length = 0.0;
    let mut chosen = vec![first];
    if let Some(b) = second {
        chosen.push(b);
        path.extend_from_slice(&g.shortest_path(first, b)?.nodes[1..]);
        let mut on_path: HashSet<usize> = path.iter().copied().collect();
        loop {
            let cur = *path.last().unwrap();
            let options: Vec<(usize, f64)> = g
                .neighbors(cur)
                .iter()
                .copied()
                .filter(|(n, w)| !on_path.contains(n) && expansion_length + w <= expand_budget)
                .collect();
            if options.is_empty() {
                break;
            }
            let (next, w) = options[rng.random_range(0..options.len())];
            path.push(next);
            on_path.insert(next);
            expansion_length += w;
        }
    }
    if path.len() < 2 {
        return Ok(Construction::Restart);
    }
    let positive_steps = path
        .iter()
        .enumerate()
        .filter(|(_, n)| chosen.contains(n))
        .map(|(i, _)| i)
        .collect();
    Ok(Construction::Trajectory(TrainingTrajectory {
        path,
        positive_steps,
        positives: chosen,
        expansion_length,
    }))
}

pub fn world_id(world: &World) -> String {
    format!("w{}", world.seed)
}

fn pick_start(world: &World, target: usize, cfg: &DataConfig, rng: &mut Rng) -> Result<usize> {
    let g = &world.graph;
    let far: Vec<usize> = (0..g.node_count())
        .filter(|&n| g.distance(n, target, cfg.metric).map_or(false, |d| d > cfg.radius))
        .collect();
    if far.is_empty() {
        return Err(Error::InfeasibleSpec("every node is within the success radius of the target".into()));
    }
    Ok(far[rng.random_range(0..far.len())])
}

fn pick_target(world: &World, rng: &mut Rng) -> usize {
    let anchors = &world.scene.anchors;
    anchors[rng.random_range(0..anchors.len())]
}

/// Builds `count` training episodes; episode `i` depends only on `(seed, i)`.
pub fn build_training_episodes(world: &World, count: usize, seed: u64, cfg: &DataConfig) -> Result<Vec<Episode>> {
    let g = &world.graph;
    (0..count)
        .map(|i| {
            for attempt in 0..cfg.max_attempts {
                let mut rng = rng_for(seed, &[stream::EPISODE, 0, i as u64, attempt as u64]);
                let target = pick_target(world, &mut rng);
                let start = pick_start(world, target, cfg, &mut rng)?;
                let z = find_positive_set(g, target, cfg.radius, cfg.metric)?;
                match construct_training_trajectory(g, start, &z, cfg.expand_budget, &mut rng)? {
                    Construction::Trajectory(t) if t.path.len() <= cfg.max_steps => {
                        return Ok(Episode {
                            episode_id: format!("train-{i:05}"),
                            world_id: world_id(world),
                            start: g.id(start).to_string(),
                            target: g.id(target).to_string(),
                            path: t.path.iter().map(|&n| g.id(n).to_string()).collect(),
                            positive_steps: t.positive_steps,
                            instruction_seed: derive_seed(seed, &[stream::INSTRUCTION, 0, i as u64]),
                            split: Split::Train,
                        });
                    }
                    _ => continue,
                }
            }
            Err(Error::SamplingExhausted(cfg.max_attempts))
        })
        .collect()
}

/// Builds episodes whose trajectories come from the scripted baseline agent.
/// `(start, target)` pairs listed in `exclude` are never reused.
pub fn build_rollout_episodes(
    world: &World,
    count: usize,
    seed: u64,
    split: Split,
    cfg: &DataConfig,
    exclude: &HashSet<(String, String)>,
) -> Result<Vec<Episode>> {
    let g = &world.graph;
    let tag = match split {
        Split::Train => 0,
        Split::ValSeenLike => 1,
        Split::ValUnseenLike => 2,
    };
    let prefix = match split {
        Split::Train => "train",
        Split::ValSeenLike => "val",
        Split::ValUnseenLike => "eval",
    };
    (0..count)
        .map(|i| {
            for attempt in 0..cfg.max_attempts {
                let mut rng = rng_for(seed, &[stream::EPISODE, tag, i as u64, attempt as u64]);
                let target = pick_target(world, &mut rng);
                let start = pick_start(world, target, cfg, &mut rng)?;
                if exclude.contains(&(g.id(start).to_string(), g.id(target).to_string())) {
                    continue;
                }
                let episode_seed = derive_seed(seed, &[stream::ROLLOUT, tag, i as u64, attempt as u64]);
                let path = world.baseline_rollout(episode_seed, start, target, cfg.p_overshoot, cfg.p_undershoot, cfg.k_extra)?;
                if path.len() > cfg.max_steps {
                    continue;
                }
                let positive_steps = path
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, &n)| g.distance(n, target, cfg.metric).map_or(false, |d| d <= cfg.radius))
                    .map(|(s, _)| s)
                    .collect();
                return Ok(Episode {
                    episode_id: format!("{prefix}-{i:05}"),
                    world_id: world_id(world),
                    start: g.id(start).to_string(),
                    target: g.id(target).to_string(),
                    path: g.path_ids(&path),
                    positive_steps,
                    instruction_seed: derive_seed(seed, &[stream::INSTRUCTION, tag, i as u64]),
                    split,
                });
            }
            Err(Error::SamplingExhausted(cfg.max_attempts))
        })
        .collect()
}

impl Episode {
    /// Checks adjacency and that every positive step lies within `radius` of the target.
    pub fn validate(&self, g: &NavGraph, radius: f64, metric: DistanceMetric) -> Result<()> {
        let path = g.path_from_ids(&self.path)?;
        let target = g.node(&self.target)?;
        if self.path.first() != Some(&self.start) {
            return Err(Error::InvariantViolation(format!("{}: path does not begin at start", self.episode_id)));
        }
        if self.split == Split::Train && self.positive_steps.is_empty() {
            return Err(Error::InvariantViolation(format!("{}: training episode without positives", self.episode_id)));
        }
        for &s in &self.positive_steps {
            let node = *path.nodes.get(s).ok_or_else(|| {
                Error::InvariantViolation(format!("{}: positive step {s} beyond path", self.episode_id))
            })?;
            let d = g.distance(node, target, metric)?;
            if d > radius {
                return Err(Error::InvariantViolation(format!(
                    "{}: positive step {s} is {d:.2} m from the target",
                    self.episode_id
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.path.len()];
        for &s in &self.positive_steps {
            y[s] = 1.0;
        }
        y
    }
}

pub fn write_episodes(path: &FsPath, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines episode file; with `validate` set, each episode is
/// checked against the graph.
pub fn read_episodes(path: &FsPath, validate: Option<(&NavGraph, f64, DistanceMetric)>) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some((g, radius, metric)) = validate {
            ep.validate(g, radius, metric)?;
        }
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::tests::chain;
    use crate::synthworld::{generate_world, WorldSpec};

    #[test]
    fn positive_sets() {
        let g = chain(5, 2.0);
        let z = find_positive_set(&g, g.node("c").unwrap(), 3.0, DistanceMetric::Geodesic).unwrap();
        assert_eq!(z.iter().map(|&n| g.id(n)).collect::<Vec<_>>(), ["b", "c", "d"]);
        let iso = NavGraph::new(vec![("x".into(), [0.0; 3]), ("y".into(), [9.0, 0.0, 0.0])], &Vec::<(&str, &str)>::new()).unwrap();
        assert_eq!(find_positive_set(&iso, 0, 3.0, DistanceMetric::Geodesic).unwrap().len(), 1);
        assert!(matches!(find_positive_set(&g, 42, 3.0, DistanceMetric::Geodesic), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn single_positive_is_shortest_path() {
        let g = chain(5, 2.0);
        let z: BTreeSet<usize> = [3].into_iter().collect();
        let mut rng = rng_for(1, &[]);
        let Construction::Trajectory(t) = construct_training_trajectory(&g, 0, &z, 6.0, &mut rng).unwrap() else {
            panic!("expected a trajectory")
        };
        assert_eq!(t.path, g.shortest_path(0, 3).unwrap().nodes);
        assert_eq!(t.positive_steps, vec![3]);
    }

    #[test]
    fn degenerate_start_restarts() {
        let g = chain(5, 2.0);
        let z: BTreeSet<usize> = [2].into_iter().collect();
        let mut rng = rng_for(1, &[]);
        assert_eq!(construct_training_trajectory(&g, 2, &z, 6.0, &mut rng).unwrap(), Construction::Restart);
        assert!(matches!(
            construct_training_trajectory(&g, 2, &BTreeSet::new(), 6.0, &mut rng),
            Err(Error::EmptyPositiveSet)
        ));
    }

    #[test]
    fn two_positives_replay() {
        let w = generate_world(&WorldSpec::default(), 11).unwrap();
        let g = &w.graph;
        let target = w.scene.anchors[0];
        let z = find_positive_set(g, target, 3.0, DistanceMetric::Geodesic).unwrap();
        assert!(z.len() >= 2);
        let start = (0..g.node_count()).find(|&n| !z.contains(&n)).unwrap();
        let mut found = false;
        for seed in 0..50 {
            let mut rng = rng_for(seed, &[]);
            let Construction::Trajectory(t) = construct_training_trajectory(g, start, &z, 6.0, &mut rng).unwrap() else {
                continue;
            };
            if t.positives.len() < 2 {
                continue;
            }
            found = true;
            let (a, b) = (t.positives[0], t.positives[1]);
            // replay: start->a, a->b, then the walk
            let sp1 = g.shortest_path(start, a).unwrap().nodes;
            let sp2 = g.shortest_path(a, b).unwrap().nodes;
            assert_eq!(&t.path[..sp1.len()], &sp1[..]);
            assert_eq!(&t.path[sp1.len() - 1..sp1.len() - 1 + sp2.len()], &sp2[..]);
            let tail = &t.path[sp1.len() + sp2.len() - 2..];
            let tail_len = g.path_from_nodes(tail.to_vec()).unwrap().length;
            assert!((tail_len - t.expansion_length).abs() < 1e-9);
            assert!(t.expansion_length <= 6.0);
            for (i, n) in t.path.iter().enumerate() {
                assert_eq!(t.positive_steps.contains(&i), *n == a || *n == b);
            }
        }
        assert!(found);
    }

    #[test]
    fn episodes_round_trip_and_validate() {
        let w = generate_world(&WorldSpec::default(), 12).unwrap();
        let cfg = DataConfig::default();
        let eps = build_training_episodes(&w, 100, 5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        write_episodes(&p, &eps).unwrap();
        let back = read_episodes(&p, Some((&w.graph, 3.0, DistanceMetric::Geodesic))).unwrap();
        assert_eq!(back, eps);
    }

    #[test]
    fn malformed_line_number() {
        let w = generate_world(&WorldSpec::default(), 12).unwrap();
        let eps = build_training_episodes(&w, 3, 5, &DataConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        write_episodes(&p, &eps).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_episodes(&p, None) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn planted_far_positive_rejected() {
        // chain with 2.5 m spacing: step 0 is 5 m from target `c`
        let g = chain(3, 2.5);
        let ep = Episode {
            episode_id: "x".into(),
            world_id: "w".into(),
            start: "a".into(),
            target: "c".into(),
            path: vec!["a".into(), "b".into(), "c".into()],
            positive_steps: vec![0, 2],
            instruction_seed: 0,
            split: Split::Train,
        };
        assert!(matches!(ep.validate(&g, 3.0, DistanceMetric::Geodesic), Err(Error::InvariantViolation(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        write_episodes(&p, &[ep]).unwrap();
        assert!(matches!(
            read_episodes(&p, Some((&g, 3.0, DistanceMetric::Geodesic))),
            Err(Error::InvariantViolation(_))
        ));
    }
}
