//! Per-episode navigation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{NavGraph, Path};

/// Default success radius and nDTW threshold, in meters.
pub const SUCCESS_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Trajectory length.
    pub tl: f64,
    /// Navigation error: geodesic distance from the stop node to the target.
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    /// Goal progress: start-to-target minus stop-to-target distance.
    pub gp: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub predicted_step: Option<usize>,
}

/// Metrics of `traj` for an episode from `start` to `target`, with
/// `reference` the ground-truth path used for nDTW.
pub fn episode_metrics(
    g: &NavGraph,
    traj: &Path,
    start: usize,
    target: usize,
    radius: f64,
    reference: &Path,
) -> Result<EpisodeResult> {
    if traj.is_empty() || reference.is_empty() {
        return Err(Error::EmptyPath);
    }
    if traj.start() != start {
        return Err(Error::StartMismatch {
            expected: g.id(start).to_string(),
            found: g.id(traj.start()).to_string(),
        });
    }
    let shortest = g.geodesic(start, target)?;
    let ne = g.geodesic(traj.end(), target)?;
    let mut nearest = f64::INFINITY;
    for &n in &traj.nodes {
        nearest = nearest.min(g.geodesic(n, target)?);
    }
    let success = ne <= radius;
    let spl = if success {
        let denom = shortest.max(traj.length);
        if denom > 0.0 {
            shortest / denom
        } else {
            1.0
        }
    } else {
        0.0
    };
    let ndtw = ndtw(g, traj, reference, radius)?;
    Ok(EpisodeResult {
        tl: traj.length,
        ne,
        success,
        oracle_success: nearest <= radius,
        spl,
        gp: shortest - ne,
        ndtw,
        sdtw: if success { ndtw } else { 0.0 },
        predicted_step: None,
    })
}

/// Dynamic time warping cost between two node sequences under geodesic
/// node-to-node cost.
pub fn dtw(g: &NavGraph, a: &Path, b: &Path) -> Result<f64> {
    let (n, m) = (a.nodes.len(), b.nodes.len());
    if n == 0 || m == 0 {
        return Err(Error::EmptyPath);
    }
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = g.geodesic(a.nodes[i - 1], b.nodes[j - 1])?;
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Normalized DTW: `exp(-DTW / (|reference| * threshold))`.
pub fn ndtw(g: &NavGraph, traj: &Path, reference: &Path, threshold: f64) -> Result<f64> {
    let cost = dtw(g, traj, reference)?;
    Ok((-cost / (reference.nodes.len() as f64 * threshold)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::tests::chain;
    use crate::rng::rng_for;
    use rand::RngExt;

    fn path(g: &NavGraph, ids: &[&str]) -> Path {
        g.path_from_ids(ids).unwrap()
    }

    #[test]
    fn perfect_agent() {
        let g = chain(6, 1.0);
        let r = path(&g, &["a", "b", "c", "d", "e"]);
        let m = episode_metrics(&g, &r, 0, 4, 3.0, &r).unwrap();
        assert!(m.success && m.oracle_success);
        assert_eq!((m.spl, m.ne, m.gp, m.ndtw, m.sdtw), (1.0, 0.0, 4.0, 1.0, 1.0));
    }

    #[test]
    fn stops_short() {
        // target 4 edges ahead on a 2 m chain, agent never moves
        let g = chain(6, 2.0);
        let r = path(&g, &["a", "b", "c", "d", "e"]);
        let t = path(&g, &["a"]);
        let m = episode_metrics(&g, &t, 0, 4, 3.0, &r).unwrap();
        assert!(!m.success && !m.oracle_success);
        assert_eq!(m.ne, 8.0);
        assert_eq!(m.spl, 0.0);
    }

    #[test]
    fn overshoot() {
        let g = chain(9, 1.0);
        let ids = ["a", "b", "c", "d", "e", "f", "g", "h", "i"];
        let r = path(&g, &ids[..5]);
        let t = path(&g, &ids);
        let m = episode_metrics(&g, &t, 0, 4, 3.0, &r).unwrap();
        assert!(m.oracle_success && !m.success);
        assert_eq!(m.gp, 4.0 - 4.0);
        assert_eq!(m.sdtw, 0.0);
    }

    #[test]
    fn start_mismatch() {
        let g = chain(3, 1.0);
        let r = path(&g, &["a", "b"]);
        let t = path(&g, &["b", "c"]);
        assert!(matches!(episode_metrics(&g, &t, 0, 1, 3.0, &r), Err(Error::StartMismatch { .. })));
    }

    #[test]
    fn ndtw_closed_forms() {
        let g = chain(5, 1.5);
        let r = path(&g, &["a", "b", "c"]);
        assert_eq!(ndtw(&g, &r, &r, 3.0).unwrap(), 1.0);
        let a = path(&g, &["a"]);
        let e = path(&g, &["e"]);
        assert!((ndtw(&g, &a, &e, 3.0).unwrap() - (-6.0f64 / 3.0).exp()).abs() < 1e-15);
    }

    /// Full-table DTW written from the recurrence.
    fn naive_dtw(g: &NavGraph, a: &[usize], b: &[usize]) -> f64 {
        let (n, m) = (a.len(), b.len());
        let mut t = vec![vec![f64::INFINITY; m + 1]; n + 1];
        t[0][0] = 0.0;
        for i in 1..=n {
            for j in 1..=m {
                let c = g.geodesic(a[i - 1], b[j - 1]).unwrap();
                t[i][j] = c + t[i - 1][j].min(t[i][j - 1]).min(t[i - 1][j - 1]);
            }
        }
        t[n][m]
    }

    fn random_walk(g: &NavGraph, len: usize, rng: &mut crate::rng::Rng) -> Path {
        let mut nodes = vec![rng.random_range(0..g.node_count())];
        while nodes.len() < len {
            let nb = g.neighbors(*nodes.last().unwrap());
            nodes.push(nb[rng.random_range(0..nb.len())].0);
        }
        g.path_from_nodes(nodes).unwrap()
    }

    #[test]
    fn ndtw_matches_naive_table() {
        let world = crate::synthworld::generate_world(&Default::default(), 3).unwrap();
        let g = &world.graph;
        let mut rng = rng_for(4, &[]);
        for _ in 0..50 {
            let a = random_walk(g, 6, &mut rng);
            let b = random_walk(g, 6, &mut rng);
            let expect = (-naive_dtw(g, &a.nodes, &b.nodes) / (6.0 * 3.0)).exp();
            assert!((ndtw(g, &a, &b, 3.0).unwrap() - expect).abs() < 1e-12);
        }
    }
}
