//! Trajectory rewrites that move the stop location to a predicted step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navgraph::{NavGraph, Path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// Keep the whole trajectory and walk back to the predicted viewpoint.
    Return,
    /// Truncate the trajectory at the predicted viewpoint.
    Crop,
}

impl Correction {
    pub fn apply(self, g: &NavGraph, traj: &Path, predicted_step: usize) -> Result<Path> {
        match self {
            Correction::Return => correct_return(g, traj, predicted_step),
            Correction::Crop => correct_crop(g, traj, predicted_step),
        }
    }
}

fn check_step(traj: &Path, step: usize) -> Result<()> {
    if step >= traj.len() {
        return Err(Error::BadStep {
            step,
            len: traj.len(),
        });
    }
    Ok(())
}

/// The original trajectory followed by the shortest path from its end to the
/// node at `predicted_step`.
pub fn correct_return(g: &NavGraph, traj: &Path, predicted_step: usize) -> Result<Path> {
    check_step(traj, predicted_step)?;
    let back = g.shortest_path(traj.end(), traj.nodes[predicted_step])?;
    let mut nodes = traj.nodes.clone();
    nodes.extend_from_slice(&back.nodes[1..]);
    Ok(Path {
        nodes,
        length: traj.length + back.length,
    })
}

/// The prefix of the trajectory ending at `predicted_step`.
pub fn correct_crop(g: &NavGraph, traj: &Path, predicted_step: usize) -> Result<Path> {
    check_step(traj, predicted_step)?;
    if predicted_step + 1 == traj.len() {
        return Ok(traj.clone());
    }
    g.path_from_nodes(traj.nodes[..=predicted_step].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::episode_metrics;
    use crate::navgraph::tests::chain;
    use crate::rng::rng_for;
    use rand::RngExt;

    #[test]
    fn identity_at_last_step() {
        let g = chain(5, 1.0);
        let t = g.path_from_ids(&["a", "b", "c", "d"]).unwrap();
        assert_eq!(correct_return(&g, &t, 3).unwrap(), t);
        assert_eq!(correct_crop(&g, &t, 3).unwrap(), t);
    }

    #[test]
    fn return_on_chain() {
        let g = chain(6, 1.5);
        let t = g.path_from_ids(&["a", "b", "c", "d", "e"]).unwrap();
        let r = correct_return(&g, &t, 1).unwrap();
        assert_eq!(&r.nodes[..5], &t.nodes[..]);
        assert_eq!(*r.nodes.last().unwrap(), t.nodes[1]);
        assert!((r.length - (t.length + 4.5)).abs() < 1e-12);
    }

    #[test]
    fn crop_cases() {
        let g = chain(5, 1.0);
        let t = g.path_from_ids(&["a", "b", "c", "d"]).unwrap();
        let c = correct_crop(&g, &t, 0).unwrap();
        assert_eq!(c.nodes, vec![0]);
        assert_eq!(c.length, 0.0);
        assert_eq!(correct_crop(&g, &t, 2).unwrap().length, 2.0);
        assert!(matches!(correct_crop(&g, &t, 4), Err(Error::BadStep { step: 4, len: 4 })));
        assert!(matches!(correct_return(&g, &t, 9), Err(Error::BadStep { .. })));
    }

    #[test]
    fn crop_spl_dominates_return() {
        let world = crate::synthworld::generate_world(&Default::default(), 5).unwrap();
        let g = &world.graph;
        let mut rng = rng_for(6, &[]);
        for _ in 0..100 {
            let start = rng.random_range(0..g.node_count());
            let target = rng.random_range(0..g.node_count());
            let mut nodes = vec![start];
            for _ in 0..rng.random_range(0..8) {
                let nb = g.neighbors(*nodes.last().unwrap());
                nodes.push(nb[rng.random_range(0..nb.len())].0);
            }
            let traj = g.path_from_nodes(nodes).unwrap();
            let reference = g.shortest_path(start, target).unwrap();
            let step = rng.random_range(0..traj.len());
            let ret = correct_return(g, &traj, step).unwrap();
            let crop = correct_crop(g, &traj, step).unwrap();
            let mr = episode_metrics(g, &ret, start, target, 3.0, &reference).unwrap();
            let mc = episode_metrics(g, &crop, start, target, 3.0, &reference).unwrap();
            let mo = episode_metrics(g, &traj, start, target, 3.0, &reference).unwrap();
            assert_eq!(mr.success, mc.success);
            assert!(crop.length <= ret.length + 1e-12);
            assert!(mc.spl >= mr.spl);
            assert!(mr.oracle_success >= mo.oracle_success);
            assert!(crop.length <= traj.length + 1e-12);
            let predicted_ok = g.geodesic(traj.nodes[step], target).unwrap() <= 3.0;
            assert_eq!(mr.success, predicted_ok);
        }
    }
}
