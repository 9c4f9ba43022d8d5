use rand::Rng;

use super::{BipartiteGraph, GraphError, SnapshotGraph};
use crate::seed;

/// Drops each edge independently with probability `drop_rate`.
///
/// Edges are visited in sorted order, so the result depends only on the
/// graph, the rate and `seed`.
pub fn edge_perturb(graph: &SnapshotGraph, drop_rate: f64, seed: u64) -> Result<SnapshotGraph, GraphError> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(GraphError::BadDropRate(drop_rate));
    }
    let mut rng = seed::rng(seed, "dropout");
    let kept: Vec<(u32, u32)> = graph.edges().filter(|_| rng.gen::<f64>() >= drop_rate).collect();
    let g = BipartiteGraph::from_edges(graph.user_count(), graph.item_count(), kept)?;
    Ok(SnapshotGraph::new(graph.time_index, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(users: u32, items: u32) -> SnapshotGraph {
        let edges = (0..users).flat_map(|u| (0..items).map(move |i| (u, i)));
        SnapshotGraph::new(0, BipartiteGraph::from_edges(users as usize, items as usize, edges).unwrap())
    }

    #[test]
    fn keep_all_and_drop_all() {
        let g = dense(5, 5);
        assert_eq!(edge_perturb(&g, 0.0, 1).unwrap(), g);
        assert_eq!(edge_perturb(&g, 1.0, 1).unwrap().edge_count(), 0);
    }

    #[test]
    fn rate_outside_unit_interval_rejected() {
        let g = dense(1, 1);
        assert!(edge_perturb(&g, 1.5, 0).is_err());
        assert!(edge_perturb(&g, -0.1, 0).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let g = dense(10, 10);
        assert_eq!(edge_perturb(&g, 0.5, 3).unwrap(), edge_perturb(&g, 0.5, 3).unwrap());
    }
}
