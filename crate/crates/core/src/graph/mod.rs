//! Temporal bipartite interaction graphs.
//!
//! Users and items live in separate id spaces. Anywhere a single index is
//! needed (propagation matrices, embedding tables) users come first:
//! user `u` is row `u`, item `i` is row `user_count + i`.

mod build;
mod perturb;
mod propagate;
mod subgraph;

pub use build::{build_dynamic, read_interactions, write_interactions, IdMaps, Interaction};
pub use perturb::edge_perturb;
pub use propagate::{normalized_propagate, PropagationMode};
pub use subgraph::{extract_khop, fuse_subgraphs, Subgraph};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::SparseMatrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("user id {id} out of range (user_count {count})")]
    UserOutOfRange { id: u32, count: usize },
    #[error("item id {id} out of range (item_count {count})")]
    ItemOutOfRange { id: u32, count: usize },
    #[error("snapshot time indices must strictly increase ({prev} then {next})")]
    NonIncreasingTime { prev: i64, next: i64 },
    #[error("pretrain split {split} invalid for {snapshots} snapshots (need 0 < split < count)")]
    BadSplit { split: usize, snapshots: usize },
    #[error("interaction stream is empty")]
    EmptyStream,
    #[error("granularity must be positive, got {0}")]
    BadGranularity(i64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("drop rate {0} outside [0, 1]")]
    BadDropRate(f64),
    #[error("hop count must be at least 1")]
    BadHop,
    #[error("snapshots disagree on node counts")]
    InconsistentCounts,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A user or an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    User(u32),
    Item(u32),
}

impl Node {
    /// Position in the users-then-items ordering.
    pub fn index(self, user_count: usize) -> usize {
        match self {
            Node::User(u) => u as usize,
            Node::Item(i) => user_count + i as usize,
        }
    }

    pub fn from_index(idx: usize, user_count: usize) -> Node {
        if idx < user_count {
            Node::User(idx as u32)
        } else {
            Node::Item((idx - user_count) as u32)
        }
    }

    pub fn is_user(self) -> bool {
        matches!(self, Node::User(_))
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::User(u) => write!(f, "u{u}"),
            Node::Item(i) => write!(f, "i{i}"),
        }
    }
}

impl FromStr for Node {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_at(s.len().min(1));
        let id: u32 = rest.parse().map_err(|_| format!("bad node id `{s}`"))?;
        match kind {
            "u" => Ok(Node::User(id)),
            "i" => Ok(Node::Item(id)),
            _ => Err(format!("bad node id `{s}` (expected u<N> or i<N>)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Csr {
    fn from_sorted_pairs(rows: usize, pairs: impl Iterator<Item = (u32, u32)>) -> Self {
        let mut offsets = vec![0usize; rows + 1];
        let mut targets = Vec::new();
        for (r, c) in pairs {
            offsets[r as usize + 1] += 1;
            targets.push(c);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self { offsets, targets }
    }

    fn row(&self, r: usize) -> &[u32] {
        &self.targets[self.offsets[r]..self.offsets[r + 1]]
    }
}

/// Undirected user–item graph stored in CSR form in both directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    user_count: usize,
    item_count: usize,
    by_user: Csr,
    by_item: Csr,
}

impl BipartiteGraph {
    /// Builds a graph, collapsing duplicate edges.
    pub fn from_edges(user_count: usize, item_count: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self, GraphError> {
        let mut list: Vec<(u32, u32)> = Vec::new();
        for (u, i) in edges {
            if u as usize >= user_count {
                return Err(GraphError::UserOutOfRange { id: u, count: user_count });
            }
            if i as usize >= item_count {
                return Err(GraphError::ItemOutOfRange { id: i, count: item_count });
            }
            list.push((u, i));
        }
        list.sort_unstable();
        list.dedup();
        let by_user = Csr::from_sorted_pairs(user_count, list.iter().copied());
        let mut flipped: Vec<(u32, u32)> = list.iter().map(|&(u, i)| (i, u)).collect();
        flipped.sort_unstable();
        let by_item = Csr::from_sorted_pairs(item_count, flipped.into_iter());
        Ok(Self {
            user_count,
            item_count,
            by_user,
            by_item,
        })
    }

    pub fn empty(user_count: usize, item_count: usize) -> Self {
        Self::from_edges(user_count, item_count, std::iter::empty()).expect("no edges")
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    pub fn edge_count(&self) -> usize {
        self.by_user.targets.len()
    }

    /// Edges as `(user, item)`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.user_count).flat_map(move |u| self.by_user.row(u).iter().map(move |&i| (u as u32, i)))
    }

    pub fn items_of(&self, user: u32) -> &[u32] {
        self.by_user.row(user as usize)
    }

    pub fn users_of(&self, item: u32) -> &[u32] {
        self.by_item.row(item as usize)
    }

    pub fn has_edge(&self, user: u32, item: u32) -> bool {
        self.items_of(user).binary_search(&item).is_ok()
    }

    pub fn contains(&self, node: Node) -> bool {
        match node {
            Node::User(u) => (u as usize) < self.user_count,
            Node::Item(i) => (i as usize) < self.item_count,
        }
    }

    pub fn degree(&self, node: Node) -> usize {
        match node {
            Node::User(u) => self.items_of(u).len(),
            Node::Item(i) => self.users_of(i).len(),
        }
    }

    /// Neighbors in ascending order.
    pub fn neighbors(&self, node: Node) -> Box<dyn Iterator<Item = Node> + '_> {
        match node {
            Node::User(u) => Box::new(self.items_of(u).iter().map(|&i| Node::Item(i))),
            Node::Item(i) => Box::new(self.users_of(i).iter().map(|&u| Node::User(u))),
        }
    }

    /// Nodes with at least one edge: users ascending, then items ascending.
    pub fn active_nodes(&self) -> Vec<Node> {
        let users = (0..self.user_count as u32).filter(|&u| !self.items_of(u).is_empty()).map(Node::User);
        let items = (0..self.item_count as u32).filter(|&i| !self.users_of(i).is_empty()).map(Node::Item);
        users.chain(items).collect()
    }

    pub fn union(&self, other: &BipartiteGraph) -> Result<BipartiteGraph, GraphError> {
        if self.user_count != other.user_count || self.item_count != other.item_count {
            return Err(GraphError::InconsistentCounts);
        }
        Self::from_edges(self.user_count, self.item_count, self.edges().chain(other.edges()))
    }

    /// Symmetric 0/1 adjacency over the users-then-items index, no self loops.
    pub fn adjacency_matrix(&self) -> SparseMatrix {
        let n = self.node_count();
        let mut triplets = Vec::with_capacity(2 * self.edge_count());
        for (u, i) in self.edges() {
            let a = u as usize;
            let b = self.user_count + i as usize;
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        SparseMatrix::from_triplets(n, n, triplets)
    }
}

/// The interaction graph of one time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub time_index: i64,
    pub graph: BipartiteGraph,
}

impl SnapshotGraph {
    pub fn new(time_index: i64, graph: BipartiteGraph) -> Self {
        Self { time_index, graph }
    }
}

impl std::ops::Deref for SnapshotGraph {
    type Target = BipartiteGraph;

    fn deref(&self) -> &BipartiteGraph {
        &self.graph
    }
}

/// Time-ordered snapshots with a pretraining / fine-tuning boundary.
///
/// Snapshots `0..pretrain_split` form the pretraining window; the rest are
/// used for fine-tuning and evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DynamicGraph {
    snapshots: Vec<SnapshotGraph>,
    pretrain_split: usize,
}

impl DynamicGraph {
    pub fn new(snapshots: Vec<SnapshotGraph>, pretrain_split: usize) -> Result<Self, GraphError> {
        if pretrain_split == 0 || pretrain_split >= snapshots.len() {
            return Err(GraphError::BadSplit {
                split: pretrain_split,
                snapshots: snapshots.len(),
            });
        }
        for w in snapshots.windows(2) {
            if w[1].time_index <= w[0].time_index {
                return Err(GraphError::NonIncreasingTime {
                    prev: w[0].time_index,
                    next: w[1].time_index,
                });
            }
            if w[0].user_count() != w[1].user_count() || w[0].item_count() != w[1].item_count() {
                return Err(GraphError::InconsistentCounts);
            }
        }
        Ok(Self {
            snapshots,
            pretrain_split,
        })
    }

    pub fn snapshots(&self) -> &[SnapshotGraph] {
        &self.snapshots
    }

    pub fn snapshot(&self, t: usize) -> &SnapshotGraph {
        &self.snapshots[t]
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn pretrain_split(&self) -> usize {
        self.pretrain_split
    }

    pub fn user_count(&self) -> usize {
        self.snapshots[0].user_count()
    }

    pub fn item_count(&self) -> usize {
        self.snapshots[0].item_count()
    }

    pub fn node_count(&self) -> usize {
        self.user_count() + self.item_count()
    }

    /// Union of snapshots `0..=upto`.
    pub fn history(&self, upto: usize) -> BipartiteGraph {
        let edges = self.snapshots[..=upto].iter().flat_map(|s| s.edges());
        BipartiteGraph::from_edges(self.user_count(), self.item_count(), edges).expect("snapshots share counts")
    }

    /// Union of the pretraining snapshots.
    pub fn pretrain_window(&self) -> BipartiteGraph {
        self.history(self.pretrain_split - 1)
    }

    /// Snapshots after the split.
    pub fn finetune_snapshots(&self) -> &[SnapshotGraph] {
        &self.snapshots[self.pretrain_split..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_round_trips_through_text_and_index() {
        for n in [Node::User(3), Node::Item(0), Node::Item(41)] {
            assert_eq!(n.to_string().parse::<Node>().unwrap(), n);
            assert_eq!(Node::from_index(n.index(5), 5), n);
        }
        assert!("x3".parse::<Node>().is_err());
        assert!("u".parse::<Node>().is_err());
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = BipartiteGraph::from_edges(2, 2, [(0, 1), (0, 1), (1, 0)]).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.users_of(1), &[0]);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(matches!(
            BipartiteGraph::from_edges(1, 1, [(1, 0)]),
            Err(GraphError::UserOutOfRange { id: 1, count: 1 })
        ));
        assert!(matches!(
            BipartiteGraph::from_edges(1, 1, [(0, 3)]),
            Err(GraphError::ItemOutOfRange { id: 3, count: 1 })
        ));
    }

    #[test]
    fn dynamic_graph_validates_split_and_order() {
        let s = |t| SnapshotGraph::new(t, BipartiteGraph::empty(1, 1));
        assert!(DynamicGraph::new(vec![s(0), s(1)], 1).is_ok());
        assert!(matches!(DynamicGraph::new(vec![s(0), s(1)], 2), Err(GraphError::BadSplit { .. })));
        assert!(matches!(DynamicGraph::new(vec![s(0), s(1)], 0), Err(GraphError::BadSplit { .. })));
        assert!(matches!(
            DynamicGraph::new(vec![s(1), s(1)], 1),
            Err(GraphError::NonIncreasingTime { .. })
        ));
    }

    #[test]
    fn history_unions_snapshots() {
        let a = SnapshotGraph::new(0, BipartiteGraph::from_edges(2, 2, [(0, 0)]).unwrap());
        let b = SnapshotGraph::new(1, BipartiteGraph::from_edges(2, 2, [(0, 0), (1, 1)]).unwrap());
        let d = DynamicGraph::new(vec![a, b], 1).unwrap();
        assert_eq!(d.history(1).edge_count(), 2);
        assert_eq!(d.pretrain_window().edge_count(), 1);
    }
}
