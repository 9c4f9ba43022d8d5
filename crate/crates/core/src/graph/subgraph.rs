use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;

use super::{BipartiteGraph, GraphError, Node};
use crate::seed;
use crate::tensor::SparseMatrix;

/// A central node with its extracted neighborhood.
///
/// `nodes` maps local indices to global nodes; `edges` holds undirected
/// local pairs `(a, b)` with `a < b`, sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    central: Node,
    nodes: Vec<Node>,
    edges: Vec<(u32, u32)>,
    hop: usize,
}

impl Subgraph {
    pub fn new(central: Node, nodes: Vec<Node>, edges: impl IntoIterator<Item = (u32, u32)>, hop: usize) -> Result<Self, String> {
        if !nodes.contains(&central) {
            return Err(format!("central node {central} missing from node list"));
        }
        let unique: BTreeSet<Node> = nodes.iter().copied().collect();
        if unique.len() != nodes.len() {
            return Err("duplicate nodes in subgraph".into());
        }
        let n = nodes.len() as u32;
        let mut canon = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(format!("edge ({a},{b}) outside {n} local nodes"));
            }
            if a == b {
                continue;
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Self {
            central,
            nodes,
            edges: canon,
            hop,
        })
    }

    /// The one-node subgraph of an isolated center.
    pub fn singleton(central: Node, hop: usize) -> Self {
        Self {
            central,
            nodes: vec![central],
            edges: Vec::new(),
            hop,
        }
    }

    pub fn central(&self) -> Node {
        self.central
    }

    pub fn central_local(&self) -> usize {
        self.nodes.iter().position(|&n| n == self.central).expect("central is a member")
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, node: Node) -> bool {
        self.nodes.contains(&node)
    }

    /// Edges as global node pairs, each with the smaller node first.
    pub fn global_edges(&self) -> BTreeSet<(Node, Node)> {
        self.edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (self.nodes[a as usize], self.nodes[b as usize]);
                (x.min(y), x.max(y))
            })
            .collect()
    }

    /// Symmetric 0/1 local adjacency.
    pub fn adjacency_matrix(&self) -> SparseMatrix {
        let n = self.nodes.len();
        let mut t = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            t.push((a as usize, b as usize, 1.0));
            t.push((b as usize, a as usize, 1.0));
        }
        SparseMatrix::from_triplets(n, n, t)
    }

    /// Local neighbor lists.
    pub fn local_neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }
}

/// Breadth-first `k`-hop neighborhood of `center`.
///
/// When a hop would push the node count past `cap`, that hop's new nodes are
/// sampled uniformly down to the remaining budget (stream `"khop"` keyed by
/// the center). The result is the induced subgraph on the kept nodes, so
/// every kept node stays reachable from the center within `k` hops. An
/// isolated center yields a singleton.
pub fn extract_khop(graph: &BipartiteGraph, center: Node, k: usize, cap: usize, seed: u64) -> Result<Subgraph, GraphError> {
    if k == 0 {
        return Err(GraphError::BadHop);
    }
    match center {
        Node::User(u) if u as usize >= graph.user_count() => {
            return Err(GraphError::UserOutOfRange {
                id: u,
                count: graph.user_count(),
            })
        }
        Node::Item(i) if i as usize >= graph.item_count() => {
            return Err(GraphError::ItemOutOfRange {
                id: i,
                count: graph.item_count(),
            })
        }
        _ => {}
    }
    let cap = cap.max(1);
    let mut rng = seed::rng_keyed(seed, "khop", center.index(graph.user_count()) as u64);
    let mut local: HashMap<Node, u32> = HashMap::new();
    local.insert(center, 0);
    let mut nodes = vec![center];
    let mut frontier = vec![center];
    for _ in 0..k {
        if frontier.is_empty() || nodes.len() >= cap {
            break;
        }
        let next: BTreeSet<Node> = frontier
            .iter()
            .flat_map(|&n| graph.neighbors(n))
            .filter(|n| !local.contains_key(n))
            .collect();
        let mut next: Vec<Node> = next.into_iter().collect();
        let budget = cap - nodes.len();
        if next.len() > budget {
            let mut keep: Vec<usize> = sample(&mut rng, next.len(), budget).into_vec();
            keep.sort_unstable();
            next = keep.into_iter().map(|i| next[i]).collect();
        }
        for &n in &next {
            local.insert(n, nodes.len() as u32);
            nodes.push(n);
        }
        frontier = next;
    }
    let mut edges = Vec::new();
    for (a, &n) in nodes.iter().enumerate() {
        for m in graph.neighbors(n) {
            if let Some(&b) = local.get(&m) {
                if (a as u32) < b {
                    edges.push((a as u32, b));
                }
            }
        }
    }
    Ok(Subgraph::new(center, nodes, edges, k).expect("constructed consistently"))
}

/// Union of two subgraphs plus a link between their centers.
///
/// The result is centered on `q`'s center. Shared nodes appear once; when
/// both centers coincide no self loop is added.
pub fn fuse_subgraphs(q: &Subgraph, r: &Subgraph) -> Subgraph {
    let mut nodes = q.nodes.clone();
    let mut index: HashMap<Node, u32> = nodes.iter().enumerate().map(|(i, &n)| (n, i as u32)).collect();
    for &n in &r.nodes {
        if !index.contains_key(&n) {
            index.insert(n, nodes.len() as u32);
            nodes.push(n);
        }
    }
    let mut edges: Vec<(u32, u32)> = q.edges.clone();
    for &(a, b) in &r.edges {
        edges.push((index[&r.nodes[a as usize]], index[&r.nodes[b as usize]]));
    }
    if q.central != r.central {
        edges.push((index[&q.central], index[&r.central]));
    }
    Subgraph::new(q.central, nodes, edges, q.hop.max(r.hop)).expect("indices come from the union")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> BipartiteGraph {
        // u0 - i0 - u1
        BipartiteGraph::from_edges(2, 1, [(0, 0), (1, 0)]).unwrap()
    }

    #[test]
    fn path_two_hops() {
        let sg = extract_khop(&path(), Node::User(0), 2, 256, 0).unwrap();
        let set: BTreeSet<Node> = sg.nodes().iter().copied().collect();
        assert_eq!(set, [Node::User(0), Node::Item(0), Node::User(1)].into_iter().collect());
        assert_eq!(sg.edge_count(), 2);
    }

    #[test]
    fn isolated_center_is_singleton() {
        let g = BipartiteGraph::from_edges(3, 2, [(0, 0)]).unwrap();
        for k in 1..4 {
            let sg = extract_khop(&g, Node::User(2), k, 256, 1).unwrap();
            assert_eq!(sg, Subgraph::singleton(Node::User(2), k));
        }
    }

    #[test]
    fn zero_hops_rejected() {
        assert!(matches!(extract_khop(&path(), Node::User(0), 0, 8, 0), Err(GraphError::BadHop)));
    }

    #[test]
    fn cap_limits_size_and_is_seeded() {
        let edges: Vec<(u32, u32)> = (0..50).map(|i| (0, i)).collect();
        let g = BipartiteGraph::from_edges(1, 50, edges).unwrap();
        let a = extract_khop(&g, Node::User(0), 1, 10, 9).unwrap();
        let b = extract_khop(&g, Node::User(0), 1, 10, 9).unwrap();
        let c = extract_khop(&g, Node::User(0), 1, 10, 10).unwrap();
        assert_eq!(a.node_count(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.edge_count(), 9);
    }

    #[test]
    fn fuse_disjoint_singletons() {
        let q = Subgraph::singleton(Node::User(0), 2);
        let r = Subgraph::singleton(Node::Item(4), 2);
        let f = fuse_subgraphs(&q, &r);
        assert_eq!(f.node_count(), 2);
        assert_eq!(f.edge_count(), 1);
        assert_eq!(f.central(), Node::User(0));
    }

    #[test]
    fn self_fusion_is_identity() {
        let q = extract_khop(&path(), Node::User(0), 2, 256, 0).unwrap();
        assert_eq!(fuse_subgraphs(&q, &q), q);
    }

    #[test]
    fn fuse_overlapping_pairs() {
        // q = {a, b}, r = {b, c}: union edges a-b, b-c plus the a-c link
        let q = Subgraph::new(Node::User(0), vec![Node::User(0), Node::Item(0)], [(0, 1)], 1).unwrap();
        let r = Subgraph::new(Node::User(1), vec![Node::User(1), Node::Item(0)], [(0, 1)], 1).unwrap();
        let f = fuse_subgraphs(&q, &r);
        assert_eq!(f.node_count(), 3);
        assert_eq!(f.edge_count(), 3);
    }
}
