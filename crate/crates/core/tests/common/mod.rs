//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use dgrec::encoder::{pretrain_bpr, BprConfig, BprOutcome, EmbeddingTable};
use dgrec::graph::{build_dynamic, BipartiteGraph, DynamicGraph, IdMaps, Node, Subgraph};
use dgrec::labeling::{build_task_dataset, LabelConfig, TaskDataset};
use dgrec::library::{build_library, LibraryConfig, SubgraphLibrary};
use dgrec::synth::{generate_synthetic, SyntheticSpec};

pub struct Fixture {
    pub spec: SyntheticSpec,
    pub graph: DynamicGraph,
    pub maps: IdMaps,
    pub pre: BprOutcome,
    pub library: SubgraphLibrary,
    pub lib_cfg: LibraryConfig,
}

impl Fixture {
    /// Planted block of a dense node.
    pub fn block(&self, n: Node) -> usize {
        match n {
            Node::User(u) => self.spec.user_block(self.maps.users[u as usize]),
            Node::Item(i) => self.spec.item_block(self.maps.items[i as usize]),
        }
    }

    pub fn dataset(&self, cfg: &LabelConfig, seed: u64) -> TaskDataset {
        build_task_dataset(&self.graph, &self.library, &self.lib_cfg, &self.pre.table, cfg, seed, "fixture").unwrap()
    }
}

/// The planted two-block 20 x 20 instance, pretrained.
pub fn two_block(seed: u64) -> Fixture {
    let spec = SyntheticSpec {
        users: 20,
        items: 20,
        blocks: 2,
        within_prob: 0.95,
        snapshots: 4,
        seed,
        ..Default::default()
    };
    fixture(spec, 2, BprConfig { epochs: 60, lr: 0.01, ..Default::default() }, seed)
}

pub fn fixture(spec: SyntheticSpec, split: usize, bpr: BprConfig, seed: u64) -> Fixture {
    let data = generate_synthetic(&spec).unwrap();
    let (graph, maps) = build_dynamic(&data.interactions, spec.granularity, split).unwrap();
    let pre = pretrain_bpr(&graph, &bpr, seed).unwrap();
    let lib_cfg = LibraryConfig::default();
    let library = build_library(&graph, &pre.table, &lib_cfg, seed, "fixture").unwrap();
    Fixture { spec, graph, maps, pre, library, lib_cfg }
}

// ---- graph oracles ----

/// Nodes within `k` hops of `center`, by breadth-first search.
pub fn bfs_ball(graph: &BipartiteGraph, center: Node, k: usize) -> BTreeSet<Node> {
    let mut seen = BTreeSet::from([center]);
    let mut queue = VecDeque::from([(center, 0)]);
    while let Some((n, d)) = queue.pop_front() {
        if d == k {
            continue;
        }
        let next: Vec<Node> = match n {
            Node::User(u) => graph.items_of(u).iter().map(|&i| Node::Item(i)).collect(),
            Node::Item(i) => graph.users_of(i).iter().map(|&u| Node::User(u)).collect(),
        };
        for m in next {
            if seen.insert(m) {
                queue.push_back((m, d + 1));
            }
        }
    }
    seen
}

/// Squared L2 distances to every key, sorted by (distance, index).
pub fn full_scan(keys: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let d: f64 = key.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (i, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

// ---- encoding and relevance-gain oracles ----

/// Center encoding of an edge set: dense symmetric normalization (identity
/// on isolated nodes), summing `Â^l e_c` over `l = first..=layers`.
pub fn dense_encode(table: &EmbeddingTable, center: Node, edges: &BTreeSet<(Node, Node)>, first: usize) -> Vec<f64> {
    let mut nodes: Vec<Node> = vec![center];
    for &(a, b) in edges {
        for n in [a, b] {
            if !nodes.contains(&n) {
                nodes.push(n);
            }
        }
    }
    let n = nodes.len();
    let pos: HashMap<Node, usize> = nodes.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut adj = vec![vec![0.0f64; n]; n];
    for &(a, b) in edges {
        if a != b {
            adj[pos[&a]][pos[&b]] = 1.0;
            adj[pos[&b]][pos[&a]] = 1.0;
        }
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let op: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if deg[i] == 0.0 {
                        if i == j { 1.0 } else { 0.0 }
                    } else if adj[i][j] > 0.0 {
                        1.0 / (deg[i] * deg[j]).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut v = vec![0.0; n];
    v[0] = 1.0;
    let mut w = vec![0.0; n];
    for l in 0..=table.layers() {
        if l >= first {
            w.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        v = (0..n).map(|i| (0..n).map(|j| op[i][j] * v[j]).sum()).collect();
    }
    let mut out = vec![0.0; table.dim()];
    for (node, wi) in nodes.iter().zip(w) {
        for (o, &x) in out.iter_mut().zip(table.row(*node)) {
            *o += wi * x as f64;
        }
    }
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

/// `C_r` from first principles: fuse the edge sets, connect the centers,
/// and compare mean cosine to the positives before and after.
pub fn brute_delta_rel(table: &EmbeddingTable, q: &Subgraph, r: &Subgraph, positives: &[&Subgraph]) -> f64 {
    let pos: Vec<Vec<f64>> = positives.iter().map(|p| dense_encode(table, p.central(), &p.global_edges(), 0)).collect();
    let sim = |e: &[f64]| pos.iter().map(|p| cos(e, p)).sum::<f64>() / pos.len() as f64;
    let mut fused = q.global_edges();
    fused.extend(r.global_edges());
    if q.central() != r.central() {
        fused.insert((q.central(), r.central()));
    }
    let before = dense_encode(table, q.central(), &q.global_edges(), 0);
    let after = dense_encode(table, q.central(), &fused, 0);
    sim(&after) - sim(&before)
}

// ---- ranking oracles ----

/// Recall and nDCG for one user straight from the definitions.
pub fn reference_user_metrics(pred: &[u32], truth: &BTreeSet<u32>, k: usize) -> (f64, f64) {
    let top: Vec<u32> = pred.iter().take(k).copied().collect();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in top.iter().enumerate() {
        if truth.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (1..=truth.len().min(k)).map(|p| 1.0 / ((p + 1) as f64).log2()).sum();
    (hits as f64 / truth.len() as f64, dcg / ideal)
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0;
            for &i in &idx[s..=e] {
                r[i] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Label counts per (same block?, label) over every candidate pair.
pub type PairTally = BTreeMap<(bool, &'static str), usize>;
pub mod gradsuite;

/// Drifting synthetic run: four blocks whose preferences rotate once at
/// the split, dense history and sparse fine-tune snapshots.
pub fn drift_config(seed: u64) -> dgrec::config::RunConfig {
    let text = format!(
        r#"
        seed = {seed}
        [data]
        split = 3
        [synth]
        users = 100
        items = 100
        blocks = 4
        within_prob = 0.9
        snapshots = 6
        activity = [8, 8, 8, 2, 2, 2]
        drift_start = 3
        drift_every = 100
        seed = {seed}
        [train]
        bpr_epochs = 100
        bpr_lr = 0.01
        tam_epochs = 30
        finetune_epochs = 20
        finetune_lr = 0.01
        [eval]
        k = 20
        "#
    );
    dgrec::config::RunConfig::from_toml_str(&text, &[]).unwrap()
}
