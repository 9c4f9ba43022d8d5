//! Subgraph library: k-hop subgraphs of historical centers keyed by their
//! encodings, with exact squared-L2 top-K search.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{put_varint, put_zigzag, Checkpoint, CheckpointError, VarintReader};
use crate::encoder::{encode_subgraph, EmbeddingTable};
use crate::graph::{extract_khop, BipartiteGraph, DynamicGraph, GraphError, Node, Subgraph};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("resource window has no interactions")]
    EmptyWindow,
    #[error("top-K of {k} requested from a library of {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("query key has width {got}, library keys have {expected}")]
    QueryWidth { expected: usize, got: usize },
    #[error("library entry {0} is malformed")]
    BadEntry(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryConfig {
    pub hop: usize,
    pub cap: usize,
    /// Keep only the highest-degree centers; 0 keeps all.
    pub max_entries: usize,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            hop: 2,
            cap: 256,
            max_entries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphLibrary {
    keys: Tensor,
    values: Vec<Subgraph>,
    source_hash: String,
    user_count: usize,
    by_center: HashMap<Node, usize>,
    norms: Vec<f64>,
}

fn sq_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| x as f64 * x as f64).sum()
}

impl SubgraphLibrary {
    pub fn new(keys: Tensor, values: Vec<Subgraph>, source_hash: String, user_count: usize) -> Result<Self, LibraryError> {
        let (rows, _) = keys.matrix_dims()?;
        if rows != values.len() || keys.shape().len() != 2 {
            return Err(LibraryError::Tensor(TensorError::ShapeMismatch {
                op: "library",
                detail: format!("{rows} keys for {} subgraphs", values.len()),
            }));
        }
        let by_center = values.iter().enumerate().map(|(i, sg)| (sg.central(), i)).collect();
        let norms = (0..rows).map(|r| sq_norm(keys.row(r))).collect();
        Ok(Self {
            keys,
            values,
            source_hash,
            user_count,
            by_center,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn key(&self, idx: usize) -> &[f32] {
        self.keys.row(idx)
    }

    pub fn values(&self) -> &[Subgraph] {
        &self.values
    }

    pub fn value(&self, idx: usize) -> &Subgraph {
        &self.values[idx]
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    /// Entry whose subgraph is centered on `node`.
    pub fn find(&self, node: Node) -> Option<usize> {
        self.by_center.get(&node).copied()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("library")
            .with_meta("source_hash", &self.source_hash)
            .with_meta("user_count", self.user_count)
            .with_meta("entries", self.values.len());
        c.push_array("keys", self.keys.clone());
        c.push_section("subgraphs", encode_values(&self.values, self.user_count));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, LibraryError> {
        c.expect_kind("library")?;
        let user_count = c.meta_parse("user_count")?;
        let values = decode_values(c.section("subgraphs")?, user_count)?;
        Self::new(c.array("keys")?.clone(), values, c.meta_str("source_hash")?.to_string(), user_count)
    }
}

// Per entry: hop, center, node count, zigzag deltas of node indices,
// edge count, then per edge the zigzag delta of `a` and `b - a`.
fn encode_values(values: &[Subgraph], user_count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    put_varint(&mut out, values.len() as u64);
    for sg in values {
        put_varint(&mut out, sg.hop() as u64);
        put_varint(&mut out, sg.central().index(user_count) as u64);
        put_varint(&mut out, sg.node_count() as u64);
        let mut prev = 0i64;
        for n in sg.nodes() {
            let idx = n.index(user_count) as i64;
            put_zigzag(&mut out, idx - prev);
            prev = idx;
        }
        put_varint(&mut out, sg.edge_count() as u64);
        let mut prev_a = 0i64;
        for &(a, b) in sg.edges() {
            put_zigzag(&mut out, a as i64 - prev_a);
            put_varint(&mut out, (b - a) as u64);
            prev_a = a as i64;
        }
    }
    out
}

fn decode_values(bytes: &[u8], user_count: usize) -> Result<Vec<Subgraph>, LibraryError> {
    let mut r = VarintReader::new(bytes);
    let count = r.varint()? as usize;
    let mut values = Vec::with_capacity(count);
    for entry in 0..count {
        let hop = r.varint()? as usize;
        let central = Node::from_index(r.varint()? as usize, user_count);
        let n = r.varint()? as usize;
        let mut nodes = Vec::with_capacity(n);
        let mut prev = 0i64;
        for _ in 0..n {
            prev += r.zigzag()?;
            if prev < 0 {
                return Err(LibraryError::BadEntry(entry));
            }
            nodes.push(Node::from_index(prev as usize, user_count));
        }
        let m = r.varint()? as usize;
        let mut edges = Vec::with_capacity(m);
        let mut prev_a = 0i64;
        for _ in 0..m {
            prev_a += r.zigzag()?;
            let a = u32::try_from(prev_a).map_err(|_| LibraryError::BadEntry(entry))?;
            let b = a as u64 + r.varint()?;
            edges.push((a, u32::try_from(b).map_err(|_| LibraryError::BadEntry(entry))?));
        }
        values.push(Subgraph::new(central, nodes, edges, hop).map_err(|_| LibraryError::BadEntry(entry))?);
    }
    if !r.is_done() {
        return Err(LibraryError::BadEntry(count));
    }
    Ok(values)
}

/// Library centers: active nodes of `window`, optionally the
/// `max_entries` highest-degree ones (ties by node order).
pub fn select_centers(window: &BipartiteGraph, max_entries: usize) -> Vec<Node> {
    let mut centers = window.active_nodes();
    if max_entries > 0 && centers.len() > max_entries {
        let mut ranked = centers.clone();
        ranked.sort_by_key(|&n| std::cmp::Reverse(window.degree(n)));
        ranked.truncate(max_entries);
        ranked.sort();
        centers = ranked;
    }
    centers
}

/// One entry per center active in the pretraining window, keyed by its
/// encoding under `table`.
pub fn build_library(
    graph: &DynamicGraph,
    table: &EmbeddingTable,
    cfg: &LibraryConfig,
    run_seed: u64,
    source_hash: &str,
) -> Result<SubgraphLibrary, LibraryError> {
    let window = graph.pretrain_window();
    if window.edge_count() == 0 {
        return Err(LibraryError::EmptyWindow);
    }
    let centers = select_centers(&window, cfg.max_entries);
    let d = table.dim();
    let mut keys = Vec::with_capacity(centers.len() * d);
    let mut values = Vec::with_capacity(centers.len());
    for c in centers {
        let sg = extract_khop(&window, c, cfg.hop, cfg.cap, run_seed)?;
        keys.extend(encode_subgraph(table, &sg).into_iter().map(|v| v as f32));
        values.push(sg);
    }
    let keys = Tensor::new(vec![values.len(), d], keys)?;
    SubgraphLibrary::new(keys, values, source_hash.to_string(), graph.user_count())
}

/// `qᵀq + rᵀr − 2qᵀr` evaluated in `f64`.
pub fn squared_distance(q: &[f32], q_norm: f64, r: &[f32], r_norm: f64) -> f64 {
    let cross: f64 = q.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum();
    q_norm + r_norm - 2.0 * cross
}

/// Exact `K` nearest keys by squared L2, ascending; ties by index.
pub fn l2_topk(library: &SubgraphLibrary, query: &[f32], k: usize) -> Result<Vec<(usize, f64)>, LibraryError> {
    if k > library.len() {
        return Err(LibraryError::KTooLarge { k, size: library.len() });
    }
    if query.len() != library.dim() {
        return Err(LibraryError::QueryWidth {
            expected: library.dim(),
            got: query.len(),
        });
    }
    let qn = sq_norm(query);
    let mut all: Vec<(usize, f64)> = (0..library.len())
        .map(|r| (r, squared_distance(query, qn, library.key(r), library.norms[r]).max(0.0)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, cmp);
    }
    all.truncate(k);
    all.sort_by(cmp);
    Ok(all)
}
