//! LightGCN-style embedding backbone: temporal propagation, subgraph
//! encodings and BPR pretraining.
//!
//! Graph convolution here is symmetric normalization `D^{-1/2} A D^{-1/2}`
//! except that a node with no edges keeps its own row. Under that rule an
//! empty graph is the identity and a singleton subgraph encodes to
//! `(L + 1)` times its center.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::graph::{BipartiteGraph, DynamicGraph, Node, Subgraph};
use crate::seed;
use crate::tensor::{OptimError, Optimizer, OptimizerKind, ParamSet, SparseMatrix, Tape, Tensor, TensorError, Var};

pub const EMBEDDINGS: &str = "embeddings";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("pretraining window has no edges")]
    EmptyWindow,
    #[error("table covers {table_users} users / {table_items} items, graph has {graph_users} / {graph_items}")]
    CountMismatch {
        table_users: usize,
        table_items: usize,
        graph_users: usize,
        graph_items: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// User and item embeddings stacked users-first in one `[N x d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    user_count: usize,
    item_count: usize,
    layers: usize,
    data: Tensor,
}

impl EmbeddingTable {
    pub fn new(user_count: usize, item_count: usize, layers: usize, data: Tensor) -> Result<Self, TensorError> {
        let (rows, _) = data.matrix_dims()?;
        if rows != user_count + item_count || data.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_table",
                detail: format!("{rows} rows for {user_count} users + {item_count} items"),
            });
        }
        if !data.is_finite() {
            return Err(TensorError::NonFinite { op: "embedding_table" });
        }
        Ok(Self {
            user_count,
            item_count,
            layers,
            data,
        })
    }

    /// Uniform(−0.1, 0.1) initialization from the `"init"` stream.
    pub fn random(user_count: usize, item_count: usize, dim: usize, layers: usize, run_seed: u64) -> Self {
        let mut rng = seed::rng(run_seed, "init");
        let n = (user_count + item_count) * dim;
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
        Self {
            user_count,
            item_count,
            layers,
            data: Tensor::new(vec![user_count + item_count, dim], data).expect("sized above"),
        }
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

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn row(&self, node: Node) -> &[f32] {
        self.data.row(node.index(self.user_count))
    }

    pub fn user_embeddings(&self) -> Tensor {
        let d = self.dim();
        Tensor::new(vec![self.user_count, d], self.data.data()[..self.user_count * d].to_vec()).expect("slice of table")
    }

    pub fn item_embeddings(&self) -> Tensor {
        let d = self.dim();
        Tensor::new(vec![self.item_count, d], self.data.data()[self.user_count * d..].to_vec()).expect("slice of table")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("encoder")
            .with_meta("user_count", self.user_count)
            .with_meta("item_count", self.item_count)
            .with_meta("layers", self.layers);
        c.push_array(EMBEDDINGS, self.data.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CheckpointError> {
        c.expect_kind("encoder")?;
        Ok(Self::new(
            c.meta_parse("user_count")?,
            c.meta_parse("item_count")?,
            c.meta_parse("layers")?,
            c.array(EMBEDDINGS)?.clone(),
        )?)
    }

    fn check_graph(&self, g: &BipartiteGraph) -> Result<(), EncoderError> {
        if g.user_count() != self.user_count || g.item_count() != self.item_count {
            return Err(EncoderError::CountMismatch {
                table_users: self.user_count,
                table_items: self.item_count,
                graph_users: g.user_count(),
                graph_items: g.item_count(),
            });
        }
        Ok(())
    }
}

/// Symmetric normalization of a 0/1 adjacency, identity on isolated rows.
pub fn gconv_operator(adjacency: &SparseMatrix) -> SparseMatrix {
    let n = adjacency.rows();
    let deg: Vec<f64> = (0..n).map(|r| adjacency.row(r).map(|(_, v)| v).sum()).collect();
    let mut t = Vec::with_capacity(adjacency.nnz() + n);
    for r in 0..n {
        if deg[r] == 0.0 {
            t.push((r, r, 1.0));
            continue;
        }
        for (c, v) in adjacency.row(r) {
            t.push((r, c, v / (deg[r] * deg[c]).sqrt()));
        }
    }
    SparseMatrix::from_triplets(n, n, t)
}

/// Graph convolution operator over a whole bipartite graph.
pub fn graph_operator(graph: &BipartiteGraph) -> Rc<SparseMatrix> {
    Rc::new(gconv_operator(&graph.adjacency_matrix()))
}

/// Mean over layers `0..=layers` of repeated convolution, on the tape.
pub fn propagate_mean(tape: &mut Tape, op: &Rc<SparseMatrix>, x: Var, layers: usize) -> Result<Var, TensorError> {
    let mut acc = x;
    let mut cur = x;
    for _ in 0..layers {
        cur = tape.spmm(Rc::clone(op), cur)?;
        acc = tape.add(acc, cur)?;
    }
    tape.scale(acc, 1.0 / (layers as f64 + 1.0))
}

/// `h_t = forward(h_{t−1}; G_{t−1})`: mean of `L + 1` propagation layers.
pub fn temporal_forward(table: &EmbeddingTable, prev: &BipartiteGraph) -> Result<EmbeddingTable, EncoderError> {
    table.check_graph(prev)?;
    let op = graph_operator(prev);
    let mut tape = Tape::new();
    let x = tape.constant(&table.data)?;
    let out = propagate_mean(&mut tape, &op, x, table.layers)?;
    Ok(EmbeddingTable::new(
        table.user_count,
        table.item_count,
        table.layers,
        tape.to_tensor(out),
    )?)
}

/// Per-local-node weights `Σ_{l=first..=last} (Â^l e_c)` of the center's
/// row after `l` convolutions on the subgraph's own adjacency.
pub fn layer_weights(sg: &Subgraph, first: usize, last: usize) -> Vec<f64> {
    let op = gconv_operator(&sg.adjacency_matrix());
    let mut v = vec![0.0; sg.node_count()];
    v[sg.central_local()] = 1.0;
    let mut w = vec![0.0; v.len()];
    for l in 0..=last {
        if l >= first {
            for (a, b) in w.iter_mut().zip(&v) {
                *a += b;
            }
        }
        if l < last {
            v = op.matvec(&v);
        }
    }
    w
}

/// `[B x N]` matrix whose row `b` pools the feature table into subgraph
/// `b`'s encoding over layers `first..=last`.
pub fn pooling_matrix<'a>(subgraphs: impl IntoIterator<Item = &'a Subgraph>, user_count: usize, node_count: usize, first: usize, last: usize) -> SparseMatrix {
    let mut t = Vec::new();
    let mut rows = 0;
    for (b, sg) in subgraphs.into_iter().enumerate() {
        for (node, w) in sg.nodes().iter().zip(layer_weights(sg, first, last)) {
            if w != 0.0 {
                t.push((b, node.index(user_count), w));
            }
        }
        rows = b + 1;
    }
    SparseMatrix::from_triplets(rows, node_count, t)
}

fn pool(table: &EmbeddingTable, sg: &Subgraph, first: usize) -> Vec<f64> {
    let d = table.dim();
    let mut out = vec![0.0; d];
    for (node, w) in sg.nodes().iter().zip(layer_weights(sg, first, table.layers)) {
        for (o, &x) in out.iter_mut().zip(table.row(*node)) {
            *o += w * x as f64;
        }
    }
    out
}

/// Subgraph encoding: the center's representation summed over layers `0..=L`.
pub fn encode_subgraph(table: &EmbeddingTable, sg: &Subgraph) -> Vec<f64> {
    pool(table, sg, 0)
}

/// Intra-subgraph aggregation over layers `1..=L` (layer 0 excluded).
pub fn encode_subgraph_intra(table: &EmbeddingTable, sg: &Subgraph) -> Vec<f64> {
    pool(table, sg, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// One triplet per positive edge in shuffled order. Negatives are uniform
/// over items the user has no edge to in `exclude`; users with no such
/// item are skipped.
pub fn sample_triplets(positives: &BipartiteGraph, exclude: &BipartiteGraph, rng: &mut impl Rng) -> Vec<Triplet> {
    let items = positives.item_count() as u32;
    let mut out = Vec::with_capacity(positives.edge_count());
    for (u, i) in positives.edges() {
        let seen = exclude.items_of(u);
        if seen.len() >= items as usize {
            continue;
        }
        let neg = loop {
            let j = rng.gen_range(0..items);
            if seen.binary_search(&j).is_err() && j != i {
                break j;
            }
        };
        out.push(Triplet { user: u, pos: i, neg });
    }
    out.shuffle(rng);
    out
}

/// `−Σ log σ(u·p − u·n)` over matching rows.
pub fn bpr_loss(tape: &mut Tape, users: Var, pos: Var, neg: Var) -> Result<Var, TensorError> {
    let up = tape.mul(users, pos)?;
    let sp = tape.row_sum(up)?;
    let un = tape.mul(users, neg)?;
    let sn = tape.row_sum(un)?;
    let diff = tape.sub(sp, sn)?;
    let ls = tape.log_sigmoid(diff)?;
    let total = tape.sum(ls)?;
    tape.scale(total, -1.0)
}

/// `(1 / 2|B|) Σ (‖e_u‖² + ‖e_{i+}‖² + ‖e_{i−}‖²)` over raw embedding rows.
pub fn reg_loss(tape: &mut Tape, embeddings: Var, user_count: usize, batch: &[Triplet]) -> Result<Var, TensorError> {
    let mut rows = Vec::with_capacity(3 * batch.len());
    rows.extend(batch.iter().map(|t| t.user as usize));
    rows.extend(batch.iter().map(|t| user_count + t.pos as usize));
    rows.extend(batch.iter().map(|t| user_count + t.neg as usize));
    let e = tape.gather_rows(embeddings, rows)?;
    let sq = tape.mul(e, e)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 0.5 / batch.len() as f64)
}

/// Gathers user, positive and negative rows of a users-first table.
pub fn gather_triplets(tape: &mut Tape, x: Var, user_count: usize, batch: &[Triplet]) -> Result<(Var, Var, Var), TensorError> {
    let u = tape.gather_rows(x, batch.iter().map(|t| t.user as usize).collect())?;
    let p = tape.gather_rows(x, batch.iter().map(|t| user_count + t.pos as usize).collect())?;
    let n = tape.gather_rows(x, batch.iter().map(|t| user_count + t.neg as usize).collect())?;
    Ok((u, p, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BprConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the embedding-norm penalty.
    pub mu: f64,
    pub optimizer: OptimizerKind,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 3,
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            mu: 1e-4,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Inputs of one BPR epoch: the graph propagated over, the graph positives
/// are drawn from, and the graph whose items are never sampled as negatives.
pub struct BprEpoch<'a> {
    pub propagation: &'a Rc<SparseMatrix>,
    pub positives: &'a BipartiteGraph,
    pub exclude: &'a BipartiteGraph,
}

/// Runs one epoch of minibatch BPR over `params[EMBEDDINGS]`, returning the
/// mean pre-update BPR loss per triplet (`None` when nothing was sampled).
pub fn bpr_epoch(
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    epoch: &BprEpoch<'_>,
    cfg: &BprConfig,
    rng: &mut impl Rng,
) -> Result<Option<f64>, EncoderError> {
    let user_count = epoch.positives.user_count();
    let triplets = sample_triplets(epoch.positives, epoch.exclude, rng);
    if triplets.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for batch in triplets.chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None)?;
        let e = bound.var(EMBEDDINGS);
        let x = propagate_mean(&mut tape, epoch.propagation, e, cfg.layers)?;
        let (u, p, n) = gather_triplets(&mut tape, x, user_count, batch)?;
        let bpr = bpr_loss(&mut tape, u, p, n)?;
        let reg = reg_loss(&mut tape, e, user_count, batch)?;
        let reg = tape.scale(reg, cfg.mu)?;
        let loss = tape.add(bpr, reg)?;
        total += tape.scalar(bpr);
        let grads = tape.backward(loss)?;
        optimizer.step(params, &bound.gradients(&grads))?;
    }
    Ok(Some(total / triplets.len() as f64))
}

#[derive(Clone, Debug)]
pub struct BprOutcome {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

/// Trains embeddings on the union of the pretraining snapshots.
pub fn pretrain_bpr(graph: &DynamicGraph, cfg: &BprConfig, run_seed: u64) -> Result<BprOutcome, EncoderError> {
    let window = graph.pretrain_window();
    if window.edge_count() == 0 {
        return Err(EncoderError::EmptyWindow);
    }
    let init = EmbeddingTable::random(graph.user_count(), graph.item_count(), cfg.dim, cfg.layers, run_seed);
    let mut params = ParamSet::new();
    params.insert(EMBEDDINGS, init.into_data());
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, 0.0);
    let op = graph_operator(&window);
    let epoch = BprEpoch {
        propagation: &op,
        positives: &window,
        exclude: &window,
    };
    let mut losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let mut rng = seed::rng_keyed(run_seed, "sampling", e as u64);
        if let Some(l) = bpr_epoch(&mut params, &mut optimizer, &epoch, cfg, &mut rng)? {
            log::debug!("bpr epoch {e}: loss {l:.6}");
            losses.push(l);
        }
    }
    let data = params.get(EMBEDDINGS).expect("inserted above").clone();
    Ok(BprOutcome {
        table: EmbeddingTable::new(graph.user_count(), graph.item_count(), cfg.layers, data)?,
        epoch_losses: losses,
    })
}
